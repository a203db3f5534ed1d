"""One mode-k least-squares solve under either communication schedule.

tensor-stationary: nonzeros stay on their grid cell; factor blocks are
allgathered within per-mode slice groups and the MTTKRP accumulator is
reduce-scattered along the solved mode's slices.  Exact solves cache the
gathered chunks across a round; sketched solves gather only sampled rows
and the reduction is unchanged by sampling.

accumulator-stationary: each rank's output block stays put.  Only
sampled rows (plus their indices and probabilities) are allgathered to
everyone, the local downsampled MTTKRP writes straight into the
stationary block, and no reduction occurs.  Defined only for sketched
solves; exact solves must use the tensor-stationary schedule.

Sketched solves minimize the sketched problem: the right-hand side is
the downsampled MTTKRP with weights applied to both the sampled tensor
columns and the sampled design rows, and the system matrix is the Gram
matrix of the weighted sampled rows.
"""

import time

import numpy as np

from . import grid as gridmod
from .linalg import hadamard_gram_chain, pseudo_inverse
from .mttkrp import downsampled_mttkrp, gather_sampled_nonzeros_to_csr, mttkrp_exact
from .samplers import arls_lev_sample, sample_weights, sts_sample


class ScheduleError(ValueError):
    """Invalid schedule / sampler combination or missing state."""


class SolveContext:
    """Everything one mode solve needs, shared across a run."""

    def __init__(self, grid, schedule, sampler, J, factors, grams, local,
                 ledger, seed, workers=1):
        self.grid = grid
        self.schedule = schedule
        self.sampler = sampler          # 'exact' | 'arls-lev' | 'sts'
        self.J = J
        self.factors = factors          # list of FactorBlocks per mode
        self.grams = grams              # list of R x R Gram matrices
        self.local = local              # LocalTensorSet
        self.ledger = ledger
        self.seed = seed
        self.workers = workers
        self.round_id = 0
        self.arls_states = [None] * len(factors)
        self.trees = [None] * len(factors)
        self.gathered = {}              # mode -> list over chunks of row arrays
        self.timings = {"sampling": 0.0, "gather": 0.0, "mttkrp": 0.0,
                        "reduction": 0.0, "postprocess": 0.0}
        self.stats = {"sampled_nnz": 0}

    def tick(self, phase, t0):
        t1 = time.perf_counter()
        self.timings[phase] += t1 - t0
        return t1


def refresh_gathered(ctx: SolveContext, mode: int):
    """Allgather mode's factor blocks within each of its slice groups."""
    grid = ctx.grid
    chunks = []
    for c in range(grid.grid_dims[mode]):
        group = grid.slice_group(mode, c)
        payloads = [ctx.factors[mode].blocks[p] for p in group]
        chunks.append(gridmod.allgather(payloads, list(group),
                                        ledger=ctx.ledger, round_id=ctx.round_id))
    ctx.gathered[mode] = chunks


def _meter_allgather_model(ledger, round_id, ranks, member_words):
    """Record an allgather's traffic without materializing the payloads."""
    q = len(ranks)
    if ledger is None or q <= 1:
        return
    total = int(sum(member_words))
    for rank, w in zip(ranks, member_words):
        ledger.add(round_id, gridmod.ALLGATHER, rank, total - int(w), q - 1)


def draw_batch(ctx: SolveContext, k: int):
    """Run the configured sampler for a mode-k solve."""
    t0 = time.perf_counter()
    chain_pinv = pseudo_inverse(hadamard_gram_chain(ctx.grams, skip=k))
    if ctx.sampler == "arls-lev":
        full = [fb.assemble() for fb in ctx.factors]
        batch = arls_lev_sample(ctx.arls_states, k, ctx.J, full, ctx.seed,
                                round_id=ctx.round_id, ledger=ctx.ledger)
    elif ctx.sampler == "sts":
        batch = sts_sample(ctx.trees, k, ctx.J, chain_pinv, ctx.grams, ctx.factors,
                           ctx.seed, round_id=ctx.round_id, grid=ctx.grid,
                           ledger=ctx.ledger)
    else:
        raise ScheduleError("no sampler configured (sampler=%r)" % ctx.sampler)
    ctx.tick("sampling", t0)
    return batch


def _sketched_gram(ctx: SolveContext, k: int, batch, metered: bool):
    """Gram of the weighted sampled rows, summed in cell-owner rank order."""
    Hw = batch.H * batch.weights[:, None]
    grid = ctx.grid
    if not metered or grid.P == 1:
        return Hw.T @ Hw
    cell = np.zeros(batch.J, dtype=np.int64)
    for j in range(grid.N):
        c = grid.chunk_of(j, batch.X[:, j]) if j != k else np.zeros(batch.J, dtype=np.int64)
        cell = cell * grid.grid_dims[j] + c
    order = np.argsort(cell, kind="stable")
    bounds = np.searchsorted(cell[order], np.arange(grid.P + 1))
    partials = []
    for p in range(grid.P):
        rows = Hw[order[bounds[p]:bounds[p + 1]]]
        partials.append(rows.T @ rows)
    return gridmod.allreduce(partials, list(range(grid.P)),
                             ledger=ctx.ledger, round_id=ctx.round_id)


def _postprocess(ctx, k, per_rank_blocks, system_pinv):
    t0 = time.perf_counter()
    fb = ctx.factors[k]
    fb.blocks = [np.ascontiguousarray(b @ system_pinv) for b in per_rank_blocks]
    ctx.tick("postprocess", t0)


def solve_mode_tensor_stationary(ctx: SolveContext, k: int, injected_batch=None):
    """Gather, local MTTKRP, reduce-scatter along mode-k slices, multiply."""
    if ctx.local.schedule != "tensor-stationary":
        raise ScheduleError("context partition is %r" % ctx.local.schedule)
    grid = ctx.grid
    N = grid.N
    exact = ctx.sampler == "exact" and injected_batch is None

    if exact:
        t0 = time.perf_counter()
        for i in range(N):
            if i != k and i not in ctx.gathered:
                refresh_gathered(ctx, i)
        t0 = ctx.tick("gather", t0)
        accumulators = []
        for p in range(grid.P):
            coords = grid.coords(p)
            rows = [None] * N
            offs = [0] * N
            for i in range(N):
                if i == k:
                    continue
                rows[i] = ctx.gathered[i][coords[i]]
                offs[i] = int(grid.chunk_offsets[i][coords[i]])
            accumulators.append(mttkrp_exact(ctx.local.local(p, k), rows,
                                             offsets=offs, workers=ctx.workers))
        t0 = ctx.tick("mttkrp", t0)
        out_blocks = _reduce_along_mode(ctx, k, accumulators)
        ctx.tick("reduction", t0)
        system_pinv = pseudo_inverse(hadamard_gram_chain(ctx.grams, skip=k))
        _postprocess(ctx, k, out_blocks, system_pinv)
        return None

    batch = injected_batch if injected_batch is not None else draw_batch(ctx, k)
    if batch.weights is None:
        sample_weights(batch)
    t0 = time.perf_counter()
    _meter_sampled_gathers_ts(ctx, k, batch)
    t0 = ctx.tick("gather", t0)
    Gs = _sketched_gram(ctx, k, batch, metered=True)
    accumulators = []
    for p in range(grid.P):
        csr = gather_sampled_nonzeros_to_csr(ctx.local.local(p, k), batch.X, k)
        ctx.stats["sampled_nnz"] += csr.nnz
        accumulators.append(downsampled_mttkrp(csr, batch.H, batch.weights,
                                               workers=ctx.workers))
    t0 = ctx.tick("mttkrp", t0)
    out_blocks = _reduce_along_mode(ctx, k, accumulators)
    ctx.tick("reduction", t0)
    _postprocess(ctx, k, out_blocks, pseudo_inverse(Gs))
    return batch


def _reduce_along_mode(ctx, k, accumulators):
    """Reduce-scatter chunk accumulators into per-rank factor blocks."""
    grid = ctx.grid
    out_blocks = [None] * grid.P
    for c in range(grid.grid_dims[k]):
        group = grid.slice_group(k, c)
        chunk_lo = int(grid.chunk_offsets[k][c])
        chunk_hi = int(grid.chunk_offsets[k][c + 1])
        offs = [grid.block_range(k, p)[0] - chunk_lo for p in group] + [chunk_hi - chunk_lo]
        outs = gridmod.reduce_scatter([accumulators[p] for p in group], offs,
                                      list(group), ledger=ctx.ledger,
                                      round_id=ctx.round_id)
        for p, block in zip(group, outs):
            out_blocks[p] = block
    return out_blocks


def _meter_sampled_gathers_ts(ctx, k, batch):
    """Ledger traffic for the sampled-row gathers of a tensor-stationary solve."""
    grid = ctx.grid
    if grid.P == 1:
        return
    if batch.owner is not None:
        # exact-sampler batches end distributed: broadcast indices + probability
        counts = np.bincount(batch.owner, minlength=grid.P)
        _meter_allgather_model(ctx.ledger, ctx.round_id, list(range(grid.P)),
                               counts * grid.N)
    for i in range(grid.N):
        if i == k:
            continue
        owner = grid.row_owner(i, batch.X[:, i])
        chunk = grid.chunk_of(i, batch.X[:, i])
        for c in range(grid.grid_dims[i]):
            group = grid.slice_group(i, c)
            in_chunk = chunk == c
            if not in_chunk.any():
                continue
            counts = np.bincount(owner[in_chunk], minlength=grid.P)
            R = ctx.factors[i].R
            _meter_allgather_model(ctx.ledger, ctx.round_id, list(group),
                                   [int(counts[p]) * R for p in group])


def solve_mode_accumulator_stationary(ctx: SolveContext, k: int, injected_batch=None):
    """Gather sampled rows to all ranks; local downsampled MTTKRP; no reduction."""
    if ctx.sampler == "exact" and injected_batch is None:
        raise ScheduleError("accumulator-stationary schedule requires a sampler; "
                            "exact solves must use tensor-stationary")
    if ctx.local.schedule != "accumulator-stationary":
        raise ScheduleError("context partition is %r" % ctx.local.schedule)
    grid = ctx.grid
    batch = injected_batch if injected_batch is not None else draw_batch(ctx, k)
    if batch.weights is None:
        sample_weights(batch)

    t0 = time.perf_counter()
    per_sample = (ctx.factors[0].R + 2) if batch.owner is not None else ctx.factors[0].R
    for i in range(grid.N):
        if i == k:
            continue
        counts = np.bincount(grid.row_owner(i, batch.X[:, i]), minlength=grid.P)
        _meter_allgather_model(ctx.ledger, ctx.round_id, list(range(grid.P)),
                               counts * per_sample)
    t0 = ctx.tick("gather", t0)

    Gs = _sketched_gram(ctx, k, batch, metered=False)
    new_blocks = []
    for p in range(grid.P):
        csr = gather_sampled_nonzeros_to_csr(ctx.local.local(p, k), batch.X, k)
        ctx.stats["sampled_nnz"] += csr.nnz
        new_blocks.append(downsampled_mttkrp(csr, batch.H, batch.weights,
                                             workers=ctx.workers))
    ctx.tick("mttkrp", t0)
    _postprocess(ctx, k, new_blocks, pseudo_inverse(Gs))
    return batch


def solve_mode(ctx: SolveContext, k: int, injected_batch=None):
    if ctx.schedule == "tensor-stationary":
        return solve_mode_tensor_stationary(ctx, k, injected_batch)
    if ctx.schedule == "accumulator-stationary":
        return solve_mode_accumulator_stationary(ctx, k, injected_batch)
    raise ScheduleError("unknown schedule %r" % ctx.schedule)
