"""Full ALS driver: initialization, the round loop over modes, column
renormalization and scale maintenance, fit tracking, and result assembly.

Termination is a fixed round count (no plateau detection), matching how
golden-fit comparisons are run.  Fits are evaluated exactly (one full
last-mode MTTKRP per evaluation) outside the communication ledger, so
they never perturb the metered cost shapes.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from . import grid as gridmod
from . import rng
from .linalg import FactorBlocks, compute_fit, gram, normalize_columns
from .matricization import matricize, partition_to_grid
from .samplers import arls_lev_build, sts_build
from .schedules import ScheduleError, SolveContext, refresh_gathered, solve_mode
from .tensor import ModePermutations, load_frostt, permute_modes

SAMPLERS = ("exact", "arls-lev", "sts")
SCHEDULES = ("tensor-stationary", "accumulator-stationary")


@dataclass
class AlsConfig:
    rank: int
    rounds: int
    tensor_path: str = None
    sampler: str = "exact"
    samples: int = 0
    schedule: str = "tensor-stationary"
    grid_dims: tuple = None
    procs: int = 1
    seed: int = 0
    trial: int = 0
    fit_every: int = 5
    log_transform: bool = False
    dedup: bool = True
    permute: bool = True
    workers: int = 1
    leaf_block_size: int = None
    record_samples: bool = False
    compute_fits: bool = True

    def validate(self):
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.sampler not in SAMPLERS:
            raise ValueError("sampler must be one of %s" % (SAMPLERS,))
        if self.schedule not in SCHEDULES:
            raise ValueError("schedule must be one of %s" % (SCHEDULES,))
        if self.sampler != "exact" and self.samples < 1:
            raise ValueError("samples must be >= 1 for sketched solves")
        if self.schedule == "accumulator-stationary" and self.sampler == "exact":
            raise ScheduleError("accumulator-stationary schedule requires a sampler")
        if self.fit_every < 1:
            raise ValueError("fit_every must be >= 1")


@dataclass
class DecompResult:
    factors: list
    sigma: np.ndarray
    fit_history: list
    running_max: list
    final_fit: float
    ledger: object
    timings: dict
    config: AlsConfig
    grid_dims: tuple
    stored_nnz: int
    sample_log: list = field(default_factory=list)

    def summary(self) -> str:
        lines = ["config rank=%d rounds=%d sampler=%s samples=%d schedule=%s "
                 "grid=%s seed=%d trial=%d"
                 % (self.config.rank, self.config.rounds, self.config.sampler,
                    self.config.samples, self.config.schedule,
                    "x".join(str(d) for d in self.grid_dims),
                    self.config.seed, self.config.trial)]
        lines.append("stored_nnz %d" % self.stored_nnz)
        for (r, f), m in zip(self.fit_history, self.running_max):
            lines.append("fit round=%d fit=%.6f running_max=%.6f" % (r, f, m))
        lines.append("final_fit %.6f" % self.final_fit)
        for phase, secs in sorted(self.timings.items()):
            lines.append("time %s %.3f" % (phase, secs))
        for kind in gridmod.KINDS:
            lines.append("ledger_total %s words=%d messages=%d"
                         % (kind, self.ledger.words(kind=kind),
                            self.ledger.messages(kind=kind)))
        return "\n".join(lines)


def init_factors(dims, R, seed, trial=0):
    """Unit-variance Gaussian factors, columns normalized; all-ones scales."""
    factors = []
    for j, d in enumerate(dims):
        U = rng.stream(seed, rng.INIT, trial, j).standard_normal((d, R))
        factors.append(normalize_columns(U)[0])
    return factors, np.ones(R)


def build_grid(dims, cfg: AlsConfig):
    if cfg.grid_dims is not None:
        return gridmod.ProcessorGrid(dims, cfg.grid_dims)
    return gridmod.optimal_grid(dims, cfg.procs)


def _rebuild_mode_state(ctx, k):
    """Refresh Gram + sampler structures after a mode-k factor update."""
    if ctx.sampler == "arls-lev":
        state = arls_lev_build(ctx.factors[k], ledger=ctx.ledger, round_id=ctx.round_id)
        ctx.arls_states[k] = state
        ctx.grams[k] = state.gram
    elif ctx.sampler == "sts":
        ctx.grams[k] = gram(ctx.factors[k], ledger=ctx.ledger, round_id=ctx.round_id)
        ctx.trees[k] = sts_build(ctx.factors[k], grid=ctx.grid, ledger=ctx.ledger,
                                 round_id=ctx.round_id,
                                 leaf_block_size=ctx.leaf_block_size)
    else:
        ctx.grams[k] = gram(ctx.factors[k], ledger=ctx.ledger, round_id=ctx.round_id)


def _renormalize(ctx, k):
    """sigma[i] = ||U_k[:, i]||, then scale columns to unit norm (metered)."""
    partials = [np.einsum("ir,ir->r", b, b) for b in ctx.factors[k].blocks]
    sumsq = gridmod.allreduce(partials, list(range(ctx.grid.P)),
                              ledger=ctx.ledger, round_id=ctx.round_id)
    norms = np.sqrt(sumsq)
    safe = np.where(norms > 0.0, norms, 1.0)
    for b in ctx.factors[k].blocks:
        b /= safe
    return norms


def run_als(cfg: AlsConfig, tensor=None, perms=None, grid=None, partition=None,
            fit_mat=None) -> DecompResult:
    """Run one ALS trial.  Preloaded tensor/partition state may be passed
    in so multi-trial harnesses pay ingestion and partitioning once."""
    cfg.validate()
    timings = {"load": 0.0, "fit": 0.0}
    t0 = time.perf_counter()
    if tensor is None:
        if cfg.tensor_path is None:
            raise ValueError("no tensor given and no tensor_path configured")
        tensor = load_frostt(cfg.tensor_path, log_transform=cfg.log_transform,
                             dedup=cfg.dedup)
        if cfg.permute:
            tensor, perms = permute_modes(tensor, cfg.seed)
    if perms is None:
        perms = ModePermutations.identity(tensor.dims)
    if grid is None:
        grid = build_grid(tensor.dims, cfg)
    if partition is None:
        partition = partition_to_grid(tensor, grid, cfg.schedule)
    if fit_mat is None and cfg.compute_fits:
        fit_mat = matricize(tensor, tensor.mode_count - 1)
    timings["load"] = time.perf_counter() - t0

    N = tensor.mode_count
    R = cfg.rank
    factors_global, sigma = init_factors(tensor.dims, R, cfg.seed, cfg.trial)
    blocks = [FactorBlocks.from_global(U, grid, j) for j, U in enumerate(factors_global)]

    ledger = gridmod.CommLedger()
    ctx = SolveContext(grid, cfg.schedule, cfg.sampler, cfg.samples, blocks,
                       [None] * N, partition, ledger, cfg.seed, workers=cfg.workers)
    ctx.leaf_block_size = cfg.leaf_block_size
    ctx.round_id = 0
    for j in range(N):
        _rebuild_mode_state(ctx, j)
    if cfg.schedule == "tensor-stationary" and cfg.sampler == "exact":
        for j in range(N):
            refresh_gathered(ctx, j)

    fit_history = []
    running_max = []
    sample_log = []
    best = -np.inf

    def evaluate_fit(round_id):
        nonlocal best
        t_fit = time.perf_counter()
        full = [fb.assemble() for fb in ctx.factors]
        f = compute_fit(tensor, full, sigma, mode_mat=fit_mat, workers=cfg.workers)
        best = max(best, f)
        fit_history.append((round_id, f))
        running_max.append(best)
        timings["fit"] += time.perf_counter() - t_fit

    for rnd in range(1, cfg.rounds + 1):
        ctx.round_id = rnd
        for k in range(N):
            batch = solve_mode(ctx, k)
            if cfg.record_samples and batch is not None:
                sample_log.append(batch.X.copy())
            if not all(np.isfinite(b).all() for b in ctx.factors[k].blocks):
                raise FloatingPointError(
                    "non-finite factor entries after round %d mode %d solve" % (rnd, k))
            sigma = _renormalize(ctx, k)
            _rebuild_mode_state(ctx, k)
            if cfg.schedule == "tensor-stationary" and cfg.sampler == "exact":
                refresh_gathered(ctx, k)
        if cfg.compute_fits and (rnd % cfg.fit_every == 0 or rnd == cfg.rounds):
            evaluate_fit(rnd)

    final_fit = fit_history[-1][1] if fit_history else float("nan")
    factors_out = [perms.unpermute_factor(fb.assemble(), j)
                   for j, fb in enumerate(ctx.factors)]
    timings.update(ctx.timings)
    return DecompResult(factors_out, sigma, fit_history, running_max, final_fit,
                        ledger, timings, cfg, grid.grid_dims,
                        partition.stored_nnz(), sample_log)


def run_trials(cfg: AlsConfig, trials: int):
    """Mean-of-trials harness: shared tensor/partition, per-trial init seeds."""
    cfg.validate()
    tensor = load_frostt(cfg.tensor_path, log_transform=cfg.log_transform,
                         dedup=cfg.dedup)
    perms = ModePermutations.identity(tensor.dims)
    if cfg.permute:
        tensor, perms = permute_modes(tensor, cfg.seed)
    grid = build_grid(tensor.dims, cfg)
    partition = partition_to_grid(tensor, grid, cfg.schedule)
    fit_mat = matricize(tensor, tensor.mode_count - 1) if cfg.compute_fits else None
    results = []
    for t in range(trials):
        trial_cfg = AlsConfig(**{**cfg.__dict__, "trial": t})
        results.append(run_als(trial_cfg, tensor=tensor, perms=perms, grid=grid,
                               partition=partition, fit_mat=fit_mat))
    return results
