"""Row samplers for the Khatri-Rao design matrix.

Two production samplers plus a brute-force oracle:

* approximate sampler: weighs each candidate row by the product of
  per-factor leverage scores; every rank samples its own block from an
  independent local distribution after a consistent multinomial split of
  the sample budget (build/sample pair).

* exact sampler: draws from the exact Khatri-Rao leverage distribution
  by walking a binary tree of partial Gram matrices once per constant
  factor, conditioning each mode's draw on the rows already chosen.
  The top log2(P) tree levels are shared across ranks; the walk routes
  samples between ranks level by level and finishes with a local search
  over leaf row blocks.

Sampled rows are reweighted by 1 / sqrt(J * p_s), the scaling that makes
the sketched normal equations unbiased.  Repeated samples are kept with
multiplicity.
"""

import math

import numpy as np

from . import grid as gridmod
from . import rng
from .linalg import gram, khatri_rao, pseudo_inverse

ORACLE_GUARD = 10 ** 6
_ONE_BELOW = np.nextafter(1.0, 0.0)


class DegenerateWalkError(RuntimeError):
    """A tree walk hit a zero-mass node; h lies outside the row space."""


def _quad(H, M):
    """Row-wise quadratic forms h^T M h for each row h of H."""
    return np.einsum("jr,jr->j", H @ M, H)


def krp_leverage_scores(factors, skip=None):
    """Unnormalized leverage scores of every Khatri-Rao row (test scale)."""
    size = 1
    for i, U in enumerate(factors):
        if i != skip and U is not None:
            size *= U.shape[0]
    if size > ORACLE_GUARD:
        raise ValueError("oracle guard exceeded: %d rows > %d" % (size, ORACLE_GUARD))
    A = khatri_rao(factors, skip=skip)
    Gp = pseudo_inverse(A.T @ A)
    return np.maximum(_quad(A, Gp), 0.0)


def exact_krp_leverage_oracle(factors, skip=None):
    """Exact leverage probability of every Khatri-Rao row, by materialization."""
    scores = krp_leverage_scores(factors, skip=skip)
    total = scores.sum()
    if total <= 0.0:
        raise ValueError("all leverage scores are zero")
    return scores / total


class SampleBatch:
    """J sampled design-matrix rows for one mode-k solve.

    X[:, i] holds the mode-i row index of each sample (column k is -1);
    H holds the running Hadamard product of the sampled rows; prob the
    joint sampling probability; residual the leftover uniform driving
    each sample.  ``owner`` is the rank holding each sample at the end of
    sampling, or None when the batch ended replicated on every rank.
    """

    def __init__(self, X, H, per_mode_prob, prob, residual=None, owner=None):
        self.X = X
        self.H = H
        self.per_mode_prob = per_mode_prob
        self.prob = prob
        self.residual = residual
        self.owner = owner
        self.weights = None

    @property
    def J(self):
        return self.X.shape[0]


def sample_weights(batch: SampleBatch, J=None):
    """Attach reweighting factors 1 / sqrt(J * p_s) to the batch."""
    if J is None:
        J = batch.J
    if batch.J and (batch.prob <= 0.0).any():
        raise ValueError("sample with zero probability cannot have been drawn")
    batch.weights = 1.0 / np.sqrt(J * batch.prob) if batch.J else np.empty(0)
    return batch.weights


def _empty_batch(N, R):
    return SampleBatch(np.full((0, N), -1, dtype=np.int64), np.ones((0, R)),
                       np.ones((0, N)), np.ones(0), residual=np.ones(0))


class ArlsLevState:
    """Per-mode sampling state: local leverage distributions and masses.

    dists[p] is the normalized leverage distribution over rank p's block
    rows, C[p] its pre-normalization mass; C is replicated (gathered once
    at build time) so sample calls need no mass exchange.
    """

    def __init__(self, mode, dists, C, lows, his, gram_matrix, gram_pinv):
        self.mode = mode
        self.dists = dists
        self.C = C
        self.lows = lows
        self.his = his
        self.gram = gram_matrix
        self.gram_pinv = gram_pinv


def arls_lev_build(blocks, ledger=None, round_id=0) -> ArlsLevState:
    """Build the approximate-leverage state for one factor's blocks."""
    G = gram(blocks, ledger=ledger, round_id=round_id)
    Gp = pseudo_inverse(G)
    dists = []
    C = np.zeros(blocks.n_blocks)
    for p, B in enumerate(blocks.blocks):
        d = np.maximum(np.einsum("ir,ir->i", B @ Gp, B), 0.0)
        mass = float(d.sum())
        C[p] = mass
        dists.append(d / mass if mass > 0.0 else d)
    C = gridmod.allgather([np.array([c]) for c in C], list(range(blocks.n_blocks)),
                          ledger=ledger, round_id=round_id)
    return ArlsLevState(blocks.mode, dists, C, blocks.lows.copy(), blocks.his.copy(), G, Gp)


def consistent_multinomial(masses, J, seed, round_id, k, mode):
    """Sample-count split every rank computes identically from the shared stream."""
    masses = np.asarray(masses, dtype=np.float64)
    total = masses.sum()
    if total <= 0.0:
        raise ValueError("all rank masses are zero; nothing to sample from")
    gen = rng.stream(seed, rng.MULTINOMIAL, round_id, k, mode)
    return gen.multinomial(int(J), masses / total)


def arls_lev_sample(states, k, J, factors_full, seed, round_id=0, ledger=None) -> SampleBatch:
    """Draw J rows from the product-of-factor-leverage distribution.

    For each constant mode independently: split J across ranks by a
    consistent multinomial over the block masses, draw each rank's quota
    from its local distribution, gather in rank order, then apply the
    shared-stream permutation.  The result is replicated on every rank.
    """
    N = len(states)
    R = factors_full[0].shape[1] if factors_full[0] is not None else factors_full[1].shape[1]
    if J == 0:
        return _empty_batch(N, R)
    X = np.full((J, N), -1, dtype=np.int64)
    per_mode_prob = np.ones((J, N))
    for i in range(N):
        if i == k:
            continue
        st = states[i]
        W = float(st.C.sum())
        if W <= 0.0:
            raise ValueError("mode %d has zero total leverage mass" % i)
        split = consistent_multinomial(st.C, J, seed, round_id, k, i)
        parts = []
        P = len(st.dists)
        for p in range(P):
            quota = int(split[p])
            if quota == 0:
                parts.append(np.empty((0, 2)))
                continue
            gen = rng.stream(seed, rng.LOCAL_DRAW, round_id, k, i, p)
            local = gen.choice(st.dists[p].size, size=quota, p=st.dists[p])
            rows = st.lows[p] + local
            probs = (st.C[p] / W) * st.dists[p][local]
            parts.append(np.stack([rows.astype(np.float64), probs], axis=1))
        gathered = gridmod.allgather(parts, list(range(P)), ledger=ledger, round_id=round_id)
        perm = rng.stream(seed, rng.SHUFFLE, round_id, k, i).permutation(J)
        X[:, i] = gathered[perm, 0].astype(np.int64)
        per_mode_prob[:, i] = gathered[perm, 1]
    H = np.ones((J, R))
    for i in range(N):
        if i != k:
            H *= factors_full[i][X[:, i]]
    prob = per_mode_prob.prod(axis=1)
    return SampleBatch(X, H, per_mode_prob, prob, owner=None)


class LeverageTree:
    """Binary tree of partial Gram matrices over one factor's row blocks.

    ``node_grams[lev]`` holds the (2^lev, R, R) node matrices; level
    ``depth`` is the rank-leaf level (leaf ell belongs to the rank in
    row-block order, padding leaves hold zero).  Below that, each rank
    subdivides its block into contiguous leaf blocks of at most
    ``leaf_block_size`` rows whose Grams drive the local search.
    """

    def __init__(self, mode, node_grams, leaf_rank, block_lo, block_hi,
                 leaf_offsets, leaf_grams, leaf_block_size):
        self.mode = mode
        self.node_grams = node_grams
        self.leaf_rank = leaf_rank
        self.block_lo = block_lo
        self.block_hi = block_hi
        self.leaf_offsets = leaf_offsets  # per rank, offsets within its block
        self.leaf_grams = leaf_grams      # per rank, (n_leaves, R, R)
        self.leaf_block_size = leaf_block_size

    @property
    def depth(self):
        return len(self.node_grams) - 1

    @property
    def root_gram(self):
        return self.node_grams[0][0]


def sts_build(blocks, grid=None, ledger=None, round_id=0, leaf_block_size=None) -> LeverageTree:
    """Build the leverage tree for one factor (exact-sampler build pass).

    Leaf Grams come from each rank's local rows; the upward pass mirrors
    the bidirectional-exchange Allreduce, metering one R*R matrix
    received per rank per level (general P handled by padding with empty
    leaves, which carry zero mass and are never routed to).

    The local search enumerates leaf masses and then the chosen leaf's
    row masses, costing about (n/L + L) R^2 per sample for leaf size L.
    The default L ~= sqrt(n), capped at R, minimizes that; pass an
    explicit ``leaf_block_size`` to override (e.g. R-row leaves).
    """
    R = blocks.R
    P = blocks.n_blocks
    if grid is not None:
        order = grid.row_order(blocks.mode)
    else:
        order = np.lexsort((np.arange(P), blocks.lows))
    depth = max(int(math.ceil(math.log2(P))), 0) if P > 1 else 0
    padded = 1 << depth

    leaf_offsets = []
    leaf_grams = []
    rank_gram = np.zeros((P, R, R))
    for p in range(P):
        B = blocks.blocks[p]
        n = B.shape[0]
        if leaf_block_size is None:
            size = max(1, min(max(R, 1), int(math.ceil(math.sqrt(n))) if n else 1))
        else:
            size = max(1, int(leaf_block_size))
        n_leaves = max(int(math.ceil(n / size)), 1) if n else 0
        offs = np.minimum(np.arange(n_leaves + 1, dtype=np.int64) * size, n) \
            if n else np.zeros(1, dtype=np.int64)
        grams_p = np.zeros((n_leaves, R, R))
        for q in range(n_leaves):
            W = B[offs[q]:offs[q + 1]]
            grams_p[q] = W.T @ W
        leaf_offsets.append(offs)
        leaf_grams.append(grams_p)
        if n_leaves:
            rank_gram[p] = grams_p.sum(axis=0)

    leaf_rank = np.full(padded, -1, dtype=np.int64)
    leaf_rank[:P] = order
    node_grams = [None] * (depth + 1)
    leaves = np.zeros((padded, R, R))
    leaves[:P] = rank_gram[order]
    node_grams[depth] = leaves
    for lev in range(depth - 1, -1, -1):
        node_grams[lev] = node_grams[lev + 1].reshape(-1, 2, R, R).sum(axis=1)

    if ledger is not None and P > 1:
        for lev in range(depth - 1, -1, -1):
            bit = 1 << (depth - 1 - lev)
            for leaf in range(P):
                partner = leaf ^ bit
                if partner < P:
                    ledger.add(round_id, gridmod.ALL_TO_ALLV, int(leaf_rank[leaf]), R * R, 1)

    lows = blocks.lows.copy()
    his = blocks.his.copy()
    return LeverageTree(blocks.mode, node_grams, leaf_rank, lows, his,
                        leaf_offsets, leaf_grams, leaf_block_size)


def _inverse_cdf(masses, r):
    """Pick the segment of [0, 1) containing each residual r.

    Rows of ``masses`` are nonnegative segment masses for one sample;
    boundary hits go right, matching the r >= T branch rule.  Returns
    (choice, probability, rescaled residual).
    """
    total = masses.sum(axis=1)
    if (total <= 0.0).any():
        raise DegenerateWalkError("zero total mass in leaf search")
    cdf = np.cumsum(masses, axis=1)
    target = r * total
    choice = (cdf <= target[:, None]).sum(axis=1)
    choice = np.minimum(choice, masses.shape[1] - 1)
    rows = np.arange(masses.shape[0])
    picked = masses[rows, choice]
    prev = cdf[rows, choice] - picked
    with np.errstate(invalid="ignore", divide="ignore"):
        r_out = np.where(picked > 0.0, (target - prev) / picked, 0.0)
    return choice, picked / total, np.clip(r_out, 0.0, _ONE_BELOW)


def _leaf_search_batch(W_block, leaf_offsets, leaf_grams, cond, H_sel, r_sel):
    """Vectorized leaf-block then row-level search for one rank's samples.

    Works in quadratic forms (K x R temporaries) rather than expanding
    h (x) h outer products, which would cost K * R^2 memory per call.
    """
    K, R = H_sel.shape
    if W_block.shape[0] == 0:
        raise DegenerateWalkError("walk reached a rank with no rows")
    n_leaves = leaf_grams.shape[0]
    leaf_masses = np.empty((K, n_leaves))
    for leaf in range(n_leaves):
        leaf_masses[:, leaf] = _quad(H_sel, leaf_grams[leaf] * cond)
    np.maximum(leaf_masses, 0.0, out=leaf_masses)
    leaf_choice, leaf_prob, r_mid = _inverse_cdf(leaf_masses, r_sel)

    rows_local = np.empty(K, dtype=np.int64)
    row_prob = np.empty(K)
    r_out = np.empty(K)
    for leaf in np.unique(leaf_choice):
        sel = np.flatnonzero(leaf_choice == leaf)
        lo, hi = int(leaf_offsets[leaf]), int(leaf_offsets[leaf + 1])
        Hs = H_sel[sel]
        m = np.empty((sel.size, hi - lo))
        for qi in range(hi - lo):
            v = Hs * W_block[lo + qi]
            m[:, qi] = _quad(v, cond)
        np.maximum(m, 0.0, out=m)
        q, p_row, r_fin = _inverse_cdf(m, r_mid[sel])
        rows_local[sel] = lo + q
        row_prob[sel] = p_row
        r_out[sel] = r_fin
    return rows_local, leaf_prob * row_prob, r_out


def local_sts_leaf_search(h, block_rows, leaf_grams, leaf_offsets, cond, r, row_offset=0):
    """Continue one sample's binary search over a rank's local rows.

    Branches over the leaf-block Grams, then over per-row conditional
    masses (u_q elementwise h) ^T cond (u_q elementwise h), down to a
    single row.  Returns the selected global row index.
    """
    rows, _, _ = _leaf_search_batch(block_rows, leaf_offsets, leaf_grams, cond,
                                    np.asarray(h, dtype=np.float64)[None, :],
                                    np.array([float(r)]))
    return int(row_offset + rows[0])


def _route_meter(ledger, round_id, old_owner, new_owner, payload_words, P):
    """Meter the level-boundary all-to-allv that moves samples between ranks."""
    moved = old_owner != new_owner
    if not moved.any():
        return
    pair = old_owner[moved] * P + new_owner[moved]
    uniq, counts = np.unique(pair, return_counts=True)
    recv_words = np.zeros(P, dtype=np.int64)
    recv_peers = np.zeros(P, dtype=np.int64)
    for u, c in zip(uniq, counts):
        dst = int(u) % P
        recv_words[dst] += int(c) * payload_words
        recv_peers[dst] += 1
    for p in range(P):
        if recv_words[p] or recv_peers[p]:
            ledger.add(round_id, gridmod.ALL_TO_ALLV, p, int(recv_words[p]), int(recv_peers[p]))


def sts_sample(trees, k, J, gram_chain_pinv, grams, blocks_per_mode, seed,
               round_id=0, grid=None, ledger=None, uniform_override=None) -> SampleBatch:
    """Draw J rows from the exact Khatri-Rao leverage distribution.

    Modes are visited in ascending order skipping k.  For mode i the
    conditioning matrix is  G_chain_pinv (elementwise) prod of Grams of
    modes > i (excluding k); the contribution of already-sampled modes
    lives in the running rows H.  Each sample walks the shared tree
    levels (routing between ranks at every level), finishes with the
    local leaf search on its terminal rank, and multiplies its H row by
    the selected factor row.

    ``uniform_override`` (J, N) replaces the per-mode uniform draws; a
    test hook for steering walks down chosen paths.
    """
    N = len(grams)
    R = gram_chain_pinv.shape[0]
    if J == 0:
        return _empty_batch(N, R)
    first = next(i for i in range(N) if i != k and trees[i] is not None)
    P = len(trees[first].leaf_offsets)
    payload_words = N + R + 2  # X row + H row + residual + running probability

    X = np.full((J, N), -1, dtype=np.int64)
    H = np.ones((J, R))
    per_mode_prob = np.ones((J, N))
    owner = (np.arange(J, dtype=np.int64) * P) // J
    residual = np.zeros(J)

    for i in range(N):
        if i == k:
            continue
        tree = trees[i]
        M = gram_chain_pinv.copy()
        for m in range(i + 1, N):
            if m != k:
                M = M * grams[m]
        if uniform_override is not None:
            r = np.array(uniform_override[:, i], dtype=np.float64)
        else:
            r = rng.stream(seed, rng.WALK_UNIFORM, round_id, k, i).random(J)
        node = np.zeros(J, dtype=np.int64)
        prob_i = np.ones(J)
        depth = tree.depth
        for lev in range(depth):
            T = np.empty(J)
            for v in np.unique(node):
                sel = np.flatnonzero(node == v)
                den = _quad(H[sel], tree.node_grams[lev][v] * M)
                if (den <= 0.0).any():
                    raise DegenerateWalkError(
                        "zero node mass at level %d of mode-%d tree" % (lev, i))
                num = np.maximum(_quad(H[sel], tree.node_grams[lev + 1][2 * v] * M), 0.0)
                T[sel] = num / den
            T = np.clip(T, 0.0, 1.0)
            right = r >= T
            prob_i *= np.where(right, 1.0 - T, T)
            with np.errstate(invalid="ignore", divide="ignore"):
                r = np.where(right,
                             (r - T) / np.maximum(1.0 - T, np.finfo(float).tiny),
                             r / np.maximum(T, np.finfo(float).tiny))
            r = np.clip(r, 0.0, _ONE_BELOW)
            node = 2 * node + right
            width = 1 << (depth - 1 - lev)
            leaf_lo = node * width
            n_real = np.minimum((node + 1) * width, P) - leaf_lo
            if (n_real <= 0).any():
                raise DegenerateWalkError("walk branched into an empty padded subtree")
            leaf_idx = leaf_lo + (np.arange(J, dtype=np.int64) % n_real)
            new_owner = tree.leaf_rank[leaf_idx]
            if ledger is not None and P > 1:
                _route_meter(ledger, round_id, owner, new_owner, payload_words, P)
            owner = new_owner
        if depth:
            owner = tree.leaf_rank[node]

        for p in np.unique(owner):
            sel = np.flatnonzero(owner == p)
            rows_local, prob_loc, r_fin = _leaf_search_batch(
                blocks_per_mode[i].blocks[p], tree.leaf_offsets[p], tree.leaf_grams[p],
                M, H[sel], r[sel])
            X[sel, i] = tree.block_lo[p] + rows_local
            prob_i[sel] *= prob_loc
            r[sel] = r_fin
        per_mode_prob[:, i] = prob_i
        H *= _rows_from_blocks(blocks_per_mode[i], X[:, i])
        residual = r

    prob = per_mode_prob.prod(axis=1)
    return SampleBatch(X, H, per_mode_prob, prob, residual=residual, owner=owner)


def _rows_from_blocks(blocks, rows):
    out = np.empty((rows.size, blocks.R))
    for p, B in enumerate(blocks.blocks):
        lo, hi = blocks.lows[p], blocks.his[p]
        sel = (rows >= lo) & (rows < hi)
        if sel.any():
            out[sel] = B[rows[sel] - lo]
    return out
