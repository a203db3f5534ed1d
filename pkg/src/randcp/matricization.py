"""Mode-j matricized views of a sparse tensor.

A matricization keeps the nonzeros sorted by a composite column key (all
indices except mode j, earlier modes varying fastest) and then by row
index, the analogue of compressed-sparse-column storage.  Column lookups
are binary searches over the sorted keys.  A second, row-compressed
ordering is kept for kernels that accumulate into mode-j rows.

Column keys are mixed-radix encodings in int64 when the off-mode index
space fits; otherwise keys fall back to arbitrary-precision Python
integers (object dtype), which only need to support a total order.
"""

import numpy as np

from .tensor import SparseTensorCOO

_INT64_SAFE = 1 << 62


def off_mode_strides(dims, skip):
    """Mixed-radix strides over modes != skip, ascending mode order fastest.

    Returns (strides, exact) where strides[skip] = 0 and ``exact`` is
    False when the key space overflows int64 (callers must use the
    object-dtype key path).
    """
    strides = [0] * len(dims)
    acc = 1
    exact = True
    for m, d in enumerate(dims):
        if m == skip:
            continue
        strides[m] = acc
        acc *= int(d)
        if acc > _INT64_SAFE:
            exact = False
    return strides, exact


def column_keys(idx, dims, skip):
    """Linearized off-mode key per entry; int64 or object dtype."""
    strides, exact = off_mode_strides(dims, skip)
    if exact:
        keys = np.zeros(idx.shape[0], dtype=np.int64)
        for m, s in enumerate(strides):
            if m != skip:
                keys += idx[:, m] * np.int64(s)
        return keys
    keys = np.zeros(idx.shape[0], dtype=object)
    for m, s in enumerate(strides):
        if m != skip:
            keys += idx[:, m].astype(object) * s
    return keys


def key_of(index_tuple, dims, skip):
    """Column key of a single off-mode index tuple (entry for skip ignored)."""
    strides, exact = off_mode_strides(dims, skip)
    acc = 0
    for m, s in enumerate(strides):
        if m != skip:
            acc += int(index_tuple[m]) * s
    return np.int64(acc) if exact else acc


class Matricization:
    """Sorted mode-j view of local nonzeros.

    Parameters
    ----------
    dims : global mode dimensions
    idx, vals : local nonzero coordinates (global indices) and values
    mode : the matricized mode j
    row_lo, row_hi : the half-open global row range this block covers;
        accumulators over the block have row_hi - row_lo rows.
    """

    def __init__(self, dims, idx, vals, mode, row_lo=0, row_hi=None):
        self.dims = tuple(int(d) for d in dims)
        self.mode = int(mode)
        self.idx = np.ascontiguousarray(idx, dtype=np.int64)
        self.vals = np.ascontiguousarray(vals, dtype=np.float64)
        self.row_lo = int(row_lo)
        self.row_hi = int(self.dims[mode] if row_hi is None else row_hi)

        keys = column_keys(self.idx, self.dims, self.mode)
        rows = self.idx[:, self.mode]
        if keys.dtype == object:
            order = sorted(range(len(vals)), key=lambda i: (keys[i], rows[i]))
            self.col_order = np.asarray(order, dtype=np.intp)
        else:
            self.col_order = np.lexsort((rows, keys))
        self.sorted_keys = keys[self.col_order]

        rel = rows - self.row_lo
        if rel.size and (rel.min() < 0 or rel.max() >= self.n_rows):
            raise ValueError("entry rows outside block [%d, %d)" % (self.row_lo, self.row_hi))
        self.row_order = np.argsort(rel, kind="stable")
        counts = np.bincount(rel, minlength=self.n_rows)
        self.row_ptr = np.zeros(self.n_rows + 1, dtype=np.int64)
        np.cumsum(counts, out=self.row_ptr[1:])

    @property
    def nnz(self):
        return self.vals.size

    @property
    def n_rows(self):
        return self.row_hi - self.row_lo

    def lookup_columns(self, query_keys):
        """Binary-search positions of query column keys.

        Returns (lo, hi): for query q, the nonzeros of that column sit at
        ``col_order[lo[q]:hi[q]]``.
        """
        q = np.asarray(query_keys)
        lo = np.searchsorted(self.sorted_keys, q, side="left")
        hi = np.searchsorted(self.sorted_keys, q, side="right")
        return lo, hi

    def column_entries(self, index_tuple):
        """All (row, value) pairs of one off-mode column."""
        k = key_of(index_tuple, self.dims, self.mode)
        lo, hi = self.lookup_columns(np.array([k]))
        pos = self.col_order[int(lo[0]):int(hi[0])]
        return self.idx[pos, self.mode], self.vals[pos]


def matricize(t: SparseTensorCOO, mode: int) -> Matricization:
    if not 0 <= mode < t.mode_count:
        raise ValueError("mode %d out of range for %d-mode tensor" % (mode, t.mode_count))
    return Matricization(t.dims, t.idx, t.vals, mode)


class LocalTensorSet:
    """Per-rank, per-mode matricized subsets under one schedule's partition."""

    def __init__(self, schedule, grid, mats):
        self.schedule = schedule
        self.grid = grid
        self.mats = mats  # mats[rank][mode] -> Matricization

    def local(self, rank, mode) -> Matricization:
        return self.mats[rank][mode]

    def stored_nnz(self) -> int:
        """Total nonzeros held across ranks (replication included)."""
        return sum(m.nnz for per_rank in self.mats for m in per_rank)


def partition_to_grid(t: SparseTensorCOO, grid, schedule: str) -> LocalTensorSet:
    """Assign nonzeros to simulated ranks.

    tensor-stationary: each nonzero goes to the unique grid cell whose
    index hyper-rectangle contains it; every rank keeps N matricized
    views of the same local set.

    accumulator-stationary: one replicated copy per mode, partitioned by
    the mode's factor block rows, so each rank's mode-j copy covers
    exactly its stationary accumulator block.
    """
    if tuple(grid.tensor_dims) != tuple(t.dims):
        raise ValueError("grid built for dims %s, tensor has %s"
                         % (grid.tensor_dims, t.dims))
    if schedule == "tensor-stationary":
        cell = np.zeros(t.nnz, dtype=np.int64)
        for j in range(t.mode_count):
            chunk = np.searchsorted(grid.chunk_offsets[j], t.idx[:, j], side="right") - 1
            cell = cell * grid.grid_dims[j] + chunk
        order = np.argsort(cell, kind="stable")
        bounds = np.searchsorted(cell[order], np.arange(grid.P + 1))
        mats = []
        for p in range(grid.P):
            pos = order[bounds[p]:bounds[p + 1]]
            coords = grid.coords(p)
            per_mode = []
            for j in range(t.mode_count):
                lo = int(grid.chunk_offsets[j][coords[j]])
                hi = int(grid.chunk_offsets[j][coords[j] + 1])
                per_mode.append(Matricization(t.dims, t.idx[pos], t.vals[pos], j,
                                              row_lo=lo, row_hi=hi))
            mats.append(per_mode)
        return LocalTensorSet(schedule, grid, mats)

    if schedule == "accumulator-stationary":
        mats = [[None] * t.mode_count for _ in range(grid.P)]
        for j in range(t.mode_count):
            owner = grid.row_owner(j, t.idx[:, j])
            order = np.argsort(owner, kind="stable")
            bounds = np.searchsorted(owner[order], np.arange(grid.P + 1))
            for p in range(grid.P):
                pos = order[bounds[p]:bounds[p + 1]]
                lo, hi = grid.block_range(j, p)
                mats[p][j] = Matricization(t.dims, t.idx[pos], t.vals[pos], j,
                                           row_lo=lo, row_hi=hi)
        return LocalTensorSet(schedule, grid, mats)

    raise ValueError("unknown schedule %r" % schedule)
