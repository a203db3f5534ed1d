import numpy as np
import pytest

from randcp.tensor import SparseTensorCOO


def make_sparse(dims, nnz, seed, dense=False):
    gen = np.random.default_rng(seed)
    if dense:
        idx = np.stack(np.meshgrid(*[np.arange(d) for d in dims], indexing="ij"),
                       -1).reshape(-1, len(dims))
    else:
        idx = np.stack([gen.integers(0, d, nnz * 3) for d in dims], axis=1)
        idx = np.unique(idx, axis=0)
        idx = idx[gen.permutation(idx.shape[0])[:nnz]]
    vals = gen.standard_normal(idx.shape[0])
    return SparseTensorCOO(dims, idx, vals)


def dense_of(t):
    T = np.zeros(t.dims)
    T[tuple(t.idx.T)] = t.vals
    return T


def dense_matricization(T, mode):
    """Independent dense matricization whose column order matches the
    library's composite key (earlier modes fastest)."""
    return np.moveaxis(T, mode, 0).reshape(T.shape[mode], -1, order="F")


def unit_factors(dims, R, seed):
    gen = np.random.default_rng(seed)
    out = []
    for d in dims:
        U = gen.standard_normal((d, R))
        out.append(U / np.linalg.norm(U, axis=0))
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
