"""Small dense linear algebra: Gram matrices, Hadamard chains,
pseudo-inverse, column normalization, and the exact fit metric.

Everything here works on R x R matrices or block-row factor matrices
with R at most a few hundred, so cubic dense algorithms are fine.
All reals are float64.
"""

import numpy as np

from . import grid as gridmod
from .matricization import Matricization, matricize
from .mttkrp import mttkrp_exact

SYMMETRY_RTOL = 1e-8
PINV_CUTOFF = 1e-10


class FactorBlocks:
    """Block rows of one factor matrix, one block per simulated rank."""

    def __init__(self, mode, blocks, lows, his):
        self.mode = int(mode)
        self.blocks = [np.ascontiguousarray(b, dtype=np.float64) for b in blocks]
        self.lows = np.asarray(lows, dtype=np.int64)
        self.his = np.asarray(his, dtype=np.int64)
        widths = {b.shape[1] for b in self.blocks}
        if len(widths) != 1:
            raise ValueError("inconsistent factor rank across blocks: %s" % widths)
        self.R = widths.pop()
        for b, lo, hi in zip(self.blocks, self.lows, self.his):
            if b.shape[0] != hi - lo:
                raise ValueError("block rows %d != range [%d, %d)" % (b.shape[0], lo, hi))

    @classmethod
    def from_global(cls, U, grid, mode):
        lows, his = grid.block_ranges(mode)
        blocks = [U[lo:hi] for lo, hi in zip(lows, his)]
        return cls(mode, blocks, lows, his)

    @classmethod
    def single(cls, U, mode=0):
        return cls(mode, [U], [0], [U.shape[0]])

    @property
    def n_blocks(self):
        return len(self.blocks)

    @property
    def dim(self):
        return int(self.his.max()) if len(self.blocks) else 0

    def assemble(self):
        out = np.zeros((self.dim, self.R))
        for b, lo, hi in zip(self.blocks, self.lows, self.his):
            out[lo:hi] = b
        return out

    def copy(self):
        return FactorBlocks(self.mode, [b.copy() for b in self.blocks],
                            self.lows.copy(), self.his.copy())


def gram(blocks, ledger=None, round_id=0):
    """U^T U summed over blocks: Allreduce of the per-rank partial Grams."""
    if isinstance(blocks, np.ndarray):
        return blocks.T @ blocks
    partials = [b.T @ b for b in blocks.blocks]
    return gridmod.allreduce(partials, list(range(len(partials))),
                             ledger=ledger, round_id=round_id)


def hadamard_gram_chain(grams, skip=None):
    """Elementwise product of the Gram matrices, excluding index ``skip``."""
    out = None
    for i, G in enumerate(grams):
        if i == skip:
            continue
        out = G.copy() if out is None else out * G
    if out is None:
        raise ValueError("empty Gram chain (need at least one factor besides the solved mode)")
    return out


def pseudo_inverse(G, rel_cutoff=PINV_CUTOFF):
    """Moore-Penrose pseudo-inverse of a symmetric PSD matrix.

    Uses a symmetric eigendecomposition; eigenvalues below
    rel_cutoff * lambda_max are treated as zero and inverted to zero.
    """
    G = np.asarray(G, dtype=np.float64)
    scale = np.abs(G).max() if G.size else 0.0
    asym = np.abs(G - G.T).max() if G.size else 0.0
    if asym > SYMMETRY_RTOL * max(scale, 1.0):
        raise ValueError("matrix is not symmetric (max asymmetry %.3e)" % asym)
    sym = 0.5 * (G + G.T)
    w, V = np.linalg.eigh(sym)
    lam_max = w.max() if w.size else 0.0
    if lam_max <= 0.0:
        return np.zeros_like(sym)
    inv_w = np.where(w > rel_cutoff * lam_max, 1.0, 0.0)
    with np.errstate(divide="ignore"):
        inv_w = np.where(inv_w > 0, 1.0 / np.where(w > 0, w, 1.0), 0.0)
    return (V * inv_w) @ V.T


def normalize_columns(U):
    """Scale each column to unit 2-norm; zero columns stay zero with norm 0."""
    norms = np.sqrt((U * U).sum(axis=0))
    safe = np.where(norms > 0.0, norms, 1.0)
    return U / safe, norms


def khatri_rao(factors, skip=None):
    """Khatri-Rao product over modes != skip, earlier modes varying fastest.

    Row r of the result corresponds to the off-mode index tuple whose
    mixed-radix key (see matricization.column_keys) equals r.
    """
    out = None
    for i, U in enumerate(factors):
        if i == skip or U is None:
            continue
        out = U if out is None else (U[:, None, :] * out[None, :, :]).reshape(-1, U.shape[1])
    if out is None:
        raise ValueError("Khatri-Rao product of an empty factor list")
    return out


def compute_fit(tensor, factors, sigma, mode_mat: Matricization = None, workers=1) -> float:
    """Exact fit 1 - ||T_hat - T||_F / ||T||_F.

    ``factors`` must have unit-norm columns with scales in ``sigma``.
    The cross term uses one exact last-mode MTTKRP; no sampled quantity
    enters the evaluation.  ``mode_mat`` may supply a cached
    matricization of the last mode.
    """
    norm_sq = tensor.norm_squared()
    if norm_sq == 0.0:
        raise ValueError("fit is undefined for an all-zero tensor")
    last = tensor.mode_count - 1
    if mode_mat is None:
        mode_mat = matricize(tensor, last)
    elif mode_mat.mode != last:
        raise ValueError("cached matricization is for mode %d, need %d" % (mode_mat.mode, last))
    grams = [gram(U) for U in factors]
    model_sq = float(sigma @ hadamard_gram_chain(grams) @ sigma)
    M = mttkrp_exact(mode_mat, factors, workers=workers)
    cross = float(np.sum(sigma * np.einsum("ir,ir->r", factors[last], M)))
    resid_sq = max(norm_sq - 2.0 * cross + model_sq, 0.0)
    return 1.0 - np.sqrt(resid_sq) / np.sqrt(norm_sq)
