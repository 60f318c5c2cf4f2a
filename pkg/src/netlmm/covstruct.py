"""Structured marginal covariance Sigma = V + Z U Z' and its fast solves.

V is the edge-level residual covariance, restricted to one of three
sparsity classes: per-cell constant diagonal ("diag", the default),
per-edge diagonal ("diag-edge"), or per-cell dense blocks ("block").
U is the cell-level random-effect covariance (C x C, PSD, possibly
singular).  Z is the binary edge-to-cell membership indicator, so Z U Z'
is block-constant: U[c, c'] repeated over the (cell c) x (cell c') block.

Solves and log-determinants use the Woodbury identity with U factored
rank-revealingly as U = L L' (eigenvalue cutoff 1e-10 * lambda_max), which
handles singular U exactly:

    Sigma^-1 = V^-1 - V^-1 Z L (I + L' Z'V^-1 Z L)^-1 L' Z' V^-1
    log det Sigma = log det V + log det(I + L' Z'V^-1 Z L)

Z'V^-1 Z is diagonal for every supported V class (cells do not mix), with
entries 1' V_c^-1 1.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import cho_factor, cho_solve, eigh

from .errors import NumericalError, ValidationError

__all__ = [
    "ResidualCov",
    "RandomEffectCov",
    "StructuredCovariance",
    "project_residual_cov",
]

V_MODES = ("diag", "diag-edge", "block")

# Eigenvalue tolerances: entries in [-PSD_TOL, 0) are clipped to zero,
# below -PSD_TOL is an error; RANK_CUTOFF (relative) drops directions
# from the U factor.
PSD_TOL = 1e-8
RANK_CUTOFF = 1e-10


def _segsum(arr, starts, ends):
    """Per-cell sums over axis 0; robust to zero-length segments."""
    cs = np.concatenate(
        [np.zeros((1,) + arr.shape[1:], dtype=arr.dtype), np.cumsum(arr, axis=0)]
    )
    return cs[ends] - cs[starts]


class ResidualCov:
    """Edge-level residual covariance in a declared sparsity class.

    Parameters
    ----------
    mode : str
        One of "diag" (one variance per cell), "diag-edge", "block".
    values : array or list
        (C,) cell variances, (d,) edge variances, or a list of per-cell
        symmetric blocks, matching the mode.
    partition : CellPartition
    """

    def __init__(self, mode, values, partition):
        if mode not in V_MODES:
            raise ValidationError(f"unknown residual covariance mode {mode!r}")
        self.mode = mode
        self.partition = partition
        c, d = partition.n_cells, partition.n_edges
        if mode == "diag":
            vals = np.asarray(values, dtype=float).ravel()
            if vals.shape != (c,):
                raise ValidationError(f"diag mode expects {c} cell variances")
            if np.any(vals < 0):
                raise ValidationError("negative residual variance")
            self.values = vals
        elif mode == "diag-edge":
            vals = np.asarray(values, dtype=float).ravel()
            if vals.shape != (d,):
                raise ValidationError(f"diag-edge mode expects {d} variances")
            if np.any(vals < 0):
                raise ValidationError("negative residual variance")
            self.values = vals
        else:
            blocks = []
            for k, blk in enumerate(values):
                b = np.asarray(blk, dtype=float)
                n_k = int(partition.cell_sizes[k])
                if b.shape != (n_k, n_k):
                    raise ValidationError(
                        f"block for cell {partition.cell_label(k)} has shape "
                        f"{b.shape}, expected ({n_k}, {n_k})"
                    )
                if n_k and not np.allclose(b, b.T, atol=1e-8, rtol=0.0):
                    raise ValidationError(
                        f"block for cell {partition.cell_label(k)} not symmetric"
                    )
                blocks.append(0.5 * (b + b.T))
            if len(blocks) != c:
                raise ValidationError(f"expected {c} blocks, got {len(blocks)}")
            self.values = blocks
        self._chol = None

    # -- helpers ---------------------------------------------------------

    def edge_variances(self):
        """Diagonal of V as a (d,) vector."""
        part = self.partition
        if self.mode == "diag":
            return np.repeat(self.values, part.cell_sizes)
        if self.mode == "diag-edge":
            return self.values.copy()
        out = np.empty(part.n_edges)
        for c in range(part.n_cells):
            out[part.cell_slice(c)] = np.diag(self.values[c])
        return out

    def _factor(self):
        if self.mode != "block":
            v = self.edge_variances()
            if np.any(v <= 0):
                raise NumericalError("residual covariance is singular (zero variance)")
            return None
        if self._chol is None:
            chol = []
            for c, blk in enumerate(self.values):
                if blk.shape[0] == 0:
                    chol.append(None)
                    continue
                try:
                    chol.append(cho_factor(blk, lower=True))
                except np.linalg.LinAlgError:
                    raise NumericalError(
                        f"residual block for cell "
                        f"{self.partition.cell_label(c)} is not positive definite"
                    ) from None
            self._chol = chol
        return self._chol

    def solve(self, b):
        """V^-1 b for b of shape (d,) or (d, k)."""
        if self.mode != "block":
            self._factor()
            v = self.edge_variances()
            return (b.T / v).T if b.ndim > 1 else b / v
        chol = self._factor()
        out = np.empty_like(np.asarray(b, dtype=float))
        for c in range(self.partition.n_cells):
            sl = self.partition.cell_slice(c)
            if chol[c] is None:
                continue
            out[sl] = cho_solve(chol[c], b[sl])
        return out

    def dot(self, b):
        """V b."""
        if self.mode != "block":
            v = self.edge_variances()
            return (b.T * v).T if b.ndim > 1 else b * v
        out = np.empty_like(np.asarray(b, dtype=float))
        for c in range(self.partition.n_cells):
            sl = self.partition.cell_slice(c)
            out[sl] = self.values[c] @ b[sl]
        return out

    def inv_ones(self):
        """V^-1 Z stacked cellwise: the (d,) vector whose cell-c segment is V_c^-1 1."""
        d = self.partition.n_edges
        return self.solve(np.ones(d))

    def cell_inv_quad_ones(self):
        """(C,) vector of 1' V_c^-1 1 (the diagonal of Z'V^-1 Z)."""
        part = self.partition
        vz = self.inv_ones()
        return _segsum(vz, part.cell_starts, part.cell_starts + part.cell_sizes)

    def cell_quad_ones(self):
        """(C,) vector of 1' V_c 1 (sum of each cell block's entries)."""
        part = self.partition
        if self.mode == "diag":
            return self.values * part.cell_sizes
        if self.mode == "diag-edge":
            return _segsum(
                self.values, part.cell_starts, part.cell_starts + part.cell_sizes
            )
        return np.array([blk.sum() for blk in self.values])

    def ones_dot(self):
        """V Z stacked cellwise: (d,) vector whose cell-c segment is V_c 1."""
        return self.dot(np.ones(self.partition.n_edges))

    def logdet(self):
        if self.mode != "block":
            v = self.edge_variances()
            if np.any(v <= 0):
                raise NumericalError("residual covariance is singular (zero variance)")
            return float(np.sum(np.log(v)))
        chol = self._factor()
        total = 0.0
        for f in chol:
            if f is None:
                continue
            total += 2.0 * float(np.sum(np.log(np.diag(f[0]))))
        return total

    def block_solve(self, c, b):
        """V_c^-1 b for a single cell; b has n_c rows."""
        if self.mode == "diag":
            v = self.values[c]
            if v <= 0:
                raise NumericalError("residual covariance is singular (zero variance)")
            return b / v
        if self.mode == "diag-edge":
            v = self.values[self.partition.cell_slice(c)]
            if np.any(v <= 0):
                raise NumericalError("residual covariance is singular (zero variance)")
            return (b.T / v).T if b.ndim > 1 else b / v
        chol = self._factor()
        return cho_solve(chol[c], b)

    def block_dot(self, c, b):
        """V_c b for a single cell."""
        if self.mode == "diag":
            return self.values[c] * b
        if self.mode == "diag-edge":
            v = self.values[self.partition.cell_slice(c)]
            return (b.T * v).T if b.ndim > 1 else b * v
        return self.values[c] @ b

    def block_dense(self, c):
        """Cell block V_c as a dense (n_c, n_c) array."""
        n_c = int(self.partition.cell_sizes[c])
        if self.mode == "diag":
            return self.values[c] * np.eye(n_c)
        if self.mode == "diag-edge":
            return np.diag(self.values[self.partition.cell_slice(c)])
        return self.values[c].copy()

    def dense(self):
        """Full dense V (small instances)."""
        part = self.partition
        out = np.zeros((part.n_edges, part.n_edges))
        for c in range(part.n_cells):
            sl = part.cell_slice(c)
            out[sl, sl] = self.block_dense(c)
        return out


class RandomEffectCov:
    """Cell-level random-effect covariance U with a cached rank-revealing factor."""

    def __init__(self, matrix):
        u = np.asarray(matrix, dtype=float)
        if u.ndim != 2 or u.shape[0] != u.shape[1]:
            raise ValidationError("random-effect covariance must be square")
        if not np.allclose(u, u.T, atol=1e-8, rtol=0.0):
            raise ValidationError("random-effect covariance not symmetric")
        u = 0.5 * (u + u.T)
        if u.shape[0] == 0:
            raise ValidationError("random-effect covariance is empty")
        w, vecs = eigh(u)
        scale = max(float(w[-1]), 0.0)
        if w[0] < -PSD_TOL * max(scale, 1.0):
            raise NumericalError(
                f"random-effect covariance has eigenvalue {w[0]:.3e}, "
                "not PSD within tolerance"
            )
        keep = w > RANK_CUTOFF * max(scale, 0.0)
        self.matrix = u
        self.factor = vecs[:, keep] * np.sqrt(w[keep])  # C x rank
        self.rank = int(keep.sum())

    @property
    def n_cells(self):
        return self.matrix.shape[0]


class StructuredCovariance:
    """Sigma = V + Z U Z' with Woodbury-based solves.

    Only the partition's cell layout is needed from Z; the dense indicator
    is available as ``.Z`` for small instances.
    """

    def __init__(self, resid_cov: ResidualCov, re_cov: RandomEffectCov):
        self.resid = resid_cov
        self.re = re_cov
        self.partition = resid_cov.partition
        if re_cov.n_cells != self.partition.n_cells:
            raise ValidationError(
                f"U has {re_cov.n_cells} cells, partition has "
                f"{self.partition.n_cells}"
            )
        self._vz = resid_cov.inv_ones()
        self._dvec = resid_cov.cell_inv_quad_ones()
        lmat = re_cov.factor
        if lmat.shape[1]:
            inner = np.eye(lmat.shape[1]) + lmat.T @ (self._dvec[:, None] * lmat)
            try:
                self._inner = cho_factor(inner, lower=True)
            except np.linalg.LinAlgError:
                raise NumericalError(
                    "Woodbury inner matrix not positive definite"
                ) from None
        else:
            self._inner = None  # U = 0: Sigma reduces to V
        self._starts = self.partition.cell_starts
        self._ends = self._starts + self.partition.cell_sizes

    @property
    def Z(self):
        d, c = self.partition.n_edges, self.partition.n_cells
        z = np.zeros((d, c))
        z[np.arange(d), self.partition.edge_cell] = 1.0
        return z

    @property
    def inv_ones_vec(self):
        """Cached V^-1 Z stacked cellwise (see ResidualCov.inv_ones)."""
        return self._vz

    @property
    def cell_inv_quad(self):
        """Cached diagonal of Z'V^-1 Z."""
        return self._dvec

    def _cell_sums(self, arr):
        return _segsum(arr, self._starts, self._ends)

    def solve(self, b):
        """Sigma^-1 b for b of shape (d,) or (d, k)."""
        b = np.asarray(b, dtype=float)
        s1 = self.resid.solve(b)
        if self._inner is None:
            return s1
        t = self._cell_sums(s1)  # Z' V^-1 b
        lmat = self.re.factor
        w = cho_solve(self._inner, lmat.T @ t)
        corr = (lmat @ w)[self.partition.edge_cell]
        if b.ndim > 1:
            return s1 - self._vz[:, None] * corr
        return s1 - self._vz * corr

    def cell_project_solve(self, b):
        """Z' Sigma^-1 b, shape (C,) or (C, k)."""
        b = np.asarray(b, dtype=float)
        t = self._cell_sums(self.resid.solve(b))
        return self.apply_cell_precision(t)

    def apply_cell_precision(self, t):
        """Map t = Z'V^-1 b to Z'Sigma^-1 b."""
        if self._inner is None:
            return t
        lmat = self.re.factor
        w = cho_solve(self._inner, lmat.T @ t)
        if t.ndim > 1:
            return t - self._dvec[:, None] * (lmat @ w)
        return t - self._dvec * (lmat @ w)

    def cell_precision(self):
        """Z' Sigma^-1 Z as a dense (C, C) matrix."""
        if self._inner is None:
            return np.diag(self._dvec)
        lmat = self.re.factor
        dl = self._dvec[:, None] * lmat
        return np.diag(self._dvec) - dl @ cho_solve(self._inner, dl.T)

    def posterior_shrinkage(self):
        """U - U (Z'Sigma^-1 Z) U, the per-subject posterior covariance."""
        u = self.re.matrix
        out = u - u @ self.cell_precision() @ u
        return 0.5 * (out + out.T)

    def cell_gain(self):
        """Q = L (I + L'DL)^-1 L' (C x C), the Woodbury middle factor."""
        if self._inner is None:
            return np.zeros((self.partition.n_cells, self.partition.n_cells))
        lmat = self.re.factor
        return lmat @ cho_solve(self._inner, lmat.T)

    def logdet(self):
        base = self.resid.logdet()
        if self._inner is None:
            return base
        diag = np.diag(self._inner[0])
        return base + 2.0 * float(np.sum(np.log(diag)))

    def quad(self, b):
        """b' Sigma^-1 b; for (d, k) input returns the (k,) columnwise quadratics."""
        s = self.solve(b)
        if b.ndim > 1:
            return np.einsum("dk,dk->k", b, s)
        return float(b @ s)

    def dot(self, b):
        """Sigma b."""
        b = np.asarray(b, dtype=float)
        zb = self._cell_sums(b)
        spread = (self.re.matrix @ zb)[self.partition.edge_cell]
        return self.resid.dot(b) + spread

    def cell_block_dense(self, c):
        """Sigma restricted to cell c: V_c + U[c, c] * ones."""
        n_c = int(self.partition.cell_sizes[c])
        return self.resid.block_dense(c) + self.re.matrix[c, c] * np.ones((n_c, n_c))

    def dense(self):
        z = self.Z
        return self.resid.dense() + z @ self.re.matrix @ z.T


def project_residual_cov(dense, partition, mode) -> ResidualCov:
    """Project a dense symmetric matrix onto a residual-covariance class.

    Frobenius-optimal masking (keep the declared entries, zero the rest);
    block mode additionally clips each block's negative eigenvalues to
    zero.  "diag" keeps the within-cell mean of the diagonal, "diag-edge"
    keeps the diagonal itself.
    """
    s = np.asarray(dense, dtype=float)
    d = partition.n_edges
    if s.shape != (d, d):
        raise ValidationError(f"expected ({d}, {d}) matrix, got {s.shape}")
    diag = np.diag(s)
    if mode == "diag-edge":
        return ResidualCov("diag-edge", np.maximum(diag, 0.0), partition)
    if mode == "diag":
        sums = _segsum(
            diag, partition.cell_starts, partition.cell_starts + partition.cell_sizes
        )
        sizes = np.maximum(partition.cell_sizes, 1)
        return ResidualCov("diag", np.maximum(sums / sizes, 0.0), partition)
    if mode == "block":
        blocks = []
        for c in range(partition.n_cells):
            sl = partition.cell_slice(c)
            blk = 0.5 * (s[sl, sl] + s[sl, sl].T)
            if blk.shape[0]:
                w, vecs = eigh(blk)
                blk = (vecs * np.maximum(w, 0.0)) @ vecs.T
                blk = 0.5 * (blk + blk.T)
            blocks.append(blk)
        return ResidualCov("block", blocks, partition)
    raise ValidationError(f"unknown residual covariance mode {mode!r}")
