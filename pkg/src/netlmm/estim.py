"""Coefficient estimation: per-cell OLS, structured GLS, and EM.

Estimators share the coefficient layout of :class:`CoefficientSet`:
cell-level effects beta (one p-vector per cell) plus edge-level
deviations eta (one p-vector per edge) constrained to sum to zero within
each cell, so the mean of edge (i, j) for subject m is
x_m' (beta_cell + eta_edge).

fit_gls solves the generalized least-squares normal equations for a
supplied marginal covariance by block coordinate descent over cells; the
cross-cell coupling enters only through the rank-limited Woodbury term,
which keeps every cell update closed-form.

fit_em maximizes the marginal likelihood of the random-effects model
y_m = X_m alpha + Z gamma_m + eps_m, gamma_m ~ N(0, U), eps_m ~ N(0, V),
by EM in the mean-shifted parametrization zeta_m = {x_m' beta_c} + gamma_m:
the E-step computes the posterior of zeta_m, the M-step updates beta and
U from the posterior means and then alternates the V update with the
weighted sum-to-zero eta update until the inner loop settles.  Every
substep maximizes its block of the expected complete-data log-likelihood,
so the marginal log-likelihood never decreases.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, eigh

from .covstruct import RandomEffectCov, ResidualCov, StructuredCovariance, _segsum
from .errors import ConvergenceError, NumericalError, ValidationError
from .netdata import DesignMatrices, NetworkPopulation

__all__ = [
    "CoefficientSet",
    "GlsFit",
    "FitResult",
    "EmOptions",
    "fit_ols",
    "ols_fit",
    "ols_fit_arrays",
    "fit_gls",
    "fit_em",
    "fit_em_arrays",
    "marginal_loglik",
]

_RANK_TOL = 1e-10
_SUM_ZERO_TOL = 1e-10


@dataclass
class CoefficientSet:
    """Cell effects and sum-to-zero edge deviations for all covariates.

    beta : (C, p); eta : (d, p) with zero column sums within each cell.
    """

    beta: np.ndarray
    eta: np.ndarray
    partition: object
    covariate_names: tuple

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=float)
        self.eta = np.asarray(self.eta, dtype=float)
        part = self.partition
        p = len(self.covariate_names)
        if self.beta.shape != (part.n_cells, p):
            raise ValidationError(
                f"beta shape {self.beta.shape}, expected ({part.n_cells}, {p})"
            )
        if self.eta.shape != (part.n_edges, p):
            raise ValidationError(
                f"eta shape {self.eta.shape}, expected ({part.n_edges}, {p})"
            )
        sums = _segsum(self.eta, part.cell_starts, part.cell_starts + part.cell_sizes)
        scale = max(float(np.max(np.abs(self.eta), initial=0.0)), 1.0)
        if np.max(np.abs(sums), initial=0.0) > _SUM_ZERO_TOL * scale * np.max(
            part.cell_sizes, initial=1
        ):
            raise ValidationError("eta does not sum to zero within cells")

    @property
    def n_covariates(self):
        return len(self.covariate_names)

    def edge_effects(self):
        """Per-edge total coefficients beta_cell + eta_edge, shape (d, p)."""
        return self.beta[self.partition.edge_cell] + self.eta

    def stacked(self):
        """Free-coefficient vector matching the dense design column order.

        Per cell: beta (p entries), then eta for the first n_c - 1 edges
        (p entries each); the last edge's eta is determined.
        """
        part = self.partition
        pieces = []
        for c in range(part.n_cells):
            sl = part.cell_slice(c)
            pieces.append(self.beta[c])
            pieces.append(self.eta[sl][:-1].ravel())
        return np.concatenate(pieces) if pieces else np.zeros(0)

    @classmethod
    def from_stacked(cls, vec, partition, covariate_names):
        p = len(covariate_names)
        beta = np.zeros((partition.n_cells, p))
        eta = np.zeros((partition.n_edges, p))
        pos = 0
        for c in range(partition.n_cells):
            n_c = int(partition.cell_sizes[c])
            beta[c] = vec[pos : pos + p]
            pos += p
            free = vec[pos : pos + p * (n_c - 1)].reshape(n_c - 1, p)
            pos += p * (n_c - 1)
            sl = partition.cell_slice(c)
            eta[sl.start : sl.start + n_c - 1] = free
            eta[sl.start + n_c - 1] = -free.sum(axis=0)
        return cls(beta, eta, partition, tuple(covariate_names))

    @classmethod
    def from_edge_effects(cls, theta, partition, covariate_names):
        """Split per-edge coefficients into cell means and deviations."""
        theta = np.asarray(theta, dtype=float)
        sums = _segsum(theta, partition.cell_starts, partition.cell_starts + partition.cell_sizes)
        sizes = np.maximum(partition.cell_sizes, 1)[:, None]
        beta = sums / sizes
        eta = theta - beta[partition.edge_cell]
        return cls(beta, eta, partition, tuple(covariate_names))


@dataclass
class GlsFit:
    """GLS (or OLS) estimate plus everything inference needs.

    ``sigma`` is the marginal covariance the standard errors are evaluated
    at; the coefficient covariance (sum_m X_m' Sigma^-1 X_m)^-1 is exposed
    through it together with ``gram`` = sum_m x_m x_m'.
    """

    alpha: CoefficientSet
    sigma: StructuredCovariance
    gram: np.ndarray
    n_subjects: int
    method: str
    iterations: int = 0

    @property
    def partition(self):
        return self.alpha.partition

    @property
    def covariate_names(self):
        return self.alpha.covariate_names


@dataclass
class FitResult:
    """EM fit: coefficients, variance components, and diagnostics."""

    alpha: CoefficientSet
    re_cov: RandomEffectCov
    resid_cov: ResidualCov
    loglik_trace: np.ndarray
    converged: bool
    iterations: int
    posterior_gamma: np.ndarray
    sigma: StructuredCovariance
    gram: np.ndarray
    n_subjects: int
    method: str = "gls-em"

    @property
    def partition(self):
        return self.alpha.partition

    @property
    def covariate_names(self):
        return self.alpha.covariate_names

    @property
    def loglik(self):
        return float(self.loglik_trace[-1])


@dataclass
class EmOptions:
    """Knobs for fit_em; tol is the absolute log-likelihood change."""

    tol: float = 1e-6
    max_iter: int = 1000
    inner_tol: float = 1e-8
    inner_max: int = 50


# ---------------------------------------------------------------------------
# shared internals


def _edge_arrays(pop, designs):
    y = pop.edge_matrix()
    x = designs.covariates
    if y.shape[0] != x.shape[0]:
        raise ValidationError("population and designs disagree on subject count")
    return y, x


def _gram_factor(designs):
    m = designs.gram()
    w = np.linalg.eigvalsh(m)
    if w[0] <= _RANK_TOL * max(w[-1], 1.0):
        part = designs.partition
        label = part.cell_label(0) if part.n_cells else ("?", "?")
        raise NumericalError(
            f"covariate design is rank deficient (cell {label}): "
            f"min eigenvalue {w[0]:.3e}"
        )
    return m, cho_factor(m, lower=True)


def _edge_ols(y, x, mchol):
    """Per-edge regression coefficients, shape (d, p)."""
    return cho_solve(mchol, x.T @ y).T


def _cell_means(values, partition):
    """Within-cell means over the edge axis; zero for empty cells."""
    sums = _segsum(values, partition.cell_starts, partition.cell_starts + partition.cell_sizes)
    sizes = np.maximum(partition.cell_sizes, 1)
    if values.ndim > 1:
        return sums / sizes[:, None]
    return sums / sizes


# ---------------------------------------------------------------------------
# OLS


def fit_ols(pop: NetworkPopulation, designs: DesignMatrices) -> CoefficientSet:
    """Ordinary least squares; decouples into per-edge regressions."""
    y, x = _edge_arrays(pop, designs)
    _, mchol = _gram_factor(designs)
    theta = _edge_ols(y, x, mchol)
    return CoefficientSet.from_edge_effects(
        theta, designs.partition, designs.covariate_names
    )


def ols_fit_arrays(y, x, partition, covariate_names) -> GlsFit:
    """OLS on pre-vectorized arrays; see :func:`ols_fit`."""
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    m = x.T @ x
    w = np.linalg.eigvalsh(m)
    if w[0] <= _RANK_TOL * max(w[-1], 1.0):
        raise NumericalError(
            f"covariate design is rank deficient: min eigenvalue {w[0]:.3e}"
        )
    mchol = cho_factor(m, lower=True)
    theta = _edge_ols(y, x, mchol)
    n, d = y.shape
    p = x.shape[1]
    dof = n * d - p * d
    if dof <= 0:
        raise NumericalError(
            f"no residual degrees of freedom (N={n}, p={p}); "
            "cannot form OLS standard errors"
        )
    resid = y - x @ theta.T
    sigma2 = float(np.sum(resid**2)) / dof
    alpha = CoefficientSet.from_edge_effects(theta, partition, covariate_names)
    resid_cov = ResidualCov("diag", np.full(partition.n_cells, sigma2), partition)
    sigma = StructuredCovariance(
        resid_cov, RandomEffectCov(np.zeros((partition.n_cells, partition.n_cells)))
    )
    return GlsFit(alpha, sigma, m, n, "ols")


def ols_fit(pop: NetworkPopulation, designs: DesignMatrices) -> GlsFit:
    """OLS with its classical covariance: Sigma-hat = sigma2 * I.

    sigma2 pools the residual sum of squares over all edges and subjects
    with the usual degrees-of-freedom correction.
    """
    y, x = _edge_arrays(pop, designs)
    return ols_fit_arrays(y, x, designs.partition, designs.covariate_names)


# ---------------------------------------------------------------------------
# GLS by block coordinate descent


def fit_gls(
    pop: NetworkPopulation,
    designs: DesignMatrices,
    sigma: StructuredCovariance,
    tol: float = 1e-8,
    max_iter: int = 500,
) -> GlsFit:
    """GLS at a fixed marginal covariance.

    Gauss-Seidel sweeps over cells; each cell's normal equations are
    solved exactly using the Woodbury structure of [Sigma^-1]_cc, and the
    cross-cell residual projections are maintained incrementally.  Stops
    when the relative coefficient change over a sweep drops below tol.
    """
    y, x = _edge_arrays(pop, designs)
    _, mchol = _gram_factor(designs)
    part = designs.partition
    n, d = y.shape
    p = x.shape[1]

    vz = sigma.inv_ones_vec
    dvec = sigma.cell_inv_quad
    q = sigma.cell_gain()
    qdiag = np.diag(q)

    theta = np.zeros((d, p))
    resid = y.copy()
    # t = Z' V^-1 R', maintained across cell updates
    t = _segsum(
        sigma.resid.solve(resid.T), part.cell_starts, part.cell_starts + part.cell_sizes
    )

    rel = np.inf
    for sweep in range(1, max_iter + 1):
        delta_sq = 0.0
        norm_sq = 0.0
        for c in range(part.n_cells):
            sl = part.cell_slice(c)
            n_c = sl.stop - sl.start
            if n_c == 0:
                continue
            fitted_c = x @ theta[sl].T  # (N, n_c)
            r_full = resid[:, sl] + fitted_c
            # [Sigma^-1 R^(-c)']_c = V_c^-1 R_c' - vz_c (Q[c] @ t^(-c))
            tc_extra = fitted_c @ vz[sl]
            qt = q[c] @ t + qdiag[c] * tc_extra  # (N,)
            g = sigma.resid.block_solve(c, r_full.T) - vz[sl][:, None] * qt[None, :]
            rhs = cho_solve(mchol, (g @ x).T).T  # (n_c, p)
            # [Sigma^-1]_cc^-1 = V_c + const * ones
            if qdiag[c] > 0:
                denom = 1.0 / qdiag[c] - dvec[c]
                if denom <= 0:
                    raise NumericalError(
                        "indefinite cell system in GLS coordinate descent"
                    )
                const = 1.0 / denom
            else:
                const = 0.0
            new_c = sigma.resid.block_dot(c, rhs) + const * rhs.sum(axis=0)[None, :]
            d_theta = new_c - theta[sl]
            delta_sq += float(np.sum(d_theta**2))
            norm_sq += float(np.sum(new_c**2))
            if np.any(d_theta):
                theta[sl] = new_c
                d_fit = x @ d_theta.T
                resid[:, sl] -= d_fit
                t[c] -= d_fit @ vz[sl]
        rel = np.sqrt(delta_sq / max(norm_sq, 1e-30))
        if rel < tol:
            alpha = CoefficientSet.from_edge_effects(
                theta, part, designs.covariate_names
            )
            return GlsFit(alpha, sigma, designs.gram(), n, "gls", iterations=sweep)
    raise ConvergenceError(
        f"GLS coordinate descent did not converge in {max_iter} sweeps "
        f"(relative change {rel:.3e}, tol {tol:.1e})"
    )


# ---------------------------------------------------------------------------
# marginal likelihood


def _loglik_arrays(y, x, beta, eta, sigma):
    part = sigma.partition
    resid = y - x @ (beta[part.edge_cell] + eta).T
    n, d = y.shape
    quad = float(np.sum(sigma.quad(resid.T)))
    return -0.5 * (n * d * np.log(2.0 * np.pi) + n * sigma.logdet() + quad)


def marginal_loglik(pop, designs, alpha: CoefficientSet, sigma) -> float:
    """Gaussian marginal log-likelihood at the given coefficients and Sigma."""
    y, x = _edge_arrays(pop, designs)
    return _loglik_arrays(y, x, alpha.beta, alpha.eta, sigma)


# ---------------------------------------------------------------------------
# EM


def _beta_update(post_gram, mchol, m, u, free_mask):
    """M-step for beta: regression of posterior cell means on covariates.

    Unconstrained, U drops out and each cell regresses independently.
    With zero constraints the stationarity couples cells through U^-1,
    so solve the restricted (U^-1 kron M) system; it stays small (C*p).
    """
    if free_mask is None:
        return cho_solve(mchol, post_gram.T).T
    w, vecs = eigh(u)
    cutoff = max(float(w[-1]), 0.0) * 1e-12
    keep = w > cutoff
    if not np.any(keep):
        return np.zeros(free_mask.shape)
    ui = (vecs[:, keep] / w[keep]) @ vecs[:, keep].T
    sel = free_mask.ravel()
    sub = np.kron(ui, m)[np.ix_(sel, sel)]
    rhs = (ui @ post_gram).ravel()[sel]
    try:
        sol = np.linalg.solve(sub, rhs)
    except np.linalg.LinAlgError:
        sol = np.linalg.lstsq(sub, rhs, rcond=None)[0]
    beta = np.zeros(free_mask.size)
    beta[sel] = sol
    return beta.reshape(free_mask.shape)


def _eta_update(w_resid, x, eta, f_idx, mff_chol, resid_cov, partition):
    """Weighted sum-to-zero regression for the enabled eta columns."""
    if f_idx.size == 0:
        return eta
    bmat = w_resid.T @ x[:, f_idx]
    g = cho_solve(mff_chol, bmat.T).T  # (d, f) unconstrained per-edge fit
    v_ones = resid_cov.ones_dot()
    den = resid_cov.cell_quad_ones()
    num = _segsum(g, partition.cell_starts, partition.cell_starts + partition.cell_sizes)
    ratio = np.zeros_like(num)
    ok = den > 0
    ratio[ok] = num[ok] / den[ok, None]
    new = np.zeros_like(eta)
    new[:, f_idx] = g - v_ones[:, None] * ratio[partition.edge_cell]
    return new


_EIG_FLOOR_REL = 1e-2


def _v_update(res2, cpost_diag, v_mode, partition, n):
    """One V M-step; returns (ResidualCov, floor_active).

    Block mode floors each block's eigenvalues at a small multiple of its
    mean diagonal: with more edges in a cell than subjects the moment
    update is rank-deficient, and the likelihood is unbounded along its
    null directions, so the exact M-step would leave the feasible set.
    floor_active reports whether any clipping actually happened.
    """
    part = partition
    if v_mode == "diag":
        ss = np.sum(res2**2, axis=0) / n
        sums = _segsum(ss, part.cell_starts, part.cell_starts + part.cell_sizes)
        sizes = np.maximum(part.cell_sizes, 1)
        vals = sums / sizes + cpost_diag
        vals[part.cell_sizes == 0] = 1.0
        return ResidualCov("diag", np.maximum(vals, 1e-12), part), False
    if v_mode == "diag-edge":
        ss = np.sum(res2**2, axis=0) / n
        vals = ss + cpost_diag[part.edge_cell]
        return ResidualCov("diag-edge", np.maximum(vals, 1e-12), part), False
    blocks = []
    floored = False
    for c in range(part.n_cells):
        sl = part.cell_slice(c)
        n_c = sl.stop - sl.start
        blk = res2[:, sl].T @ res2[:, sl] / n + cpost_diag[c] * np.ones((n_c, n_c))
        blk = 0.5 * (blk + blk.T)
        if n_c > 1:
            # The within-cell mean direction of V is confounded with the
            # cell random effect U_cc (both add constant J mass), so the
            # unrestricted moment update drifts along a flat ridge.  Pin
            # V's mean-direction variance to the average of its centered
            # spectrum; the cell-level variance then lives in U alone.
            rm = blk.mean(axis=1)
            blk = blk - rm[:, None] - rm[None, :] + rm.mean()
            delta = float(np.trace(blk)) / (n_c - 1)
            blk = blk + delta / n_c
            floored = True
        if n_c:
            w, vecs = np.linalg.eigh(blk)
            floor = max(_EIG_FLOOR_REL * float(np.trace(blk)) / n_c, 1e-12)
            if w[0] < floor:
                blk = (vecs * np.maximum(w, floor)) @ vecs.T
                blk = 0.5 * (blk + blk.T)
        blocks.append(blk)
    return ResidualCov("block", blocks, part), floored


def _v_values(resid_cov):
    if resid_cov.mode == "block":
        return np.concatenate([b.ravel() for b in resid_cov.values]) if resid_cov.values else np.zeros(0)
    return resid_cov.values


def _initial_state(y, x, mchol, partition, v_mode, f_mask, beta_free):
    """OLS start projected onto the constraints, then moment-based U, V."""
    theta = _edge_ols(y, x, mchol)
    sums = _segsum(theta, partition.cell_starts, partition.cell_starts + partition.cell_sizes)
    sizes = np.maximum(partition.cell_sizes, 1)[:, None]
    beta = sums / sizes
    eta = theta - beta[partition.edge_cell]
    eta[:, ~f_mask] = 0.0
    if beta_free is not None:
        beta[~beta_free] = 0.0
    resid = y - x @ (beta[partition.edge_cell] + eta).T
    n = y.shape[0]
    cell_means = _cell_means(resid.T, partition).T  # (N, C)
    u0 = cell_means.T @ cell_means / max(n - 1, 1)
    msq = _cell_means(np.mean(resid**2, axis=0), partition)
    v0 = msq - np.diag(u0)
    floor = np.maximum(1e-4 * msq, 1e-12)
    v0 = np.maximum(v0, floor)
    v0[partition.cell_sizes == 0] = 1.0
    if v_mode == "diag":
        resid_cov = ResidualCov("diag", v0, partition)
    elif v_mode == "diag-edge":
        ve = np.mean(resid**2, axis=0) - np.diag(u0)[partition.edge_cell]
        ve = np.maximum(ve, np.maximum(1e-4 * np.mean(resid**2, axis=0), 1e-12))
        resid_cov = ResidualCov("diag-edge", ve, partition)
    else:
        blocks = [
            v0[c] * np.eye(int(partition.cell_sizes[c]))
            for c in range(partition.n_cells)
        ]
        resid_cov = ResidualCov("block", blocks, partition)
    return beta, eta, u0, resid_cov


def fit_em_arrays(
    y,
    x,
    partition,
    covariate_names,
    v_mode="diag",
    options: EmOptions | None = None,
    eta_covariates=None,
    beta_zero=None,
    init=None,
) -> FitResult:
    """EM on pre-vectorized arrays; see :func:`fit_em` for the public entry.

    eta_covariates restricts which covariates carry edge deviations
    (None: all).  beta_zero is a boolean (C, p) mask of cell effects
    constrained to zero.  init warm-starts from (beta, eta, U, ResidualCov).
    """
    opts = options or EmOptions()
    if opts.max_iter < 1:
        raise ValidationError("max_iter must be at least 1")
    n, d = y.shape
    p = x.shape[1]
    if v_mode not in ("diag", "diag-edge", "block"):
        raise ValidationError(f"unknown v_mode {v_mode!r}")
    m = x.T @ x
    w_eig = np.linalg.eigvalsh(m)
    if w_eig[0] <= _RANK_TOL * max(w_eig[-1], 1.0):
        label = partition.cell_label(0) if partition.n_cells else ("?", "?")
        raise NumericalError(
            f"covariate design is rank deficient (cell {label}): "
            f"min eigenvalue {w_eig[0]:.3e}"
        )
    mchol = cho_factor(m, lower=True)

    f_mask = np.zeros(p, dtype=bool)
    if eta_covariates is None:
        f_mask[:] = True
    else:
        f_mask[list(eta_covariates)] = True
    f_idx = np.flatnonzero(f_mask)
    mff_chol = (
        cho_factor(m[np.ix_(f_idx, f_idx)], lower=True) if f_idx.size else None
    )
    beta_free = None
    if beta_zero is not None:
        bz = np.asarray(beta_zero, dtype=bool)
        if bz.shape != (partition.n_cells, p):
            raise ValidationError(
                f"beta_zero mask must be ({partition.n_cells}, {p})"
            )
        if bz.any():
            beta_free = ~bz

    if init is None:
        beta, eta, u, resid_cov = _initial_state(
            y, x, mchol, partition, v_mode, f_mask, beta_free
        )
    else:
        beta, eta, u, resid_cov = init
        beta = np.array(beta, dtype=float)
        eta = np.array(eta, dtype=float)
        u = np.array(u, dtype=float)
        eta[:, ~f_mask] = 0.0
        if beta_free is not None:
            beta[~beta_free] = 0.0

    edge_cell = partition.edge_cell
    starts = partition.cell_starts
    ends = starts + partition.cell_sizes

    trace = []
    converged = False
    it = 0
    sigma = None
    for it in range(1, opts.max_iter + 1):
        prev_state = (beta, eta, u, resid_cov)
        floor_active = False
        sigma = StructuredCovariance(resid_cov, RandomEffectCov(u))
        mu = x @ beta.T  # (N, C)
        fitted_eta = x[:, f_idx] @ eta[:, f_idx].T if f_idx.size else 0.0
        resid = y - mu[:, edge_cell] - fitted_eta

        # E-step: posterior of zeta_m given current parameters
        t = _segsum(sigma.resid.solve(resid.T), starts, ends)  # (C, N)
        g = sigma.apply_cell_precision(t)
        zeta = mu + g.T @ u  # (N, C); U symmetric
        cpost = sigma.posterior_shrinkage()
        cpost_diag = np.diag(cpost)

        # M-step: beta | U, then U | beta
        post_gram = zeta.T @ x  # (C, p)
        beta = _beta_update(post_gram, mchol, m, u, beta_free)
        mu = x @ beta.T
        dev = zeta - mu
        u = cpost + dev.T @ dev / n
        u = 0.5 * (u + u.T)

        # inner alternation: V given eta, then eta given V
        w_resid = y - zeta[:, edge_cell]
        for _ in range(opts.inner_max):
            res2 = w_resid - (x[:, f_idx] @ eta[:, f_idx].T if f_idx.size else 0.0)
            new_v, clipped = _v_update(res2, cpost_diag, v_mode, partition, n)
            floor_active = floor_active or clipped
            new_eta = _eta_update(
                w_resid, x, eta, f_idx, mff_chol, new_v, partition
            )
            move = np.sqrt(
                float(np.sum((new_eta - eta) ** 2))
                + float(np.sum((_v_values(new_v) - _v_values(resid_cov)) ** 2))
            )
            scale = np.sqrt(
                float(np.sum(new_eta**2)) + float(np.sum(_v_values(new_v) ** 2))
            )
            eta, resid_cov = new_eta, new_v
            if move <= opts.inner_tol * max(scale, 1.0):
                break

        sigma = StructuredCovariance(resid_cov, RandomEffectCov(u))
        ll = _loglik_arrays(y, x, beta, eta, sigma)
        if trace and ll < trace[-1] - 1e-6:
            if floor_active:
                # Clipping makes the M-step inexact; a decrease means the
                # iterate hit the boundary of the floored region.  Keep the
                # previous (better) parameters and stop there.
                beta, eta, u, resid_cov = prev_state
                sigma = StructuredCovariance(resid_cov, RandomEffectCov(u))
                converged = True
                break
            raise NumericalError(
                f"EM log-likelihood decreased by {trace[-1] - ll:.3e} at "
                f"iteration {it}"
            )
        done = bool(trace) and abs(ll - trace[-1]) < opts.tol
        trace.append(ll)
        if done:
            converged = True
            break

    # refresh the posterior at the final parameters
    mu = x @ beta.T
    fitted_eta = x[:, f_idx] @ eta[:, f_idx].T if f_idx.size else 0.0
    resid = y - mu[:, edge_cell] - fitted_eta
    g = sigma.cell_project_solve(resid.T)
    posterior = (g.T @ u)  # (N, C) posterior means of gamma

    alpha = CoefficientSet(beta, eta, partition, tuple(covariate_names))
    return FitResult(
        alpha=alpha,
        re_cov=sigma.re,
        resid_cov=resid_cov,
        loglik_trace=np.array(trace),
        converged=converged,
        iterations=it,
        posterior_gamma=posterior,
        sigma=sigma,
        gram=m,
        n_subjects=n,
        method=f"gls-em-{v_mode}",
    )


def fit_em(
    pop: NetworkPopulation,
    designs: DesignMatrices,
    v_mode: str = "diag",
    options: EmOptions | None = None,
    eta_covariates=None,
    beta_zero=None,
    init=None,
) -> FitResult:
    """Maximum-likelihood fit of the random-effects model by EM."""
    y, x = _edge_arrays(pop, designs)
    return fit_em_arrays(
        y,
        x,
        designs.partition,
        designs.covariate_names,
        v_mode=v_mode,
        options=options,
        eta_covariates=eta_covariates,
        beta_zero=beta_zero,
        init=init,
    )
