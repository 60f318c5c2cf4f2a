"""Hypothesis tests, standard errors, confidence intervals, corrections.

Cell-level tests target H0: beta_j^c = 0 and edge-level tests target
H0: beta_j^c + eta_j^e = 0 for a chosen covariate j.  Standard errors
come from the GLS coefficient covariance (sum_m X_m' Sigma^-1 X_m)^-1
evaluated at the fit's marginal covariance; because the fixed-effects
design factors per cell as T_c kron x_m', that covariance factors as
(T_c^-1 Sigma_cc T_c^-T) kron M^-1 with M = sum_m x_m x_m', and every
per-target variance reduces to a contrast in the (beta, eta) coordinates
of one cell.  Edge-level contrasts are the 0/1/-1 vectors mapping
coefficients to edge effects; the last edge of each cell carries the
negative-sum contrast implied by the sum-to-zero constraint.

Raw p-values use a standard-normal reference by default (a t reference
with N - p degrees of freedom is available via ``reference="t"``), and
the usual family-wise / false-discovery corrections are provided:
Bonferroni, Holm, Hochberg, Benjamini-Hochberg, Benjamini-Yekutieli.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import stats

from .errors import NumericalError, ValidationError

__all__ = [
    "CORRECTIONS",
    "InferenceReport",
    "adjust",
    "cell_tests",
    "edge_tests",
    "confidence_intervals",
    "rejection_sweep",
]

CORRECTIONS = ("bonferroni", "holm", "hochberg", "bh", "by")


@dataclass
class InferenceReport:
    """Per-target test results for one covariate.

    family is "cell" or "edge"; labels holds the original community-id
    pair per cell, or (node i, node j) per edge.  p_adjusted/rejected are
    None when no correction was applied.
    """

    family: str
    covariate: str
    labels: tuple
    estimate: np.ndarray
    std_error: np.ndarray
    t_stat: np.ndarray
    p_raw: np.ndarray
    p_adjusted: np.ndarray | None
    rejected: np.ndarray | None
    method: str | None
    level: float | None
    reference: str
    partition: object = field(repr=False, default=None)
    edge_cell: np.ndarray | None = field(repr=False, default=None)

    @property
    def n_targets(self):
        return self.estimate.shape[0]

    def to_frame(self) -> pd.DataFrame:
        """Tabular form, one row per target."""
        if self.family == "cell":
            cols = {
                "a": [lab[0] for lab in self.labels],
                "b": [lab[1] for lab in self.labels],
            }
        else:
            part = self.partition
            cols = {
                "i": [lab[0] for lab in self.labels],
                "j": [lab[1] for lab in self.labels],
                "cell_a": [part.cell_label(c)[0] for c in self.edge_cell],
                "cell_b": [part.cell_label(c)[1] for c in self.edge_cell],
            }
        cols.update(
            estimate=self.estimate,
            se=self.std_error,
            t=self.t_stat,
            p=self.p_raw,
        )
        if self.p_adjusted is not None:
            cols["p_adj"] = self.p_adjusted
            cols["reject"] = self.rejected.astype(int)
        return pd.DataFrame(cols)

    def cell_matrix(self, which="estimate") -> pd.DataFrame:
        """Symmetric community-by-community matrix of a per-cell quantity.

        Only defined for cell-family reports; cells absent from the
        partition (single-node within-cells) are NaN.
        """
        if self.family != "cell":
            raise ValidationError("cell_matrix requires a cell-family report")
        values = {
            "estimate": self.estimate,
            "se": self.std_error,
            "t": self.t_stat,
            "p": self.p_raw,
            "p_adj": self.p_adjusted,
            "reject": None if self.rejected is None else self.rejected.astype(float),
        }.get(which)
        if values is None:
            raise ValidationError(f"nothing to tabulate for {which!r}")
        part = self.partition
        ids = list(part.community_ids)
        k = len(ids)
        mat = np.full((k, k), np.nan)
        for c, (a, b) in enumerate(part.cells):
            mat[a, b] = values[c]
            mat[b, a] = values[c]
        return pd.DataFrame(mat, index=ids, columns=ids)


# ---------------------------------------------------------------------------
# corrections


def adjust(p_raw, method="bh", level=0.05):
    """Adjusted p-values and the rejection set for a correction method.

    Methods: "bonferroni", "holm" (step-down), "hochberg" (step-up),
    "bh" (Benjamini-Hochberg), "by" (Benjamini-Yekutieli).  For each,
    rejection at ``level`` is equivalent to adjusted p <= level, and the
    BH rejection set coincides with the classic step-up rule: the largest
    k with p_(k) <= k*level/m, and all smaller ranks.

    Returns (p_adjusted, rejected) as arrays aligned with the input.
    """
    p = np.asarray(p_raw, dtype=float).ravel()
    if p.size == 0:
        raise ValidationError("no p-values to adjust")
    if np.any(~np.isfinite(p)) or np.any((p < 0.0) | (p > 1.0)):
        raise ValidationError("p-values must lie in [0, 1]")
    if not 0.0 < level < 1.0:
        raise ValidationError(f"level must be in (0, 1), got {level}")
    meth = str(method).lower()
    if meth not in CORRECTIONS:
        raise ValidationError(
            f"unknown correction {method!r}; choose from {CORRECTIONS}"
        )
    m = p.size
    if meth == "bonferroni":
        adj = np.minimum(m * p, 1.0)
        return adj, adj <= level

    order = np.argsort(p, kind="stable")
    ps = p[order]
    if meth == "holm":
        raw = (m - np.arange(m)) * ps
        adj_sorted = np.minimum(np.maximum.accumulate(raw), 1.0)
    else:
        if meth == "hochberg":
            raw = (m - np.arange(m)) * ps
        else:
            factor = m / np.arange(1.0, m + 1.0)
            if meth == "by":
                factor = factor * np.sum(1.0 / np.arange(1.0, m + 1.0))
            raw = factor * ps
        adj_sorted = np.minimum(np.minimum.accumulate(raw[::-1])[::-1], 1.0)
    adj = np.empty(m)
    adj[order] = adj_sorted
    return adj, adj <= level


def rejection_sweep(p_raw, methods=CORRECTIONS, levels=(0.001, 0.005, 0.01, 0.02, 0.05, 0.1)):
    """Rejection counts per (method, level); the Fig.-13-style table."""
    rows = []
    for meth in methods:
        for lev in levels:
            _, rej = adjust(p_raw, method=meth, level=lev)
            rows.append({"method": meth, "level": lev, "rejected": int(rej.sum())})
    return pd.DataFrame(rows)


# ---------------------------------------------------------------------------
# standard errors


def _gram_inverse_diag(fit, j):
    m = np.asarray(fit.gram, dtype=float)
    try:
        minv = np.linalg.inv(m)
    except np.linalg.LinAlgError:
        raise NumericalError("covariate Gram matrix is singular") from None
    return float(minv[j, j])


def _cell_contrast_moments(sigma):
    """Per-cell second moments of Sigma_cc = V_c + U_cc * ones.

    Returns (diag_a, row_a, tot_a): the diagonal and row sums of each
    cell block (stacked over edges) and the total sum per cell.
    """
    part = sigma.partition
    ucc = np.diag(sigma.re.matrix)
    sizes = part.cell_sizes.astype(float)
    diag_a = sigma.resid.edge_variances() + ucc[part.edge_cell]
    row_a = sigma.resid.ones_dot() + (sizes * ucc)[part.edge_cell]
    tot_a = sigma.resid.cell_quad_ones() + sizes**2 * ucc
    return diag_a, row_a, tot_a


def _cell_variances(sigma):
    """Variance factor of beta-hat per cell: [T^-1 Sigma_cc T^-T]_{00}.

    The beta row of T_c^-1 is the within-cell average, so the factor is
    (1' Sigma_cc 1) / n_c^2.
    """
    part = sigma.partition
    _, _, tot_a = _cell_contrast_moments(sigma)
    sizes = np.maximum(part.cell_sizes.astype(float), 1.0)
    return tot_a / sizes**2


def _edge_variances(sigma):
    """Variance factor of each edge effect via its coefficient contrast.

    For edge k < n_c - 1 the contrast is e_beta + e_eta_k; the last edge
    uses e_beta - sum_k e_eta_k.  Variances are contrast quadratics in
    B_c = T_c^-1 Sigma_cc T_c^-T, assembled from the moments of Sigma_cc
    without forming B_c.
    """
    part = sigma.partition
    diag_a, row_a, tot_a = _cell_contrast_moments(sigma)
    sizes = part.cell_sizes.astype(float)
    out = np.empty(part.n_edges)
    for c in range(part.n_cells):
        sl = part.cell_slice(c)
        n_c = int(part.cell_sizes[c])
        if n_c == 0:
            continue
        g = tot_a[c] / n_c**2  # B[0, 0]
        if n_c == 1:
            out[sl] = g
            continue
        rm = row_a[sl] / n_c
        view = out[sl]
        # free edges: B00 + 2*B[0, 1+k] + B[1+k, 1+k]
        b0k = rm[:-1] - g
        bkk = diag_a[sl][:-1] - 2.0 * rm[:-1] + g
        view[:-1] = g + 2.0 * b0k + bkk
        # last edge: B00 - 2*sum_k B[0, 1+k] + sum_{k,l} B[1+k, 1+l]
        r_free = float(np.sum(rm[:-1]))
        sum_b0 = r_free - (n_c - 1) * g
        s_sub = tot_a[c] - 2.0 * row_a[sl][-1] + diag_a[sl][-1]
        sum_b = s_sub - 2.0 * (n_c - 1) * r_free + (n_c - 1) ** 2 * g
        view[-1] = g - 2.0 * sum_b0 + sum_b
    return out


def _p_values(t, reference, dof):
    t = np.abs(np.asarray(t, dtype=float))
    if reference == "normal":
        return 2.0 * stats.norm.sf(t)
    if reference == "t":
        if dof < 1:
            raise ValidationError(
                f"t reference needs at least 1 residual degree of freedom, "
                f"have {dof}"
            )
        return 2.0 * stats.t.sf(t, dof)
    raise ValidationError(f"unknown reference {reference!r}")


def _resolve_covariate(fit, covariate):
    names = fit.covariate_names
    if isinstance(covariate, (int, np.integer)):
        j = int(covariate)
        if not 0 <= j < len(names):
            raise ValidationError(f"covariate index {j} out of range")
        return j
    try:
        return names.index(covariate)
    except ValueError:
        raise ValidationError(
            f"unknown covariate {covariate!r}; have {names}"
        ) from None


def _build_report(family, fit, j, estimate, var_factor, method, level, reference):
    minv_jj = _gram_inverse_diag(fit, j)
    se = np.sqrt(np.maximum(var_factor * minv_jj, 0.0))
    if np.any(se == 0.0):
        raise NumericalError(
            "zero standard error (degenerate design or covariance); "
            "tests are undefined"
        )
    t = estimate / se
    dof = fit.n_subjects - len(fit.covariate_names)
    p = _p_values(t, reference, dof)
    p_adj = rej = None
    if method is not None:
        p_adj, rej = adjust(p, method=method, level=level)
    part = fit.partition
    if family == "cell":
        labels = tuple(part.cell_label(c) for c in range(part.n_cells))
        edge_cell = None
    else:
        ids = part.node_ids
        labels = tuple(
            (ids[int(i)], ids[int(jn)]) for i, jn in part.edge_nodes
        )
        edge_cell = part.edge_cell
    return InferenceReport(
        family=family,
        covariate=fit.covariate_names[j],
        labels=labels,
        estimate=np.asarray(estimate, dtype=float),
        std_error=se,
        t_stat=t,
        p_raw=p,
        p_adjusted=p_adj,
        rejected=rej,
        method=method,
        level=level if method is not None else None,
        reference=reference,
        partition=part,
        edge_cell=edge_cell,
    )


def cell_tests(fit, covariate, method="bh", level=0.05, reference="normal"):
    """Two-sided tests of the cell-level effect of one covariate.

    ``fit`` is any fit result carrying alpha, sigma, gram, n_subjects.
    Returns an :class:`InferenceReport` with one row per cell.
    """
    j = _resolve_covariate(fit, covariate)
    est = fit.alpha.beta[:, j]
    var = _cell_variances(fit.sigma)
    return _build_report("cell", fit, j, est, var, method, level, reference)


def edge_tests(fit, covariate, method="bh", level=0.05, reference="normal"):
    """Two-sided tests of the per-edge effect beta + eta of one covariate."""
    j = _resolve_covariate(fit, covariate)
    est = fit.alpha.edge_effects()[:, j]
    var = _edge_variances(fit.sigma)
    return _build_report("edge", fit, j, est, var, method, level, reference)


def confidence_intervals(fit, covariate, level=0.95, family="cell"):
    """Per-target two-sided confidence intervals, shape (m, 2).

    interval = estimate +/- z_{(1+level)/2} * s.e.; at level 0.95 the
    multiplier is the familiar 1.96.
    """
    if not 0.0 < level < 1.0:
        raise ValidationError(f"confidence level must be in (0, 1), got {level}")
    j = _resolve_covariate(fit, covariate)
    if family == "cell":
        est = fit.alpha.beta[:, j]
        var = _cell_variances(fit.sigma)
    elif family == "edge":
        est = fit.alpha.edge_effects()[:, j]
        var = _edge_variances(fit.sigma)
    else:
        raise ValidationError(f"unknown target family {family!r}")
    se = np.sqrt(np.maximum(var * _gram_inverse_diag(fit, j), 0.0))
    z = stats.norm.ppf(0.5 + level / 2.0)
    return np.column_stack([est - z * se, est + z * se])
