"""Synthetic data generation and the two validation studies.

A :class:`GenerativeSpec` packages everything needed to draw populations
from the random-effects model: coefficients, U, V, and a two-group
design (controls then cases; a case count of zero gives an
intercept-only population).  Sampling uses the factorized form — draw
gamma_m from U, then residuals from V — so no dense marginal covariance
is ever formed.

estimator_study replays the data-based validation: generate R
populations from a spec, fit each requested estimator, and aggregate
per-cell effect errors, the ratio of formula standard errors to the
empirical sd, and confidence-interval coverage.  null_split_study
replays the null-uniformity check: repeatedly split a single group in
half at random, test the artificial group effect, and pool the p-values
(the pooled values share data across splits, so downstream summaries —
including the reported Kolmogorov-Smirnov statistic — are diagnostics,
not valid joint tests).

Bundled specs: fixture_spec (40 nodes, CI scale), fixture_null_spec
(null study scale), benchmark_spec (full 235-node scale).
"""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import stats

from .covstruct import RandomEffectCov, ResidualCov
from .errors import ValidationError
from .estim import CoefficientSet, EmOptions, fit_em, fit_em_arrays, ols_fit_arrays
from .infer import adjust, cell_tests
from .netdata import NetworkPopulation, build_partition

__all__ = [
    "ESTIMATORS",
    "GenerativeSpec",
    "StudyReport",
    "NullStudyReport",
    "generate",
    "spec_from_fit",
    "estimator_study",
    "null_split_study",
    "fixture_spec",
    "fixture_null_spec",
    "benchmark_spec",
]

ESTIMATORS = ("ols", "gls-diag", "gls-block")

_DEPENDENCE_CAVEAT = (
    "pooled p-values share subjects across splits and are dependent; "
    "uniformity summaries are diagnostics, not valid hypothesis tests"
)


@dataclass
class GenerativeSpec:
    """Ground truth for synthetic populations.

    alpha carries the cell effects and sum-to-zero deviations; u is the
    (C, C) random-effect covariance; resid the residual covariance.
    group_sizes = (controls, cases); cases may be 0 for a one-group
    population, in which case alpha must be intercept-only.
    """

    partition: object
    alpha: CoefficientSet
    u: np.ndarray
    resid: ResidualCov
    group_sizes: tuple
    seed: int = 0

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=float)
        part = self.partition
        RandomEffectCov(self.u)  # symmetry/PSD validation
        if self.u.shape != (part.n_cells, part.n_cells):
            raise ValidationError(
                f"U shape {self.u.shape}, expected ({part.n_cells}, {part.n_cells})"
            )
        n0, n1 = self.group_sizes
        if n0 < 1 or n1 < 0:
            raise ValidationError(f"bad group sizes {self.group_sizes}")
        want_p = 1 if n1 == 0 else 2
        if self.alpha.n_covariates != want_p:
            raise ValidationError(
                f"alpha has {self.alpha.n_covariates} covariates; group sizes "
                f"{self.group_sizes} need {want_p}"
            )

    @property
    def n_subjects(self):
        return int(sum(self.group_sizes))

    @property
    def covariate_names(self):
        return self.alpha.covariate_names

    def true_positive_cells(self):
        """Indices of cells with a nonzero non-intercept effect."""
        if self.alpha.n_covariates < 2:
            return np.array([], dtype=int)
        return np.flatnonzero(self.alpha.beta[:, 1] != 0.0)

    def design(self):
        """(N, p) covariate matrix: intercept plus group indicator."""
        n0, n1 = self.group_sizes
        if n1 == 0:
            return np.ones((n0, 1))
        return np.column_stack(
            [np.ones(n0 + n1), np.repeat([0.0, 1.0], [n0, n1])]
        )


def _residual_factors(resid: ResidualCov):
    """Per-mode sampling transform for eps ~ N(0, V); handles singular V."""
    if resid.mode != "block":
        return np.sqrt(resid.edge_variances())
    factors = []
    for blk in resid.values:
        if blk.shape[0] == 0:
            factors.append(blk)
            continue
        w, vecs = np.linalg.eigh(blk)
        factors.append(vecs * np.sqrt(np.maximum(w, 0.0)))
    return factors


def _sample_edges(spec: GenerativeSpec, rng) -> np.ndarray:
    """(N, d) edge-weight draw: mean + cell random effects + residuals.

    Draw order is fixed (gamma block first, then residual block) so a
    given generator state always maps to the same data.
    """
    part = spec.partition
    x = spec.design()
    n = x.shape[0]
    mean = x @ spec.alpha.edge_effects().T  # (N, d)
    lmat = RandomEffectCov(spec.u).factor  # (C, rank)
    zg = rng.standard_normal((n, part.n_cells))
    gamma = zg[:, : lmat.shape[1]] @ lmat.T  # (N, C)
    ze = rng.standard_normal((n, part.n_edges))
    fac = _residual_factors(spec.resid)
    if spec.resid.mode != "block":
        eps = ze * fac
    else:
        eps = np.empty_like(ze)
        for k in range(part.n_cells):
            sl = part.cell_slice(k)
            width = fac[k].shape[1] if fac[k].size else 0
            eps[:, sl] = ze[:, sl][:, :width] @ fac[k].T if width else 0.0
    return mean + gamma[:, part.edge_cell] + eps


def generate(spec: GenerativeSpec, seed=None) -> NetworkPopulation:
    """Draw a population from the spec; same (spec, seed) => same data."""
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    y = _sample_edges(spec, rng)
    n0, n1 = spec.group_sizes
    ids = [f"ctl{m + 1:04d}" for m in range(n0)] + [
        f"cas{m + 1:04d}" for m in range(n1)
    ]
    return NetworkPopulation.from_edge_matrix(
        y, spec.partition, spec.design(), spec.covariate_names, subject_ids=ids
    )


def spec_from_fit(
    pop, designs, fit, p_threshold=0.05, covariate=1, seed=0
) -> GenerativeSpec:
    """Turn a fitted model into a generative spec with thresholded effects.

    Cells whose raw cell-test p-value is below the threshold keep their
    estimated effect; the rest are set to zero and the model is re-fit by
    EM with those coefficients constrained, so (alpha, U, V) remain an
    internally consistent maximum-likelihood triple.
    """
    j = pop.covariate_index(covariate)
    x = designs.covariates
    vals = np.unique(x[:, j])
    if not np.all(np.isin(vals, (0.0, 1.0))):
        raise ValidationError(
            "spec_from_fit needs a binary 0/1 group covariate to define "
            "group sizes"
        )
    n1 = int(np.sum(x[:, j] == 1.0))
    n0 = x.shape[0] - n1

    report = cell_tests(fit, j, method=None)
    to_zero = report.p_raw >= p_threshold
    if not np.any(to_zero):
        alpha, u, resid = fit.alpha, fit.re_cov.matrix, fit.resid_cov
    else:
        mask = np.zeros_like(fit.alpha.beta, dtype=bool)
        mask[to_zero, j] = True
        refit = fit_em(
            pop, designs, v_mode=fit.resid_cov.mode, beta_zero=mask
        )
        alpha, u, resid = refit.alpha, refit.re_cov.matrix, refit.resid_cov
    return GenerativeSpec(
        partition=pop.partition,
        alpha=alpha,
        u=u,
        resid=resid,
        group_sizes=(n0, n1),
        seed=seed,
    )


# ---------------------------------------------------------------------------
# estimator study


@dataclass
class StudyReport:
    """Per-cell, per-estimator error/SE-ratio/coverage aggregates."""

    estimators: tuple
    cell_labels: tuple
    true_effect: np.ndarray
    n_reps: int
    level: float
    errors: dict = field(repr=False, default=None)
    std_errors: dict = field(repr=False, default=None)
    empirical_sd: dict = field(repr=False, default=None)
    se_ratio: dict = field(repr=False, default=None)
    coverage: dict = None
    mean_error: dict = None
    failures: dict = None
    nonconverged: dict = None
    runtime: dict = None

    def summary_frame(self) -> pd.DataFrame:
        rows = []
        for est in self.estimators:
            for c, lab in enumerate(self.cell_labels):
                ratios = self.se_ratio[est][:, c]
                rows.append(
                    {
                        "estimator": est,
                        "a": lab[0],
                        "b": lab[1],
                        "true_effect": self.true_effect[c],
                        "mean_error": self.mean_error[est][c],
                        "empirical_sd": self.empirical_sd[est][c],
                        "se_ratio_q25": float(np.quantile(ratios, 0.25)),
                        "se_ratio_median": float(np.median(ratios)),
                        "se_ratio_q75": float(np.quantile(ratios, 0.75)),
                        "coverage": self.coverage[est][c],
                    }
                )
        return pd.DataFrame(rows)

    def to_dict(self):
        return {
            "estimators": list(self.estimators),
            "n_reps": self.n_reps,
            "level": self.level,
            "failures": {k: int(v) for k, v in self.failures.items()},
            "nonconverged": {k: int(v) for k, v in self.nonconverged.items()},
            "runtime_seconds": {k: round(v, 3) for k, v in self.runtime.items()},
            "cells": self.summary_frame().to_dict(orient="records"),
        }


def _fit_estimator(est, y, x, partition, names, options):
    if est == "ols":
        return ols_fit_arrays(y, x, partition, names)
    if est.startswith("gls-"):
        mode = est[len("gls-") :]
        return fit_em_arrays(
            y, x, partition, names, v_mode=mode, options=options
        )
    raise ValidationError(f"unknown estimator {est!r}; choose from {ESTIMATORS}")


def _study_rep(spec, estimators, covariate, rep_seed, options):
    """One replication: generate, fit every estimator, test the covariate."""
    y = _sample_edges(spec, np.random.default_rng(rep_seed))
    part = spec.partition
    x = spec.design()
    out = {}
    for est in estimators:
        t0 = time.perf_counter()
        try:
            fit = _fit_estimator(est, y, x, part, spec.covariate_names, options)
            report = cell_tests(fit, covariate, method=None)
            converged = getattr(fit, "converged", True)
            out[est] = (
                report.estimate.copy(),
                report.std_error.copy(),
                bool(converged),
                time.perf_counter() - t0,
                None,
            )
        except Exception as exc:  # recorded and excluded, not fatal
            out[est] = (None, None, False, time.perf_counter() - t0, str(exc))
    return out


def estimator_study(
    spec: GenerativeSpec,
    estimators=ESTIMATORS,
    reps=100,
    seed=None,
    covariate=1,
    level=0.95,
    options: EmOptions | None = None,
    jobs=None,
) -> StudyReport:
    """Replicate generate-fit-test and aggregate calibration summaries.

    Replication r uses seed ``base + r`` (base = spec.seed unless given),
    so studies are reproducible and individually re-runnable.  jobs > 1
    distributes replications across processes.
    """
    if reps < 2:
        raise ValidationError("need at least 2 replications")
    estimators = tuple(estimators)
    j = spec.covariate_names.index(covariate) if isinstance(covariate, str) else int(covariate)
    if j >= spec.alpha.n_covariates:
        raise ValidationError(f"covariate index {j} out of range")
    base = spec.seed if seed is None else seed
    rep_seeds = [base + r for r in range(reps)]
    args = [(spec, estimators, j, s, options) for s in rep_seeds]
    if jobs is not None and jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_study_rep_star, args, chunksize=1))
    else:
        results = [_study_rep(*a) for a in args]

    part = spec.partition
    c = part.n_cells
    truth = (
        spec.alpha.beta[:, j]
        if spec.alpha.n_covariates > j
        else np.zeros(c)
    )
    z = stats.norm.ppf(0.5 + level / 2.0)
    errors, std_errors, se_ratio = {}, {}, {}
    empirical_sd, coverage, mean_error = {}, {}, {}
    failures, nonconverged, runtime = {}, {}, {}
    for est in estimators:
        est_list, se_list = [], []
        n_fail = n_nc = 0
        total = 0.0
        for res in results:
            ests, ses, conv, elapsed, err = res[est]
            total += elapsed
            if err is not None:
                n_fail += 1
                continue
            if not conv:
                n_nc += 1
            est_list.append(ests)
            se_list.append(ses)
        if len(est_list) < 2:
            raise ValidationError(
                f"estimator {est!r} produced fewer than 2 successful fits"
            )
        est_arr = np.asarray(est_list)
        se_arr = np.asarray(se_list)
        err_arr = est_arr - truth[None, :]
        sd = np.std(est_arr, axis=0, ddof=1)
        errors[est] = err_arr
        std_errors[est] = se_arr
        empirical_sd[est] = sd
        se_ratio[est] = se_arr / np.maximum(sd, 1e-300)[None, :]
        coverage[est] = np.mean(np.abs(err_arr) <= z * se_arr, axis=0)
        mean_error[est] = err_arr.mean(axis=0)
        failures[est] = n_fail
        nonconverged[est] = n_nc
        runtime[est] = total
    labels = tuple(part.cell_label(k) for k in range(c))
    return StudyReport(
        estimators=estimators,
        cell_labels=labels,
        true_effect=truth,
        n_reps=reps,
        level=level,
        errors=errors,
        std_errors=std_errors,
        empirical_sd=empirical_sd,
        se_ratio=se_ratio,
        coverage=coverage,
        mean_error=mean_error,
        failures=failures,
        nonconverged=nonconverged,
        runtime=runtime,
    )


def _study_rep_star(args):
    return _study_rep(*args)


# ---------------------------------------------------------------------------
# null-split study


@dataclass
class NullStudyReport:
    """Pooled p-values from random half-splits of one group."""

    estimators: tuple
    n_reps: int
    n_cells: int
    p_values: dict = field(repr=False, default=None)
    ks_stat: dict = None
    ks_pvalue: dict = None
    frac_below_05: dict = None
    bonferroni_hits: dict = None
    caveat: str = _DEPENDENCE_CAVEAT

    def pooled(self, estimator):
        return self.p_values[estimator].ravel()

    def histogram(self, estimator, bins=20):
        return np.histogram(self.pooled(estimator), bins=bins, range=(0.0, 1.0))

    def to_dict(self):
        return {
            "estimators": list(self.estimators),
            "n_reps": self.n_reps,
            "n_cells": self.n_cells,
            "pooled_count": self.n_reps * self.n_cells,
            "ks_stat": {k: float(v) for k, v in self.ks_stat.items()},
            "ks_pvalue": {k: float(v) for k, v in self.ks_pvalue.items()},
            "frac_below_05": {k: float(v) for k, v in self.frac_below_05.items()},
            "bonferroni_hits": {k: int(v) for k, v in self.bonferroni_hits.items()},
            "caveat": self.caveat,
        }


def null_split_study(
    pop,
    reps=100,
    estimators=("gls-diag",),
    seed=None,
    splits=None,
    level=0.05,
    options: EmOptions | None = None,
) -> NullStudyReport:
    """Randomly halve one group, test the artificial contrast, pool p's.

    ``splits`` overrides the random halving with explicit 0/1 indicator
    arrays (one per repetition).  Subject covariates of ``pop`` beyond
    the implicit intercept are ignored; the test covariate is the split.
    """
    estimators = tuple(estimators)
    y = pop.edge_matrix()
    part = pop.partition
    n = y.shape[0]
    if n < 4:
        raise ValidationError("need at least 4 subjects to split")
    if splits is not None:
        splits = [np.asarray(s, dtype=float).ravel() for s in splits]
        for s in splits:
            if s.shape != (n,) or not np.all(np.isin(s, (0.0, 1.0))):
                raise ValidationError("each split must be a 0/1 vector of length N")
            if not 0 < int(s.sum()) < n:
                raise ValidationError("each split must keep both halves nonempty")
        reps = len(splits)
    else:
        rng = np.random.default_rng(seed)
        half = n // 2
        splits = []
        for _ in range(reps):
            ind = np.zeros(n)
            ind[rng.permutation(n)[half:]] = 1.0
            splits.append(ind)

    names = ("intercept", "split")
    p_values = {est: np.empty((reps, part.n_cells)) for est in estimators}
    for r, ind in enumerate(splits):
        x = np.column_stack([np.ones(n), ind])
        for est in estimators:
            fit = _fit_estimator(est, y, x, part, names, options)
            report = cell_tests(fit, 1, method=None)
            p_values[est][r] = report.p_raw

    ks_stat, ks_pvalue, frac, bonf = {}, {}, {}, {}
    for est in estimators:
        pooled = p_values[est].ravel()
        res = stats.kstest(pooled, "uniform")
        ks_stat[est] = float(res.statistic)
        ks_pvalue[est] = float(res.pvalue)
        frac[est] = float(np.mean(pooled < 0.05))
        hits = 0
        for r in range(reps):
            _, rej = adjust(p_values[est][r], method="bonferroni", level=level)
            hits += int(rej.sum())
        bonf[est] = hits
    return NullStudyReport(
        estimators=estimators,
        n_reps=reps,
        n_cells=part.n_cells,
        p_values=p_values,
        ks_stat=ks_stat,
        ks_pvalue=ks_pvalue,
        frac_below_05=frac,
        bonferroni_hits=bonf,
    )


# ---------------------------------------------------------------------------
# bundled specs


def _centered_pattern(n, scale):
    """Deterministic sum-to-zero per-cell deviation pattern."""
    if n < 2:
        return np.zeros(n)
    pat = np.linspace(-1.0, 1.0, n) * scale
    return pat - pat.mean()


def _equicorr_cov(diag_vars, rho):
    """Covariance with given diagonal and constant correlation rho."""
    s = np.sqrt(np.asarray(diag_vars, dtype=float))
    return (1.0 - rho) * np.diag(s**2) + rho * np.outer(s, s)


def _spec_from_tables(
    sizes, beta0, beta1, eta_scales, u_diag, rho, v_value, group_sizes, seed
):
    labels = np.repeat(np.arange(len(sizes)), sizes)
    part = build_partition(range(labels.size), [int(l) for l in labels])
    c = part.n_cells
    beta0 = np.asarray(beta0, dtype=float)
    p = 1 if group_sizes[1] == 0 else 2
    beta = np.zeros((c, p))
    beta[:, 0] = beta0
    names = ("intercept",)
    if p == 2:
        beta[:, 1] = np.asarray(beta1, dtype=float)
        names = ("intercept", "group")
    eta = np.zeros((part.n_edges, p))
    for k in range(c):
        sl = part.cell_slice(k)
        n_k = sl.stop - sl.start
        eta[sl, 0] = _centered_pattern(n_k, eta_scales[0])
        if p == 2:
            eta[sl, 1] = _centered_pattern(n_k, eta_scales[1])[::-1]
    alpha = CoefficientSet(beta, eta, part, names)
    u = _equicorr_cov(u_diag, rho)
    resid = ResidualCov("diag", np.full(c, v_value), part)
    return GenerativeSpec(part, alpha, u, resid, group_sizes, seed=seed)


def fixture_spec() -> GenerativeSpec:
    """CI-scale spec: 4 communities, 40 nodes, 10 cells, 50+50 subjects.

    Three true-positive cells carry nonzero group effects.  The four
    within-community cells have random-effect variance at or above half
    the residual level (strong within-cell correlation); the
    between-community cells are nearly independent.
    """
    beta0 = [0.45, 0.10, 0.08, 0.12, 0.40, 0.06, 0.14, 0.38, 0.09, 0.50]
    beta1 = [0.20, 0.0, 0.0, 0.0, 0.0, -0.15, 0.0, 0.0, 0.0, 0.25]
    u_diag = [0.030, 0.004, 0.004, 0.004, 0.025, 0.004, 0.004, 0.022, 0.004, 0.028]
    return _spec_from_tables(
        sizes=(12, 10, 10, 8),
        beta0=beta0,
        beta1=beta1,
        eta_scales=(0.05, 0.02),
        u_diag=u_diag,
        rho=0.25,
        v_value=0.04,
        group_sizes=(50, 50),
        seed=1201,
    )


def fixture_null_spec() -> GenerativeSpec:
    """One-group spec for the null-split study: 12 nodes, 60 subjects."""
    return _spec_from_tables(
        sizes=(5, 4, 3),
        beta0=[0.35, 0.12, 0.08, 0.30, 0.10, 0.28],
        beta1=None,
        eta_scales=(0.06, 0.0),
        u_diag=[0.050, 0.030, 0.060, 0.020, 0.050, 0.040],
        rho=0.30,
        v_value=0.05,
        group_sizes=(60, 0),
        seed=407,
    )


def benchmark_spec() -> GenerativeSpec:
    """Full-scale spec: 235 nodes, 13 communities, 27,495 edges, 70+54."""
    sizes = (29, 5, 14, 13, 58, 5, 31, 25, 18, 13, 9, 11, 4)
    labels = np.repeat(np.arange(len(sizes)), sizes)
    part = build_partition(range(labels.size), [int(l) for l in labels])
    c = part.n_cells
    rng = np.random.default_rng(905881)
    within = np.array([a == b for a, b in part.cells])
    beta0 = np.where(
        within,
        rng.uniform(0.30, 0.50, size=c),
        rng.uniform(0.04, 0.16, size=c),
    )
    beta1 = np.zeros(c)
    positives = rng.choice(c, size=13, replace=False)
    beta1[positives] = rng.uniform(0.10, 0.25, size=13) * rng.choice(
        [-1.0, 1.0], size=13
    )
    beta = np.column_stack([beta0, beta1])
    eta = np.zeros((part.n_edges, 2))
    for k in range(c):
        sl = part.cell_slice(k)
        n_k = sl.stop - sl.start
        eta[sl, 0] = _centered_pattern(n_k, 0.05)
        eta[sl, 1] = _centered_pattern(n_k, 0.02)[::-1]
    alpha = CoefficientSet(beta, eta, part, ("intercept", "group"))
    u = _equicorr_cov(rng.uniform(0.002, 0.030, size=c), 0.20)
    resid = ResidualCov("diag", np.full(c, 0.04), part)
    return GenerativeSpec(part, alpha, u, resid, (70, 54), seed=630115)
