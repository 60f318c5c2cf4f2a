"""Generative specs, sampling moments, and the two validation studies."""

import numpy as np
import pytest

import oracles
from netlmm import simlab
from netlmm.covstruct import ResidualCov, StructuredCovariance, RandomEffectCov
from netlmm.errors import NumericalError, ValidationError
from netlmm.estim import CoefficientSet, EmOptions, fit_em
from netlmm.netdata import build_designs, build_partition
from netlmm.simlab import (
    GenerativeSpec,
    benchmark_spec,
    estimator_study,
    fixture_null_spec,
    fixture_spec,
    generate,
    null_split_study,
    spec_from_fit,
)


def small_spec(sizes=(3, 3), group_sizes=(8, 8), v=0.05, seed=5, u_diag=None):
    """Deterministic two-group spec on a handful of nodes."""
    labels = np.repeat(np.arange(len(sizes)), sizes).tolist()
    part = build_partition(range(len(labels)), labels)
    c = part.n_cells
    p = 1 if group_sizes[1] == 0 else 2
    beta = np.zeros((c, p))
    beta[:, 0] = np.linspace(0.2, 0.6, c)
    if p == 2:
        beta[:, 1] = np.where(np.arange(c) % 2 == 0, 0.15, 0.0)
    eta = np.zeros((part.n_edges, p))
    names = ("intercept", "group")[:p]
    alpha = CoefficientSet(beta, eta, part, names)
    if u_diag is None:
        u_diag = np.linspace(0.01, 0.03, c)
    s = np.sqrt(np.asarray(u_diag, dtype=float))
    u = 0.75 * np.diag(s**2) + 0.25 * np.outer(s, s)
    resid = ResidualCov("diag", np.full(c, v), part)
    return GenerativeSpec(part, alpha, u, resid, group_sizes, seed=seed)


class TestGenerativeSpec:
    def test_shape_validation(self):
        spec = small_spec()
        with pytest.raises(ValidationError):
            GenerativeSpec(
                spec.partition, spec.alpha, np.eye(2), spec.resid, (8, 8)
            )
        with pytest.raises(NumericalError):
            bad_u = -np.eye(spec.partition.n_cells)
            GenerativeSpec(spec.partition, spec.alpha, bad_u, spec.resid, (8, 8))

    def test_group_size_validation(self):
        spec = small_spec()
        with pytest.raises(ValidationError):
            GenerativeSpec(spec.partition, spec.alpha, spec.u, spec.resid, (0, 5))
        with pytest.raises(ValidationError):
            GenerativeSpec(spec.partition, spec.alpha, spec.u, spec.resid, (5, -1))

    def test_covariate_count_must_match_groups(self):
        two = small_spec()  # alpha has intercept + group
        with pytest.raises(ValidationError):
            GenerativeSpec(two.partition, two.alpha, two.u, two.resid, (8, 0))
        one = small_spec(group_sizes=(8, 0))
        with pytest.raises(ValidationError):
            GenerativeSpec(one.partition, one.alpha, one.u, one.resid, (4, 4))

    def test_design_columns(self):
        spec = small_spec(group_sizes=(3, 2))
        x = spec.design()
        assert x.shape == (5, 2)
        assert np.array_equal(x[:, 0], np.ones(5))
        assert np.array_equal(x[:, 1], [0, 0, 0, 1, 1])
        solo = small_spec(group_sizes=(4, 0))
        assert solo.design().shape == (4, 1)

    def test_true_positive_cells(self):
        spec = small_spec()
        want = np.flatnonzero(np.arange(spec.partition.n_cells) % 2 == 0)
        assert np.array_equal(spec.true_positive_cells(), want)
        assert small_spec(group_sizes=(8, 0)).true_positive_cells().size == 0


class TestGenerate:
    def test_deterministic(self):
        spec = small_spec(seed=9)
        a = generate(spec).edge_matrix()
        b = generate(spec).edge_matrix()
        c = generate(spec, seed=10).edge_matrix()
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_subject_ids_follow_groups(self):
        spec = small_spec(group_sizes=(3, 2))
        pop = generate(spec)
        ids = [s.subject_id for s in pop.subjects]
        assert ids == ["ctl0001", "ctl0002", "ctl0003", "cas0001", "cas0002"]
        assert pop.covariate_names == ("intercept", "group")

    def test_sample_moments_match_marginal_covariance(self):
        """Mean and covariance of a large draw approach alpha'x and
        V + Z U Z' entrywise."""
        spec = small_spec(sizes=(3, 2), group_sizes=(4000, 0), seed=3)
        pop = generate(spec)
        y = pop.edge_matrix()
        mean_want = spec.alpha.edge_effects()[:, 0]
        assert np.max(np.abs(y.mean(axis=0) - mean_want)) < 0.02
        sigma = StructuredCovariance(spec.resid, RandomEffectCov(spec.u))
        dense = oracles.dense_sigma(sigma)
        emp = np.cov(y, rowvar=False)
        assert np.max(np.abs(emp - dense)) < 0.01

    def test_low_rank_u_and_block_resid(self):
        spec = small_spec(sizes=(3, 2))
        part = spec.partition
        u = np.zeros((part.n_cells, part.n_cells))
        u[0, 0] = 0.04  # rank one
        blocks = []
        for k in range(part.n_cells):
            n_k = int(part.cell_sizes[k])
            blk = 0.05 * (np.eye(n_k) + 0.4 * np.ones((n_k, n_k)))
            blocks.append(blk)
        resid = ResidualCov("block", blocks, part)
        spec2 = GenerativeSpec(part, spec.alpha, u, resid, spec.group_sizes, seed=2)
        y = generate(spec2).edge_matrix()
        assert np.all(np.isfinite(y))
        assert y.shape == (16, part.n_edges)


class TestBundledSpecs:
    def test_fixture_scale(self):
        spec = fixture_spec()
        part = spec.partition
        assert part.n_nodes == 40
        assert part.n_communities == 4
        assert part.n_cells == 10
        assert spec.n_subjects == 100 and spec.group_sizes == (50, 50)
        assert list(spec.true_positive_cells()) == [0, 5, 9]

    def test_fixture_correlated_cells_are_within_community(self):
        """Cells with U variance at least half the residual variance are
        exactly the four within-community cells."""
        spec = fixture_spec()
        v = spec.resid.values
        strong = np.flatnonzero(np.diag(spec.u) >= 0.5 * v)
        within = [k for k, (a, b) in enumerate(spec.partition.cells) if a == b]
        assert list(strong) == within == [0, 4, 7, 9]

    def test_null_fixture_scale(self):
        spec = fixture_null_spec()
        assert spec.partition.n_nodes == 12
        assert spec.partition.n_cells == 6
        assert spec.group_sizes == (60, 0)
        assert spec.covariate_names == ("intercept",)

    def test_benchmark_scale(self):
        spec = benchmark_spec()
        part = spec.partition
        assert part.n_nodes == 235
        assert part.n_communities == 13
        assert part.n_cells == 91
        assert part.n_edges == 27495
        assert spec.n_subjects == 124
        assert spec.true_positive_cells().size == 13

    def test_fixture_deviations_sum_to_zero(self):
        for spec in (fixture_spec(), fixture_null_spec(), benchmark_spec()):
            part = spec.partition
            for k in range(part.n_cells):
                sl = part.cell_slice(k)
                sums = spec.alpha.eta[sl].sum(axis=0)
                assert np.allclose(sums, 0.0, atol=1e-10)


class TestEstimatorStudy:
    def test_report_shapes_and_consistency(self):
        spec = small_spec(seed=21)
        rep = estimator_study(spec, estimators=("ols", "gls-diag"), reps=6)
        c = spec.partition.n_cells
        assert rep.n_reps == 6
        for est in ("ols", "gls-diag"):
            assert rep.errors[est].shape == (6, c)
            assert rep.std_errors[est].shape == (6, c)
            assert np.allclose(
                rep.mean_error[est], rep.errors[est].mean(axis=0), atol=1e-12
            )
            assert np.allclose(
                rep.empirical_sd[est],
                np.std(rep.errors[est] + spec.alpha.beta[:, 1], axis=0, ddof=1),
                atol=1e-12,
            )
            assert np.allclose(
                rep.se_ratio[est],
                rep.std_errors[est] / rep.empirical_sd[est][None, :],
                atol=1e-12,
            )
            assert np.all((rep.coverage[est] >= 0) & (rep.coverage[est] <= 1))
            assert rep.failures[est] == 0
            assert rep.runtime[est] > 0
        frame = rep.summary_frame()
        assert len(frame) == 2 * c
        assert set(frame["estimator"]) == {"ols", "gls-diag"}
        d = rep.to_dict()
        assert d["n_reps"] == 6 and len(d["cells"]) == 2 * c

    def test_parallel_matches_serial(self):
        spec = small_spec(seed=23)
        serial = estimator_study(spec, estimators=("ols",), reps=5)
        para = estimator_study(spec, estimators=("ols",), reps=5, jobs=2)
        assert np.array_equal(serial.errors["ols"], para.errors["ols"])
        assert np.array_equal(serial.std_errors["ols"], para.std_errors["ols"])

    def test_seed_override_reproducible(self):
        spec = small_spec(seed=25)
        a = estimator_study(spec, estimators=("ols",), reps=4, seed=77)
        b = estimator_study(spec, estimators=("ols",), reps=4, seed=77)
        c = estimator_study(spec, estimators=("ols",), reps=4, seed=78)
        assert np.array_equal(a.errors["ols"], b.errors["ols"])
        assert not np.array_equal(a.errors["ols"], c.errors["ols"])

    def test_covariate_by_name(self):
        spec = small_spec(seed=27)
        a = estimator_study(spec, estimators=("ols",), reps=4, covariate="group")
        b = estimator_study(spec, estimators=("ols",), reps=4, covariate=1)
        assert np.array_equal(a.errors["ols"], b.errors["ols"])

    def test_failures_recorded_not_fatal(self, monkeypatch):
        calls = {"n": 0}
        real = simlab._fit_estimator

        def flaky(est, y, x, partition, names, options):
            calls["n"] += 1
            if calls["n"] % 3 == 0:
                raise NumericalError("synthetic failure")
            return real(est, y, x, partition, names, options)

        monkeypatch.setattr(simlab, "_fit_estimator", flaky)
        spec = small_spec(seed=29)
        rep = estimator_study(spec, estimators=("ols",), reps=9)
        assert rep.failures["ols"] == 3
        assert rep.errors["ols"].shape[0] == 6

    def test_nonconverged_counted(self):
        spec = small_spec(seed=31)
        rep = estimator_study(
            spec,
            estimators=("gls-diag",),
            reps=3,
            options=EmOptions(max_iter=1),
        )
        assert rep.nonconverged["gls-diag"] == 3
        assert rep.failures["gls-diag"] == 0

    def test_validation(self):
        spec = small_spec()
        with pytest.raises(ValidationError):
            estimator_study(spec, reps=1)
        with pytest.raises(ValidationError):
            estimator_study(spec, covariate=5, reps=3)
        with pytest.raises(ValidationError):
            estimator_study(spec, estimators=("ridge",), reps=3)


class TestNullSplitStudy:
    def test_duplicated_halves_give_p_one(self):
        """If cases are an exact copy of controls, the split contrast is
        identically zero and every p-value is 1."""
        spec = small_spec(group_sizes=(6, 0), seed=33)
        pop = generate(spec)
        y = pop.edge_matrix()
        twin = np.vstack([y, y])
        from netlmm.netdata import NetworkPopulation

        pop2 = NetworkPopulation.from_edge_matrix(
            twin, pop.partition, np.ones((12, 1)), ("intercept",)
        )
        split = np.array([0.0] * 6 + [1.0] * 6)
        rep = null_split_study(pop2, estimators=("ols",), splits=[split])
        assert rep.n_reps == 1
        assert np.allclose(rep.p_values["ols"], 1.0, atol=1e-12)

    def test_split_validation(self):
        spec = small_spec(group_sizes=(6, 0), seed=35)
        pop = generate(spec)
        with pytest.raises(ValidationError):
            null_split_study(pop, splits=[np.ones(6)])  # one empty half
        with pytest.raises(ValidationError):
            null_split_study(pop, splits=[np.array([0, 1, 2, 0, 1, 0])])
        with pytest.raises(ValidationError):
            null_split_study(pop, splits=[np.array([0.0, 1.0])])

    def test_too_few_subjects(self):
        spec = small_spec(group_sizes=(3, 0), seed=37)
        pop = generate(spec)
        with pytest.raises(ValidationError):
            null_split_study(pop, reps=2)

    def test_seeded_and_shaped(self):
        spec = small_spec(group_sizes=(10, 0), seed=39)
        pop = generate(spec)
        a = null_split_study(pop, reps=3, estimators=("ols",), seed=4)
        b = null_split_study(pop, reps=3, estimators=("ols",), seed=4)
        assert np.array_equal(a.p_values["ols"], b.p_values["ols"])
        c = pop.partition.n_cells
        assert a.p_values["ols"].shape == (3, c)
        assert a.pooled("ols").shape == (3 * c,)
        counts, _ = a.histogram("ols", bins=10)
        assert counts.sum() == 3 * c
        d = a.to_dict()
        assert d["pooled_count"] == 3 * c
        assert "dependent" in d["caveat"]
        assert set(d["ks_stat"]) == {"ols"}


class TestSpecFromFit:
    def fitted(self, seed=41):
        spec = small_spec(seed=seed, group_sizes=(12, 12))
        pop = generate(spec)
        designs = build_designs(pop)
        fit = fit_em(pop, designs)
        return spec, pop, designs, fit

    def test_threshold_one_keeps_everything(self):
        _, pop, designs, fit = self.fitted()
        spec2 = spec_from_fit(pop, designs, fit, p_threshold=1.1)
        assert np.array_equal(spec2.alpha.beta, fit.alpha.beta)
        assert np.array_equal(spec2.u, fit.re_cov.matrix)
        assert np.array_equal(spec2.resid.values, fit.resid_cov.values)
        assert spec2.group_sizes == (12, 12)

    def test_tiny_threshold_zeroes_all_effects(self):
        _, pop, designs, fit = self.fitted()
        spec2 = spec_from_fit(pop, designs, fit, p_threshold=1e-12)
        assert spec2.true_positive_cells().size == 0
        assert np.all(spec2.alpha.beta[:, 1] == 0.0)
        # intercepts survive the constrained refit
        assert np.all(spec2.alpha.beta[:, 0] != 0.0)

    def test_requires_binary_covariate(self):
        _, pop, designs, fit = self.fitted()
        x = pop.covariate_matrix().copy()
        x[:, 1] = np.linspace(0.0, 2.0, x.shape[0])
        from netlmm.netdata import NetworkPopulation

        pop2 = NetworkPopulation.from_edge_matrix(
            pop.edge_matrix(), pop.partition, x, pop.covariate_names
        )
        designs2 = build_designs(pop2)
        fit2 = fit_em(pop2, designs2)
        with pytest.raises(ValidationError):
            spec_from_fit(pop2, designs2, fit2)

    def test_recovers_fixture_positives_at_default_threshold(self):
        """On one generated fixture draw the default 0.05 threshold keeps
        exactly the three planted cells."""
        spec = fixture_spec()
        pop = generate(spec)
        designs = build_designs(pop)
        fit = fit_em(pop, designs)
        spec2 = spec_from_fit(pop, designs, fit)
        assert list(spec2.true_positive_cells()) == [0, 5, 9]
