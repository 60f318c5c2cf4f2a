"""Shared builders for randomized test instances."""

import numpy as np

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    """Print the one-line acceptance verdicts collected during the run."""
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)

from netlmm.covstruct import RandomEffectCov, ResidualCov, StructuredCovariance
from netlmm.netdata import (
    DesignMatrices,
    NetworkPopulation,
    SubjectNetwork,
    build_partition,
)


def random_partition(rng, max_nodes=10, max_communities=4):
    """A random partition with at least one edge; labels 0..k-1."""
    while True:
        n = int(rng.integers(2, max_nodes + 1))
        k = int(rng.integers(1, min(max_communities, n) + 1))
        labels = rng.integers(0, k, size=n)
        part = build_partition(list(range(n)), [int(l) for l in labels])
        if part.n_edges >= 1:
            return part


def random_psd(rng, size, rank=None, scale=1.0):
    """Random PSD matrix, optionally rank-deficient."""
    rank = size if rank is None else rank
    a = rng.normal(size=(size, max(rank, 1))) * scale
    if rank == 0:
        return np.zeros((size, size))
    return a @ a.T / max(rank, 1)


def random_resid_cov(rng, partition, mode):
    """Random positive-definite residual covariance of the given mode."""
    c, d = partition.n_cells, partition.n_edges
    if mode == "diag":
        return ResidualCov("diag", rng.uniform(0.2, 2.0, size=c), partition)
    if mode == "diag-edge":
        return ResidualCov("diag-edge", rng.uniform(0.2, 2.0, size=d), partition)
    blocks = []
    for cc in range(c):
        n_c = int(partition.cell_sizes[cc])
        blk = random_psd(rng, n_c) + np.eye(n_c) * rng.uniform(0.2, 1.0)
        blocks.append(blk)
    return ResidualCov("block", blocks, partition)


def random_sigma(rng, partition, mode=None, u_rank=None):
    """Random structured covariance; u_rank None draws full rank."""
    mode = mode or rng.choice(["diag", "diag-edge", "block"])
    resid = random_resid_cov(rng, partition, mode)
    c = partition.n_cells
    if u_rank is None:
        u_rank = int(rng.integers(0, c + 1))
    u = random_psd(rng, c, rank=u_rank, scale=0.7)
    return StructuredCovariance(resid, RandomEffectCov(u))


def random_population(rng, partition, n_subjects, p=2, sigma=None):
    """Population with standard-normal covariates and Gaussian edges.

    When ``sigma`` is given, edge vectors are drawn with that covariance
    around a random linear predictor; otherwise edges are iid normal.
    """
    n = partition.n_nodes
    d = partition.n_edges
    x = np.column_stack(
        [np.ones(n_subjects)] + [rng.normal(size=n_subjects) for _ in range(p - 1)]
    )
    theta = rng.normal(scale=0.5, size=(d, p))
    mean = x @ theta.T
    if sigma is None:
        y = mean + rng.normal(scale=0.3, size=(n_subjects, d))
    else:
        import oracles

        chol = np.linalg.cholesky(
            oracles.dense_sigma(sigma) + 1e-12 * np.eye(d)
        )
        y = mean + rng.normal(size=(n_subjects, d)) @ chol.T
    names = tuple(["intercept"] + [f"x{j}" for j in range(1, p)])
    return NetworkPopulation.from_edge_matrix(y, partition, x, names)


def planted_split_population(
    rng,
    sub_sizes=(6, 6),
    n_other=4,
    n_subjects=50,
    noise=0.4,
    sep_factor=3.0,
):
    """Population whose community "0" hides a two-block covariate split.

    The slope of x1 is constant within each pair of planted blocks and the
    distinct cell means are spaced ``sep_factor`` times the sampling noise
    of a single per-edge OLS slope (noise / sqrt(sum (x - xbar)^2)), so
    sep_factor=3 gives a three-sigma separation.  Returns the population
    and the planted block index per node (0/1 inside community "0",
    2 for the rest).
    """
    n_sub = sum(sub_sizes)
    n = n_sub + n_other
    labels = ["0"] * n_sub + ["1"] * n_other
    blocks = np.repeat(np.arange(len(sub_sizes) + 1), list(sub_sizes) + [n_other])
    x1 = rng.normal(size=n_subjects)
    sxx = float(np.sum((x1 - x1.mean()) ** 2))
    sep = sep_factor * noise / np.sqrt(sxx)
    pair_levels = {}
    for a in range(len(sub_sizes) + 1):
        for b in range(a, len(sub_sizes) + 1):
            pair_levels[(a, b)] = sep * len(pair_levels)
    theta = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            key = (min(blocks[i], blocks[j]), max(blocks[i], blocks[j]))
            theta[i, j] = theta[j, i] = pair_levels[key]
    part = build_partition(list(range(n)), labels)
    ii, jj = part.edge_nodes.T
    x = np.column_stack([np.ones(n_subjects), x1])
    y = 1.0 + np.outer(x1, theta[ii, jj])
    y = y + rng.normal(scale=noise, size=y.shape)
    pop = NetworkPopulation.from_edge_matrix(y, part, x, ("intercept", "x1"))
    return pop, blocks


def designs_for(pop):
    return DesignMatrices(pop.partition, pop.covariate_matrix(), pop.covariate_names)


def make_subject(sid, weights, covs):
    return SubjectNetwork(sid, weights, covs)
