"""Network data model: nodes, community cells, edge vectorization, designs.

A population of weighted networks shares one node set of size n and one
partition of the nodes into K communities.  An unordered community pair
(a, b) with a <= b is a *cell*; cell (a, b) contains the n_ab node pairs
with one endpoint in a and one in b,

    n_ab = n_a * n_b          (a != b)
    n_aa = n_a * (n_a - 1)/2  (within-community)

so the cells partition all n*(n-1)/2 edges.  Edge weights of one subject
are vectorized cell by cell, edges ordered lexicographically by
(min node index, max node index).

The per-subject fixed-effects design expresses every edge mean as
x_m' (beta_cell + eta_edge) with the edge deviations eta summing to zero
inside each cell.  Per cell this is the square pattern

    [ x'  x'       0 ]
    [ x'      ..     ]        (free deviations for the first n_ab - 1
    [ x'  -x' .. -x' ]         edges; the last row carries -x')

which for n_ab = 2, p = 1, x = 1 is [[1, 1], [1, -1]].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

__all__ = [
    "fisher_z",
    "CellPartition",
    "build_partition",
    "SubjectNetwork",
    "NetworkPopulation",
    "vectorize",
    "devectorize",
    "DesignMatrices",
    "build_designs",
]

# Largest edge count for which dense per-subject design matrices may be
# materialized (oracle/test use only; structured code paths never need them).
_DENSE_DESIGN_LIMIT = 400


def fisher_z(r):
    """Fisher variance-stabilizing transform z = 0.5*log((1+r)/(1-r)).

    Accepts scalars or arrays; every entry must satisfy |r| < 1.
    """
    arr = np.asarray(r, dtype=float)
    if np.any(~np.isfinite(arr)) or np.any(np.abs(arr) >= 1.0):
        bad = arr[~(np.isfinite(arr) & (np.abs(arr) < 1.0))].ravel()
        raise ValidationError(
            f"fisher_z requires |r| < 1; offending value {bad[0]!r}"
        )
    out = np.arctanh(arr)
    return float(out) if np.isscalar(r) else out


def _label_sort_key(label):
    """Deterministic community ordering: numeric labels first, numerically."""
    try:
        return (0, float(label), "")
    except (TypeError, ValueError):
        return (1, 0.0, str(label))


@dataclass(frozen=True)
class CellPartition:
    """Node communities and the induced cell structure over edges.

    Attributes
    ----------
    node_ids : tuple
        Original node identifiers, in storage order.
    labels : np.ndarray
        Community index (0-based, consecutive) per node.
    community_ids : tuple
        Original community identifier per community index.
    cells : tuple[tuple[int, int], ...]
        Community-index pairs (a, b), a <= b, in row-major order; empty
        within-cells (singleton communities) are dropped.
    edge_nodes : np.ndarray
        (d, 2) node-index pairs (i < j), concatenated cell by cell.
    edge_cell : np.ndarray
        Cell index of each edge.
    cell_sizes : np.ndarray
        Number of edges per cell.
    """

    node_ids: tuple
    labels: np.ndarray
    community_ids: tuple
    cells: tuple
    edge_nodes: np.ndarray
    edge_cell: np.ndarray
    cell_sizes: np.ndarray
    cell_starts: np.ndarray = field(repr=False, default=None)

    @property
    def n_nodes(self):
        return len(self.node_ids)

    @property
    def n_communities(self):
        return len(self.community_ids)

    @property
    def n_cells(self):
        return len(self.cells)

    @property
    def n_edges(self):
        return int(self.edge_nodes.shape[0])

    def cell_slice(self, c):
        start = self.cell_starts[c]
        return slice(int(start), int(start + self.cell_sizes[c]))

    def community_sizes(self):
        return np.bincount(self.labels, minlength=self.n_communities)

    def cell_label(self, c):
        """Original community-id pair for cell index c."""
        a, b = self.cells[c]
        return (self.community_ids[a], self.community_ids[b])

    def edge_position(self):
        """Map (node i, node j) -> global edge index, as a dict."""
        return {
            (int(i), int(j)): e
            for e, (i, j) in enumerate(self.edge_nodes)
        }


def build_partition(node_ids, labels) -> CellPartition:
    """Build the cell structure from per-node community labels.

    Labels may be arbitrary identifiers; they are relabeled to consecutive
    indices 0..K-1 in deterministic order (numeric labels sort numerically).
    Within-community cells of singleton communities are dropped.
    """
    node_ids = tuple(node_ids)
    if len(node_ids) != len(set(node_ids)):
        raise ValidationError("duplicate node ids in partition")
    if len(labels) != len(node_ids):
        raise ValidationError(
            f"{len(node_ids)} nodes but {len(labels)} community labels"
        )
    if len(node_ids) < 2:
        raise ValidationError("need at least 2 nodes")

    uniq = sorted(set(labels), key=_label_sort_key)
    index_of = {lab: k for k, lab in enumerate(uniq)}
    lab_arr = np.array([index_of[l] for l in labels], dtype=np.int64)
    k = len(uniq)

    members = [np.flatnonzero(lab_arr == a) for a in range(k)]

    cells = []
    pairs_per_cell = []
    for a in range(k):
        for b in range(a, k):
            if a == b:
                ia = members[a]
                if len(ia) < 2:
                    continue  # singleton community: no within-cell
                ii, jj = np.triu_indices(len(ia), k=1)
                pairs = np.column_stack([ia[ii], ia[jj]])
            else:
                ia, ib = members[a], members[b]
                gi, gj = np.meshgrid(ia, ib, indexing="ij")
                lo = np.minimum(gi.ravel(), gj.ravel())
                hi = np.maximum(gi.ravel(), gj.ravel())
                pairs = np.column_stack([lo, hi])
            order = np.lexsort((pairs[:, 1], pairs[:, 0]))
            cells.append((a, b))
            pairs_per_cell.append(pairs[order])

    sizes = np.array([len(p) for p in pairs_per_cell], dtype=np.int64)
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    edge_nodes = (
        np.concatenate(pairs_per_cell, axis=0)
        if pairs_per_cell
        else np.zeros((0, 2), dtype=np.int64)
    )
    edge_cell = np.repeat(np.arange(len(cells), dtype=np.int64), sizes)

    return CellPartition(
        node_ids=node_ids,
        labels=lab_arr,
        community_ids=tuple(uniq),
        cells=tuple(cells),
        edge_nodes=edge_nodes,
        edge_cell=edge_cell,
        cell_sizes=sizes,
        cell_starts=starts,
    )


@dataclass
class SubjectNetwork:
    """One subject: symmetric weight matrix plus covariate vector."""

    subject_id: str
    weights: np.ndarray
    covariates: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ValidationError(
                f"subject {self.subject_id}: weight matrix must be square, "
                f"got {w.shape}"
            )
        if not np.allclose(w, w.T, atol=1e-8, rtol=0.0, equal_nan=True):
            raise ValidationError(
                f"subject {self.subject_id}: weight matrix is not symmetric"
            )
        if np.any(np.isnan(w[~np.eye(w.shape[0], dtype=bool)])):
            raise ValidationError(
                f"subject {self.subject_id}: missing (NaN) edge weights"
            )
        self.weights = w
        self.covariates = np.asarray(self.covariates, dtype=float).ravel()


@dataclass
class NetworkPopulation:
    """Population of subjects sharing one node set and partition.

    covariate_names[0] is conventionally the intercept; subject covariate
    vectors carry the leading 1 explicitly.
    """

    partition: CellPartition
    subjects: list
    covariate_names: tuple

    def __post_init__(self):
        n = self.partition.n_nodes
        p = len(self.covariate_names)
        if not self.subjects:
            raise ValidationError("population has no subjects")
        for s in self.subjects:
            if s.weights.shape[0] != n:
                raise ValidationError(
                    f"subject {s.subject_id}: {s.weights.shape[0]} nodes, "
                    f"partition has {n}"
                )
            if s.covariates.shape[0] != p:
                raise ValidationError(
                    f"subject {s.subject_id}: {s.covariates.shape[0]} "
                    f"covariates, expected {p}"
                )

    @classmethod
    def from_edge_matrix(
        cls, y, partition, covariates, covariate_names, subject_ids=None
    ):
        """Build a population from an (N, d) edge matrix (inverse of
        :meth:`edge_matrix`)."""
        y = np.asarray(y, dtype=float)
        covariates = np.asarray(covariates, dtype=float)
        if y.ndim != 2 or y.shape[1] != partition.n_edges:
            raise ValidationError(
                f"edge matrix shape {y.shape} does not match "
                f"{partition.n_edges} edges"
            )
        if subject_ids is None:
            subject_ids = [f"S{m + 1:04d}" for m in range(y.shape[0])]
        subjects = [
            SubjectNetwork(sid, devectorize(row, partition), cov)
            for sid, row, cov in zip(subject_ids, y, covariates)
        ]
        return cls(partition, subjects, tuple(covariate_names))

    @property
    def n_subjects(self):
        return len(self.subjects)

    @property
    def n_covariates(self):
        return len(self.covariate_names)

    def edge_matrix(self):
        """Stack the vectorized subjects into an (N, d) array."""
        return np.stack(
            [vectorize(s.weights, self.partition) for s in self.subjects]
        )

    def covariate_matrix(self):
        return np.stack([s.covariates for s in self.subjects])

    def covariate_index(self, which):
        """Resolve a covariate given by name or integer index."""
        if isinstance(which, (int, np.integer)):
            j = int(which)
            if not 0 <= j < self.n_covariates:
                raise ValidationError(f"covariate index {j} out of range")
            return j
        try:
            return self.covariate_names.index(which)
        except ValueError:
            raise ValidationError(
                f"unknown covariate {which!r}; have {self.covariate_names}"
            ) from None


def vectorize(weights, partition: CellPartition):
    """Extract the edge-weight vector (cell-major canonical order)."""
    w = np.asarray(weights, dtype=float)
    if w.shape != (partition.n_nodes, partition.n_nodes):
        raise ValidationError(
            f"weight matrix shape {w.shape} does not match "
            f"{partition.n_nodes} nodes"
        )
    return w[partition.edge_nodes[:, 0], partition.edge_nodes[:, 1]]


def devectorize(y, partition: CellPartition):
    """Inverse of :func:`vectorize`; diagonal set to zero."""
    y = np.asarray(y, dtype=float)
    if y.shape != (partition.n_edges,):
        raise ValidationError(
            f"edge vector length {y.shape} does not match "
            f"{partition.n_edges} edges"
        )
    n = partition.n_nodes
    w = np.zeros((n, n))
    i, j = partition.edge_nodes[:, 0], partition.edge_nodes[:, 1]
    w[i, j] = y
    w[j, i] = y
    return w


class DesignMatrices:
    """Fixed- and random-effects designs shared by estimation routines.

    The random-effects design Z (edges x cells) is the cell-membership
    indicator.  The per-subject fixed-effects design X_m factors per cell
    as T_c kron x_m' with T_c the square edge/coefficient pattern from the
    module docstring, so it is never stored densely; ``dense_x(m)`` builds
    it explicitly for small instances (tests, oracles).
    """

    def __init__(self, partition: CellPartition, covariates, covariate_names):
        self.partition = partition
        self.covariates = np.asarray(covariates, dtype=float)
        self.covariate_names = tuple(covariate_names)
        if self.covariates.ndim != 2:
            raise ValidationError("covariate matrix must be 2-D (N x p)")
        if self.covariates.shape[1] != len(self.covariate_names):
            raise ValidationError("covariate names do not match matrix width")

    @property
    def n_subjects(self):
        return self.covariates.shape[0]

    @property
    def n_covariates(self):
        return self.covariates.shape[1]

    @property
    def n_params(self):
        """Total free coefficients: p per edge (beta plus free etas)."""
        return self.n_covariates * self.partition.n_edges

    @property
    def Z(self):
        """Dense (d, C) cell indicator; one 1 per row."""
        d, c = self.partition.n_edges, self.partition.n_cells
        z = np.zeros((d, c))
        z[np.arange(d), self.partition.edge_cell] = 1.0
        return z

    def gram(self):
        """M = sum_m x_m x_m' (p x p)."""
        return self.covariates.T @ self.covariates

    def cell_pattern(self, c):
        """The square T_c matrix mapping (beta, eta_1..eta_{n-1}) to edge means."""
        n = int(self.partition.cell_sizes[c])
        t = np.zeros((n, n))
        t[:, 0] = 1.0
        for e in range(n - 1):
            t[e, 1 + e] = 1.0
        t[n - 1, 1:] = -1.0
        return t

    def alpha_slices(self):
        """Per-cell slices into the stacked coefficient vector."""
        p = self.n_covariates
        out = []
        start = 0
        for c in range(self.partition.n_cells):
            width = p * int(self.partition.cell_sizes[c])
            out.append(slice(start, start + width))
            start += width
        return out

    def dense_x(self, m):
        """Materialize X_m (d x p*d).  Small instances only."""
        part = self.partition
        if part.n_edges > _DENSE_DESIGN_LIMIT:
            raise ValidationError(
                f"refusing to materialize a dense design with "
                f"{part.n_edges} edges (limit {_DENSE_DESIGN_LIMIT})"
            )
        x = self.covariates[m]
        blocks = [
            np.kron(self.cell_pattern(c), x[None, :])
            for c in range(part.n_cells)
        ]
        out = np.zeros((part.n_edges, self.n_params))
        slices = self.alpha_slices()
        for c, blk in enumerate(blocks):
            out[part.cell_slice(c), slices[c]] = blk
        return out


def build_designs(pop: NetworkPopulation) -> DesignMatrices:
    """Construct the design bundle for a population."""
    x = pop.covariate_matrix()
    if pop.n_subjects < 2:
        raise ValidationError("need at least 2 subjects to build designs")
    return DesignMatrices(pop.partition, x, pop.covariate_names)
