"""Community refinement for covariate-effect homogeneity.

Two algorithms over a shared node set:

* k-means style (refine_kmeans): cluster nodes so that the per-edge OLS
  covariate effects x_ij are well explained by one center per community
  pair.  Sweeps reassign nodes one at a time (ascending index, labels
  updated immediately, ties kept at the incumbent) against fixed centers,
  then centers are recomputed as within-cell means; the objective
  sum_{i<j} ||x_ij - center(c_i, c_j)||^2 never increases, including
  through empty-cluster repair (the worst-fitting node is moved into the
  empty cluster and centers are recomputed).  Restarts from random label
  initializations; the lowest-objective restart wins.

* likelihood (refine_likelihood): fit the cell-effects-only model
  y_m,e = mu_e + x_m' beta_cell + gamma + eps (free per-edge intercepts,
  cell-level covariate slopes), then alternate single-node label moves
  accepted only when the marginal log-likelihood increases (parameters
  held fixed during a sweep) with a warm-started EM refit after each
  sweep.  The cell universe is the full set of community pairs, including
  pairs emptied by moves, so U and the per-cell variances stay aligned
  across relabelings; per-edge intercepts are stored against a fixed
  reference edge order for the same reason.

Objectives are always minimized; the likelihood method reports the
negative log-likelihood as its objective.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .covstruct import RandomEffectCov, ResidualCov, StructuredCovariance, _segsum
from .errors import ConvergenceError, ValidationError
from .estim import EmOptions, _loglik_arrays, fit_em_arrays, fit_ols
from .netdata import CellPartition, devectorize

__all__ = [
    "EdgeEffectField",
    "RefinementResult",
    "edge_effect_field",
    "kmeans_objective",
    "refine_kmeans",
    "refine_likelihood",
    "split_community",
]


@dataclass
class EdgeEffectField:
    """Per-node-pair OLS covariate effects, as symmetric (n, n, q) values."""

    node_ids: tuple
    values: np.ndarray
    covariate_names: tuple

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        n = len(self.node_ids)
        if self.values.ndim == 2:
            self.values = self.values[:, :, None]
        if self.values.shape[:2] != (n, n):
            raise ValidationError(
                f"field shape {self.values.shape} does not match {n} nodes"
            )
        if not np.allclose(
            self.values, np.swapaxes(self.values, 0, 1), atol=1e-12, rtol=0.0
        ):
            raise ValidationError("edge-effect field is not symmetric")

    @property
    def n_nodes(self):
        return len(self.node_ids)


@dataclass
class RefinementResult:
    """Outcome of a refinement run.

    labels holds per-node community ids; objective is minimized (negative
    log-likelihood for the likelihood method); trace is the winning run's
    objective per iteration, nonincreasing.
    """

    labels: np.ndarray
    objective: float
    n_init: int
    best_init: int
    trace: np.ndarray
    method: str
    seed: object = None
    loglik: float | None = None
    n_sweeps: int = 0

    def partition_labels(self):
        """Per-node labels as a plain list (partition-file order)."""
        return list(self.labels)


def edge_effect_field(pop, designs, covariates=1) -> EdgeEffectField:
    """OLS per-edge covariate effects arranged over node pairs.

    ``covariates`` is one covariate (name or index) or a sequence refined
    jointly.  The field depends only on the data, not on any candidate
    node assignment.
    """
    if isinstance(covariates, (str, int, np.integer)):
        covariates = (covariates,)
    idx = [pop.covariate_index(cv) for cv in covariates]
    alpha = fit_ols(pop, designs)
    eff = alpha.edge_effects()[:, idx]
    part = pop.partition
    vals = np.stack(
        [devectorize(eff[:, k], part) for k in range(len(idx))], axis=-1
    )
    names = tuple(pop.covariate_names[j] for j in idx)
    return EdgeEffectField(part.node_ids, vals, names)


# ---------------------------------------------------------------------------
# Algorithm: k-means on the edge-effect field


class _FieldView:
    """Pairwise field arrays shared by the k-means engine and objective."""

    def __init__(self, values, l_total):
        n = values.shape[0]
        self.n = n
        self.l_total = l_total
        self.values = values
        self.ii, self.jj = np.triu_indices(n, k=1)
        self.pair_vals = values[self.ii, self.jj]  # (P, q)
        self.grand = self.pair_vals.mean(axis=0)

    def centers(self, labels):
        """(L, L, q) per-cell means, grand mean where a cell has no pairs."""
        la = np.minimum(labels[self.ii], labels[self.jj])
        lb = np.maximum(labels[self.ii], labels[self.jj])
        cid = la * self.l_total + lb
        q = self.pair_vals.shape[1]
        sums = np.zeros((self.l_total * self.l_total, q))
        np.add.at(sums, cid, self.pair_vals)
        counts = np.bincount(cid, minlength=self.l_total * self.l_total)
        out = np.where(
            counts[:, None] > 0, sums / np.maximum(counts, 1)[:, None], self.grand
        )
        return out.reshape(self.l_total, self.l_total, q)

    def objective(self, labels, centers):
        la = np.minimum(labels[self.ii], labels[self.jj])
        lb = np.maximum(labels[self.ii], labels[self.jj])
        diff = self.pair_vals - centers[la, lb]
        return float(np.sum(diff**2))

    def node_cost(self, i, a, labels, centers):
        """Summed squared deviation of node i's pairs if i took label a."""
        amin = np.minimum(a, labels)
        amax = np.maximum(a, labels)
        diff = self.values[i] - centers[amin, amax]
        sq = np.sum(diff**2, axis=-1)
        sq[i] = 0.0
        return float(np.sum(sq))


def _kmeans_engine(view, labels0, movable, candidates, max_sweeps=200):
    """Sweep/update loop from one initialization.

    Returns (labels, objective, trace).  Only movable nodes are swept and
    only candidate labels are considered (and repaired when empty).
    """
    labels = np.array(labels0, dtype=np.int64)
    order = np.flatnonzero(movable)
    cand = np.asarray(sorted(candidates), dtype=np.int64)
    centers = view.centers(labels)
    trace = [view.objective(labels, centers)]
    for _ in range(max_sweeps):
        moved = 0
        for i in order:
            inc = labels[i]
            costs = np.array(
                [view.node_cost(i, a, labels, centers) for a in cand]
            )
            inc_pos = int(np.flatnonzero(cand == inc)[0])
            best = float(costs.min())
            if costs[inc_pos] > best:
                labels[i] = cand[int(np.argmin(costs))]
                moved += 1
        centers = view.centers(labels)
        repaired = 0
        node_counts = np.bincount(labels, minlength=view.l_total)
        for a in cand:
            if node_counts[a] == 0:
                devs = np.array(
                    [view.node_cost(i, labels[i], labels, centers) for i in order]
                )
                w = order[int(np.argmax(devs))]
                node_counts[labels[w]] -= 1
                labels[w] = a
                node_counts[a] += 1
                centers = view.centers(labels)
                repaired += 1
        trace.append(view.objective(labels, centers))
        if moved == 0 and repaired == 0:
            return labels, trace[-1], trace
    raise ConvergenceError(
        f"k-means refinement did not settle in {max_sweeps} sweeps"
    )


def kmeans_objective(field: EdgeEffectField, labels) -> float:
    """The k-means objective of a labeling, centers set to the cell means."""
    ints, _ = _labels_to_ints(labels)
    view = _FieldView(field.values, int(ints.max()) + 1)
    return view.objective(ints, view.centers(ints))


def _labels_to_ints(labels):
    uniq = []
    seen = {}
    out = np.empty(len(labels), dtype=np.int64)
    for k, lab in enumerate(labels):
        if lab not in seen:
            seen[lab] = len(uniq)
            uniq.append(lab)
        out[k] = seen[lab]
    return out, uniq


def refine_kmeans(
    field: EdgeEffectField, k, n_init=100, seed=None, max_sweeps=200
) -> RefinementResult:
    """Cluster all nodes into k communities minimizing the field objective.

    Runs n_init random restarts (derived from ``seed``) and returns the
    best; output labels are 1..k, numbered by first node occurrence.
    """
    n = field.n_nodes
    if k < 1:
        raise ValidationError("need at least one community")
    if k > n:
        raise ValidationError(f"cannot form {k} communities from {n} nodes")
    if n_init < 1:
        raise ValidationError("need at least one restart")
    view = _FieldView(field.values, k)
    streams = np.random.SeedSequence(seed).spawn(n_init)
    movable = np.ones(n, dtype=bool)
    candidates = np.arange(k)
    best = None
    for r in range(n_init):
        rng = np.random.default_rng(streams[r])
        labels0 = rng.integers(0, k, size=n)
        labels, obj, trace = _kmeans_engine(view, labels0, movable, candidates, max_sweeps)
        if best is None or obj < best[1]:
            best = (labels, obj, trace, r)
    labels, obj, trace, r = best
    canon, _ = _labels_to_ints(labels)
    return RefinementResult(
        labels=np.asarray(canon + 1, dtype=object),
        objective=obj,
        n_init=n_init,
        best_init=r,
        trace=np.asarray(trace),
        method="kmeans",
        seed=seed,
        n_sweeps=len(trace) - 1,
    )


# ---------------------------------------------------------------------------
# Algorithm: likelihood-based node moves


class _CellModelState:
    """Cell-effects-only model over a fixed label universe.

    Parameters live in label-invariant coordinates: per-edge absolute
    intercepts (reference order = lexicographic node pairs), per-cell
    covariate slopes, U, and the residual variances.  Empty cells carry
    placeholder variances and never touch the likelihood.
    """

    def __init__(self, pop, designs, universe_size, v_mode, options):
        if v_mode not in ("diag", "diag-edge"):
            raise ValidationError(
                "likelihood refinement supports diagonal residual modes only"
            )
        self.v_mode = v_mode
        self.options = options or EmOptions(max_iter=2000)
        self.k = universe_size
        self.node_ids = pop.partition.node_ids
        n = len(self.node_ids)
        self.ii, self.jj = np.triu_indices(n, k=1)
        self.y_ref = np.stack(
            [s.weights[self.ii, self.jj] for s in pop.subjects]
        )
        self.x = designs.covariates
        self.names = designs.covariate_names
        self.n_cells = self.k * (self.k + 1) // 2
        tri = np.zeros((self.k, self.k), dtype=np.int64)
        c = 0
        cells = []
        for a in range(self.k):
            for b in range(a, self.k):
                tri[a, b] = c
                cells.append((a, b))
                c += 1
        self.tri = tri
        self.cells = tuple(cells)
        d = self.y_ref.shape[1]
        p = self.x.shape[1]
        self.mu_ref = np.zeros(d)
        self.slopes = np.zeros((self.n_cells, max(p - 1, 0)))
        self.u = np.eye(self.n_cells)
        self.v = None  # (C,) for diag, (d,) reference order for diag-edge

    def arrange(self, labels):
        la = np.minimum(labels[self.ii], labels[self.jj])
        lb = np.maximum(labels[self.ii], labels[self.jj])
        cell_of = self.tri[la, lb]
        order = np.argsort(cell_of, kind="stable")
        sizes = np.bincount(cell_of, minlength=self.n_cells).astype(np.int64)
        starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        part = CellPartition(
            node_ids=self.node_ids,
            labels=np.array(labels, dtype=np.int64),
            community_ids=tuple(range(self.k)),
            cells=self.cells,
            edge_nodes=np.column_stack([self.ii, self.jj])[order],
            edge_cell=cell_of[order],
            cell_sizes=sizes,
            cell_starts=starts,
        )
        return part, order

    def _coeffs(self, part, order):
        mu = self.mu_ref[order]
        sums = _segsum(mu, part.cell_starts, part.cell_starts + part.cell_sizes)
        beta0 = sums / np.maximum(part.cell_sizes, 1)
        eta0 = mu - beta0[part.edge_cell]
        beta = np.column_stack([beta0, self.slopes])
        eta = np.zeros((mu.shape[0], self.x.shape[1]))
        eta[:, 0] = eta0
        return beta, eta

    def _resid_cov(self, part, order):
        if self.v_mode == "diag":
            return ResidualCov("diag", self.v, part)
        return ResidualCov("diag-edge", self.v[order], part)

    def loglik(self, labels):
        """Marginal log-likelihood of a labeling at the current parameters."""
        part, order = self.arrange(labels)
        beta, eta = self._coeffs(part, order)
        sigma = StructuredCovariance(
            self._resid_cov(part, order), RandomEffectCov(self.u)
        )
        return _loglik_arrays(self.y_ref[:, order], self.x, beta, eta, sigma)

    def refit(self, labels, warm=True):
        """EM refit under a labeling; updates the state, returns the loglik."""
        part, order = self.arrange(labels)
        init = None
        if warm and self.v is not None:
            beta, eta = self._coeffs(part, order)
            init = (beta, eta, self.u, self._resid_cov(part, order))
        res = fit_em_arrays(
            self.y_ref[:, order],
            self.x,
            part,
            self.names,
            v_mode=self.v_mode,
            options=self.options,
            eta_covariates=(0,),
            init=init,
        )
        self.mu_ref[order] = res.alpha.edge_effects()[:, 0]
        self.slopes = res.alpha.beta[:, 1:]
        self.u = res.re_cov.matrix
        if self.v_mode == "diag":
            self.v = res.resid_cov.values
        else:
            if self.v is None:
                self.v = np.empty(self.y_ref.shape[1])
            self.v[order] = res.resid_cov.values
        return res.loglik


def _likelihood_engine(state, labels0, movable, candidates, max_sweeps):
    labels = np.array(labels0, dtype=np.int64)
    order = np.flatnonzero(movable)
    cand = sorted(int(a) for a in candidates)
    ll = state.refit(labels, warm=False)
    trace = [ll]
    sweeps = 0
    for _ in range(max_sweeps):
        moved = 0
        for i in order:
            inc = int(labels[i])
            best_ll, best = ll, inc
            for a in cand:
                if a == inc:
                    continue
                labels[i] = a
                cand_ll = state.loglik(labels)
                if cand_ll > best_ll:
                    best_ll, best = cand_ll, a
            labels[i] = best
            ll = best_ll
            moved += best != inc
        sweeps += 1
        if moved == 0:
            break
        ll = state.refit(labels)
        trace.append(ll)
    else:
        raise ConvergenceError(
            f"likelihood refinement did not settle in {max_sweeps} sweeps"
        )
    return labels, ll, trace, sweeps


def refine_likelihood(
    pop,
    designs,
    initial_labels=None,
    v_mode="diag",
    seed=None,
    max_sweeps=50,
    options=None,
) -> RefinementResult:
    """Node-by-node label moves maximizing the cell-model likelihood.

    ``initial_labels`` holds one community id per node (default: the
    population's partition, e.g. a k-means result); moves stay within
    that id set.  Deterministic; ``seed`` is recorded only.
    """
    part = pop.partition
    if initial_labels is None:
        initial_labels = [part.community_ids[k] for k in part.labels]
    if len(initial_labels) != part.n_nodes:
        raise ValidationError(
            f"{part.n_nodes} nodes but {len(initial_labels)} initial labels"
        )
    ints, universe = _labels_to_ints(list(initial_labels))
    state = _CellModelState(pop, designs, len(universe), v_mode, options)
    movable = np.ones(part.n_nodes, dtype=bool)
    labels, ll, trace, sweeps = _likelihood_engine(
        state, ints, movable, range(len(universe)), max_sweeps
    )
    out = np.array([universe[k] for k in labels], dtype=object)
    return RefinementResult(
        labels=out,
        objective=-ll,
        n_init=1,
        best_init=0,
        trace=-np.asarray(trace),
        method="likelihood",
        seed=seed,
        loglik=ll,
        n_sweeps=sweeps,
    )


# ---------------------------------------------------------------------------
# restricted splits


def split_community(
    pop,
    designs,
    community,
    parts=2,
    method="kmeans",
    covariate=1,
    n_init=100,
    seed=None,
    v_mode="diag",
    max_sweeps=200,
    options=None,
) -> RefinementResult:
    """Split one community into ``parts`` sublabels, all other nodes frozen.

    Sublabels are named "<community>.1", "<community>.2", ... in order of
    first node occurrence.  method "likelihood" initializes from the
    k-means split of the same seed.  parts = 1 returns the identity
    relabeling with the corresponding objective.
    """
    part = pop.partition
    try:
        a_pos = part.community_ids.index(community)
    except ValueError:
        raise ValidationError(
            f"unknown community {community!r}; have {part.community_ids}"
        ) from None
    comm_mask = part.labels == a_pos
    size = int(comm_mask.sum())
    if parts < 1:
        raise ValidationError("parts must be at least 1")
    if parts > size:
        raise ValidationError(
            f"cannot split {size}-node community {community!r} into {parts} parts"
        )
    base_ids = np.array(
        [part.community_ids[k] for k in part.labels], dtype=object
    )
    k_old = part.n_communities

    if parts == 1:
        if method == "kmeans":
            fld = edge_effect_field(pop, designs, covariate)
            obj = kmeans_objective(fld, list(base_ids))
            return RefinementResult(
                labels=base_ids, objective=obj, n_init=n_init, best_init=0,
                trace=np.asarray([obj]), method="kmeans", seed=seed,
            )
        state = _CellModelState(pop, designs, k_old, v_mode, options)
        labels, ll, trace, sweeps = _likelihood_engine(
            state, part.labels, comm_mask, [a_pos], max_sweeps=50
        )
        return RefinementResult(
            labels=base_ids, objective=-ll, n_init=1, best_init=0,
            trace=-np.asarray(trace), method="likelihood", seed=seed,
            loglik=ll, n_sweeps=sweeps,
        )

    # k-means phase (also the initializer for the likelihood method)
    fld = edge_effect_field(pop, designs, covariate)
    view = _FieldView(fld.values, k_old + parts)
    candidates = np.arange(k_old, k_old + parts)
    streams = np.random.SeedSequence(seed).spawn(n_init)
    best = None
    for r in range(n_init):
        rng = np.random.default_rng(streams[r])
        labels0 = part.labels.copy()
        labels0[comm_mask] = k_old + rng.integers(0, parts, size=size)
        labels, obj, trace = _kmeans_engine(
            view, labels0, comm_mask, candidates, max_sweeps
        )
        if best is None or obj < best[1]:
            best = (labels, obj, trace, r)
    km_labels, km_obj, km_trace, km_r = best

    if method == "kmeans":
        out = _sublabel(base_ids, km_labels, comm_mask, community)
        return RefinementResult(
            labels=out, objective=km_obj, n_init=n_init, best_init=km_r,
            trace=np.asarray(km_trace), method="kmeans", seed=seed,
            n_sweeps=len(km_trace) - 1,
        )
    if method != "likelihood":
        raise ValidationError(f"unknown refinement method {method!r}")

    state = _CellModelState(pop, designs, k_old + parts, v_mode, options)
    labels, ll, trace, sweeps = _likelihood_engine(
        state, km_labels, comm_mask, candidates, max_sweeps=50
    )
    out = _sublabel(base_ids, labels, comm_mask, community)
    return RefinementResult(
        labels=out, objective=-ll, n_init=n_init, best_init=km_r,
        trace=-np.asarray(trace), method="likelihood", seed=seed,
        loglik=ll, n_sweeps=sweeps,
    )


def _sublabel(base_ids, labels, comm_mask, community):
    """Replace the split community's engine labels with a.1, a.2, ..."""
    out = base_ids.copy()
    mapping = {}
    for i in np.flatnonzero(comm_mask):
        lab = int(labels[i])
        if lab not in mapping:
            mapping[lab] = f"{community}.{len(mapping) + 1}"
        out[i] = mapping[lab]
    return out
