"""On-disk artifact formats: fit directories, report tables, run manifests.

A fit directory holds everything inference needs, as versioned plain
text: ``meta.json`` (method, convergence, shapes), ``partition.csv``
(input partition format), ``coefficients.csv`` (one row per cell effect
and per edge deviation), ``re_cov.csv`` (dense U), ``resid_cov.csv``
(mode-tagged V values), ``gram.csv`` (sum of x x'), ``loglik.csv``
(EM trace), and optionally ``covariates.csv`` / ``posterior.csv``.
``read_fit`` reconstructs a fit object from such a directory.
"""

from __future__ import annotations

import csv
import json
import os
import platform
import sys

import numpy as np
import scipy

from . import __version__
from .covstruct import RandomEffectCov, ResidualCov, StructuredCovariance
from .errors import ValidationError
from .estim import CoefficientSet, FitResult, GlsFit
from .netdata import build_partition

__all__ = [
    "FORMAT_VERSION",
    "write_fit",
    "read_fit",
    "write_partition_file",
    "write_report",
    "write_sweep",
    "write_study",
    "write_null_study",
    "write_run_manifest",
    "emit_dataset",
]

FORMAT_VERSION = 1


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def _write_json(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_jsonable(payload), fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_partition_file(path, partition):
    """Emit node_id,community_id rows in the input partition format."""
    with open(path, "w", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["node_id", "community_id"])
        for nid, lab in zip(partition.node_ids, partition.labels):
            writer.writerow([nid, partition.community_ids[lab]])


def _write_coefficients(path, alpha):
    part = alpha.partition
    with open(path, "w", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["term", "a", "b", "i", "j", "covariate", "estimate"])
        for c in range(part.n_cells):
            a, b = part.cell_label(c)
            for k, name in enumerate(alpha.covariate_names):
                writer.writerow(
                    ["beta", a, b, "", "", name, repr(float(alpha.beta[c, k]))]
                )
        for e in range(part.n_edges):
            a, b = part.cell_label(int(part.edge_cell[e]))
            i, j = part.edge_nodes[e]
            for k, name in enumerate(alpha.covariate_names):
                writer.writerow(
                    [
                        "eta",
                        a,
                        b,
                        part.node_ids[i],
                        part.node_ids[j],
                        name,
                        repr(float(alpha.eta[e, k])),
                    ]
                )


def _write_resid_cov(path, resid):
    with open(path, "w", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["mode", resid.mode])
        if resid.mode == "diag":
            writer.writerow(["cell", "value"])
            for c, v in enumerate(resid.values):
                writer.writerow([c, repr(float(v))])
        elif resid.mode == "diag-edge":
            writer.writerow(["edge", "value"])
            for e, v in enumerate(resid.values):
                writer.writerow([e, repr(float(v))])
        else:
            writer.writerow(["cell", "i", "j", "value"])
            for c, blk in enumerate(resid.values):
                for i in range(blk.shape[0]):
                    for j in range(i, blk.shape[1]):
                        writer.writerow([c, i, j, repr(float(blk[i, j]))])


def write_fit(fit, outdir, pop=None):
    """Serialize a fit (GlsFit or FitResult) into ``outdir``."""
    os.makedirs(outdir, exist_ok=True)
    part = fit.partition
    meta = {
        "format_version": FORMAT_VERSION,
        "package_version": __version__,
        "method": fit.method,
        "v_mode": fit.sigma.resid.mode,
        "n_subjects": fit.n_subjects,
        "n_nodes": part.n_nodes,
        "n_cells": part.n_cells,
        "n_edges": part.n_edges,
        "covariate_names": list(fit.covariate_names),
        "cells": [list(part.cell_label(c)) for c in range(part.n_cells)],
        "iterations": getattr(fit, "iterations", 0),
        "converged": getattr(fit, "converged", True),
    }
    if isinstance(fit, FitResult):
        meta["loglik"] = fit.loglik
    _write_json(os.path.join(outdir, "meta.json"), meta)
    write_partition_file(os.path.join(outdir, "partition.csv"), part)
    _write_coefficients(os.path.join(outdir, "coefficients.csv"), fit.alpha)
    np.savetxt(
        os.path.join(outdir, "re_cov.csv"), fit.sigma.re.matrix, delimiter=","
    )
    _write_resid_cov(os.path.join(outdir, "resid_cov.csv"), fit.sigma.resid)
    np.savetxt(os.path.join(outdir, "gram.csv"), fit.gram, delimiter=",")
    if isinstance(fit, FitResult):
        np.savetxt(os.path.join(outdir, "loglik.csv"), fit.loglik_trace)
        np.savetxt(
            os.path.join(outdir, "posterior.csv"),
            fit.posterior_gamma,
            delimiter=",",
        )
    if pop is not None:
        with open(
            os.path.join(outdir, "covariates.csv"), "w", encoding="utf-8"
        ) as fh:
            writer = csv.writer(fh)
            writer.writerow(["subject_id", *fit.covariate_names])
            for s in pop.subjects:
                writer.writerow([s.subject_id, *(repr(float(v)) for v in s.covariates)])


def _read_meta(outdir):
    path = os.path.join(outdir, "meta.json")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            meta = json.load(fh)
    except OSError as exc:
        raise ValidationError(f"not a fit directory: {path}: {exc.strerror}")
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: corrupt JSON: {exc}")
    if meta.get("format_version") != FORMAT_VERSION:
        raise ValidationError(
            f"{path}: unsupported format version {meta.get('format_version')!r}"
        )
    return meta


def _read_coefficients(path, partition, names):
    p = len(names)
    beta = np.empty((partition.n_cells, p))
    eta = np.empty((partition.n_edges, p))
    seen_beta = np.zeros((partition.n_cells, p), dtype=bool)
    seen_eta = np.zeros((partition.n_edges, p), dtype=bool)
    cell_of = {
        tuple(str(x) for x in partition.cell_label(c)): c
        for c in range(partition.n_cells)
    }
    name_of = {n: k for k, n in enumerate(names)}
    node_of = {str(nid): k for k, nid in enumerate(partition.node_ids)}
    edge_of = partition.edge_position()
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["term", "a", "b", "i", "j", "covariate", "estimate"]:
            raise ValidationError(f"{path}: unexpected header {header}")
        for row in reader:
            term, a, b, i, j, name, val = row
            if (a, b) not in cell_of or name not in name_of:
                raise ValidationError(
                    f"{path}: row references unknown cell ({a}, {b}) "
                    f"or covariate {name!r}"
                )
            c = cell_of[(a, b)]
            k = name_of[name]
            if term == "beta":
                beta[c, k] = float(val)
                seen_beta[c, k] = True
            elif term == "eta":
                if i not in node_of or j not in node_of:
                    raise ValidationError(
                        f"{path}: unknown node in edge ({i}, {j})"
                    )
                key = tuple(sorted((node_of[i], node_of[j])))
                if key not in edge_of:
                    raise ValidationError(f"{path}: unknown edge ({i}, {j})")
                e = edge_of[key]
                eta[e, k] = float(val)
                seen_eta[e, k] = True
            else:
                raise ValidationError(f"{path}: unknown term {term!r}")
    if not (seen_beta.all() and seen_eta.all()):
        raise ValidationError(f"{path}: incomplete coefficient table")
    return beta, eta


def _read_resid_cov(path, partition):
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        tag = next(reader, None)
        if not tag or tag[0] != "mode" or len(tag) != 2:
            raise ValidationError(f"{path}: missing mode header")
        mode = tag[1]
        next(reader, None)  # column header
        rows = list(reader)
    if mode == "diag":
        vals = np.empty(partition.n_cells)
        for c, v in rows:
            vals[int(c)] = float(v)
        return ResidualCov("diag", vals, partition)
    if mode == "diag-edge":
        vals = np.empty(partition.n_edges)
        for e, v in rows:
            vals[int(e)] = float(v)
        return ResidualCov("diag-edge", vals, partition)
    if mode == "block":
        blocks = [
            np.zeros((int(s), int(s))) for s in partition.cell_sizes
        ]
        for c, i, j, v in rows:
            blk = blocks[int(c)]
            blk[int(i), int(j)] = blk[int(j), int(i)] = float(v)
        return ResidualCov("block", blocks, partition)
    raise ValidationError(f"{path}: unknown mode {mode!r}")


def read_fit(outdir):
    """Reconstruct a fit object from a directory written by write_fit."""
    meta = _read_meta(outdir)
    from .ingest import read_partition  # local import to avoid a cycle

    node_ids, labels = read_partition(os.path.join(outdir, "partition.csv"))
    partition = build_partition(node_ids, labels)
    if partition.n_cells != meta["n_cells"] or partition.n_edges != meta["n_edges"]:
        raise ValidationError(
            f"{outdir}: partition does not match recorded shape"
        )
    names = tuple(meta["covariate_names"])
    beta, eta = _read_coefficients(
        os.path.join(outdir, "coefficients.csv"), partition, names
    )
    alpha = CoefficientSet(beta, eta, partition, names)
    u = np.loadtxt(os.path.join(outdir, "re_cov.csv"), delimiter=",", ndmin=2)
    resid = _read_resid_cov(os.path.join(outdir, "resid_cov.csv"), partition)
    sigma = StructuredCovariance(resid, RandomEffectCov(u))
    gram = np.loadtxt(os.path.join(outdir, "gram.csv"), delimiter=",", ndmin=2)
    n = int(meta["n_subjects"])
    method = meta["method"]
    if method.startswith("gls-em"):
        trace = np.atleast_1d(np.loadtxt(os.path.join(outdir, "loglik.csv")))
        post = np.loadtxt(
            os.path.join(outdir, "posterior.csv"), delimiter=",", ndmin=2
        )
        return FitResult(
            alpha=alpha,
            re_cov=sigma.re,
            resid_cov=resid,
            loglik_trace=trace,
            converged=bool(meta["converged"]),
            iterations=int(meta["iterations"]),
            posterior_gamma=post,
            sigma=sigma,
            gram=gram,
            n_subjects=n,
            method=method,
        )
    return GlsFit(
        alpha=alpha,
        sigma=sigma,
        gram=gram,
        n_subjects=n,
        method=method,
        iterations=int(meta["iterations"]),
    )


def write_report(report, outdir):
    """Write an InferenceReport as CSV tables.

    Cell-family reports additionally get community-by-community matrix
    files for the estimate and (adjusted) p-values.
    """
    os.makedirs(outdir, exist_ok=True)
    name = f"{report.family}_tests.csv"
    report.to_frame().to_csv(os.path.join(outdir, name), index=False)
    if report.family == "cell":
        report.cell_matrix("estimate").to_csv(
            os.path.join(outdir, "cell_matrix_estimate.csv")
        )
        which = "p_adj" if report.p_adjusted is not None else "p"
        report.cell_matrix(which).to_csv(
            os.path.join(outdir, f"cell_matrix_{which}.csv")
        )


def write_sweep(frame, outdir, name="rejections.csv"):
    os.makedirs(outdir, exist_ok=True)
    frame.to_csv(os.path.join(outdir, name), index=False)


def write_study(report, outdir):
    """Write an estimator StudyReport: per-cell table + JSON summary."""
    os.makedirs(outdir, exist_ok=True)
    report.summary_frame().to_csv(
        os.path.join(outdir, "study_cells.csv"), index=False
    )
    _write_json(os.path.join(outdir, "study_summary.json"), report.to_dict())


def write_null_study(report, outdir, partition=None):
    """Write a NullStudyReport: pooled p-value table + JSON summary."""
    os.makedirs(outdir, exist_ok=True)
    with open(
        os.path.join(outdir, "null_pvalues.csv"), "w", encoding="utf-8"
    ) as fh:
        writer = csv.writer(fh)
        writer.writerow(["estimator", "repetition", "cell", "p"])
        for est in report.estimators:
            pvals = report.p_values[est]
            for r in range(pvals.shape[0]):
                for c in range(pvals.shape[1]):
                    label = (
                        "|".join(str(x) for x in partition.cell_label(c))
                        if partition is not None
                        else c
                    )
                    writer.writerow([est, r, label, repr(float(pvals[r, c]))])
    _write_json(os.path.join(outdir, "null_summary.json"), report.to_dict())


def emit_dataset(pop, outdir, long_format=False):
    """Write a population as partition + manifest + matrix files.

    The inverse of :func:`netlmm.ingest.load_population` for generated
    data: covariate columns drop the implicit intercept.  Matrices are
    dense grids, or i,j,weight rows when ``long_format`` is set.
    """
    os.makedirs(outdir, exist_ok=True)
    part = pop.partition
    write_partition_file(os.path.join(outdir, "partition.csv"), part)
    mats = os.path.join(outdir, "matrices")
    os.makedirs(mats, exist_ok=True)
    names = pop.covariate_names[1:]
    with open(
        os.path.join(outdir, "manifest.csv"), "w", encoding="utf-8"
    ) as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject_id", "matrix_path", *names])
        for s in pop.subjects:
            rel = os.path.join("matrices", f"{s.subject_id}.csv")
            with open(os.path.join(outdir, rel), "w", encoding="utf-8") as mf:
                mwriter = csv.writer(mf)
                if long_format:
                    for i in range(part.n_nodes):
                        for j in range(i + 1, part.n_nodes):
                            mwriter.writerow(
                                [
                                    part.node_ids[i],
                                    part.node_ids[j],
                                    repr(float(s.weights[i, j])),
                                ]
                            )
                else:
                    w = np.array(s.weights)
                    np.fill_diagonal(w, 0.0)
                    for i in range(part.n_nodes):
                        mwriter.writerow([repr(float(v)) for v in w[i]])
            writer.writerow(
                [s.subject_id, rel, *(repr(float(v)) for v in s.covariates[1:])]
            )
    return outdir


def write_run_manifest(outdir, command, config, seeds=None, elapsed=None):
    """Echo the run configuration for reproducibility."""
    os.makedirs(outdir, exist_ok=True)
    payload = {
        "command": command,
        "config": config,
        "seeds": seeds,
        "elapsed_seconds": None if elapsed is None else round(elapsed, 3),
        "package_version": __version__,
        "python_version": sys.version.split()[0],
        "numpy_version": np.__version__,
        "scipy_version": scipy.__version__,
        "platform": platform.platform(),
    }
    _write_json(os.path.join(outdir, "run_manifest.json"), payload)
