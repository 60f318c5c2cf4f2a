"""File ingestion: partitions, subject manifests, adjacency matrices.

Formats (all plain delimited text, ``#`` comments allowed):

* partition: two columns ``node_id,community_id``; header optional.
* manifest: header ``subject_id,matrix_path,<covariate columns...>``;
  matrix paths are resolved relative to the manifest's directory.
* matrix: either a dense n x n grid in partition node order, or long
  ``i,j,weight`` rows naming node ids (symmetrized; an (i,j)/(j,i)
  disagreement beyond 1e-8 is an error; diagonal entries are ignored).
* exclusions: one node id per line.

Fields may be separated by commas or whitespace; detection is per file.
Errors carry file and line context.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import ValidationError
from .netdata import NetworkPopulation, SubjectNetwork, build_partition, fisher_z

__all__ = [
    "read_partition",
    "read_manifest",
    "read_matrix",
    "read_exclusions",
    "parse_config",
    "load_population",
]

_SYM_TOL = 1e-8


def _rows(path):
    """Yield (lineno, fields) from a delimited file, skipping comments."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                fields = (
                    [f.strip() for f in line.split(",")]
                    if "," in line
                    else line.split()
                )
                yield lineno, fields
    except OSError as exc:
        raise ValidationError(f"cannot read {path}: {exc.strerror}") from exc


def _looks_numeric(s):
    try:
        float(s)
        return True
    except ValueError:
        return False


def read_partition(path):
    """Read node->community assignments; returns (node_ids, labels).

    Node ids are kept as strings; labels become ints when every label
    parses as one.
    """
    node_ids, labels = [], []
    for lineno, fields in _rows(path):
        if len(fields) != 2:
            raise ValidationError(
                f"{path}:{lineno}: expected 2 columns (node_id, community_id), "
                f"got {len(fields)}"
            )
        node_ids.append(fields[0])
        labels.append(fields[1])
    if node_ids and node_ids[0].lower() in ("node_id", "node", "id"):
        node_ids, labels = node_ids[1:], labels[1:]
    if not node_ids:
        raise ValidationError(f"{path}: no node assignments found")
    seen = set()
    for nid in node_ids:
        if nid in seen:
            raise ValidationError(f"{path}: duplicate node id {nid!r}")
        seen.add(nid)
    if all(_looks_numeric(l) and float(l) == int(float(l)) for l in labels):
        labels = [int(float(l)) for l in labels]
    return node_ids, labels


def read_exclusions(path):
    """Read node ids to drop, one per line."""
    out = []
    for lineno, fields in _rows(path):
        if len(fields) != 1:
            raise ValidationError(
                f"{path}:{lineno}: expected one node id per line"
            )
        out.append(fields[0])
    return out


def read_manifest(path):
    """Read the subject manifest.

    Returns (records, covariate_names) where each record is
    (subject_id, resolved_matrix_path, covariate_values).
    """
    rows = list(_rows(path))
    if not rows:
        raise ValidationError(f"{path}: empty manifest")
    lineno, header = rows[0]
    if len(header) < 2 or header[0].lower() != "subject_id":
        raise ValidationError(
            f"{path}:{lineno}: manifest must start with a header "
            "'subject_id,matrix_path,<covariates>'"
        )
    if header[1].lower() != "matrix_path":
        raise ValidationError(
            f"{path}:{lineno}: second manifest column must be matrix_path"
        )
    names = tuple(header[2:])
    base = os.path.dirname(os.path.abspath(path))
    records = []
    seen = set()
    for lineno, fields in rows[1:]:
        if len(fields) != len(header):
            raise ValidationError(
                f"{path}:{lineno}: expected {len(header)} columns, "
                f"got {len(fields)}"
            )
        sid = fields[0]
        if sid in seen:
            raise ValidationError(f"{path}:{lineno}: duplicate subject id {sid!r}")
        seen.add(sid)
        vals = []
        for name, field in zip(names, fields[2:]):
            if not _looks_numeric(field):
                raise ValidationError(
                    f"{path}:{lineno}: covariate {name!r} value {field!r} "
                    "is not numeric"
                )
            vals.append(float(field))
        mpath = fields[1]
        if not os.path.isabs(mpath):
            mpath = os.path.join(base, mpath)
        records.append((sid, mpath, np.array(vals)))
    if not records:
        raise ValidationError(f"{path}: manifest lists no subjects")
    return records, names


def read_matrix(path, node_ids):
    """Read one adjacency matrix (dense grid or long i,j,weight rows).

    Returns a symmetric (n, n) float array in ``node_ids`` order with a
    zero diagonal.
    """
    n = len(node_ids)
    rows = list(_rows(path))
    if not rows:
        raise ValidationError(f"{path}: empty matrix file")
    widths = {len(f) for _, f in rows}
    if widths == {n} and len(rows) == n and (
        n != 3 or all(_looks_numeric(f) for _, fs in rows for f in fs)
    ):
        return _dense_matrix(path, rows, n)
    if widths == {3}:
        return _long_matrix(path, rows, node_ids)
    if len(widths) == 1:
        w = widths.pop()
        raise ValidationError(
            f"{path}: expected a dense {n}x{n} grid or 3-column i,j,weight "
            f"rows; found {len(rows)} rows of {w} columns"
        )
    raise ValidationError(f"{path}: inconsistent column counts {sorted(widths)}")


def _dense_matrix(path, rows, n):
    w = np.empty((n, n))
    for r, (lineno, fields) in enumerate(rows):
        for c, field in enumerate(fields):
            if not _looks_numeric(field):
                raise ValidationError(
                    f"{path}:{lineno}: non-numeric entry {field!r}"
                )
            w[r, c] = float(field)
    if not np.all(np.isfinite(w)):
        raise ValidationError(f"{path}: matrix contains non-finite entries")
    d = np.abs(w - w.T)
    if np.max(d) > _SYM_TOL:
        i, j = np.unravel_index(np.argmax(d), d.shape)
        raise ValidationError(
            f"{path}: asymmetric entries at ({i}, {j}): "
            f"{w[i, j]!r} vs {w[j, i]!r}"
        )
    w = 0.5 * (w + w.T)
    np.fill_diagonal(w, 0.0)
    return w


def _long_matrix(path, rows, node_ids):
    index = {nid: k for k, nid in enumerate(node_ids)}
    n = len(node_ids)
    w = np.full((n, n), np.nan)
    np.fill_diagonal(w, 0.0)
    for lineno, (i_id, j_id, val) in rows:
        if i_id not in index or j_id not in index:
            missing = i_id if i_id not in index else j_id
            raise ValidationError(
                f"{path}:{lineno}: unknown node id {missing!r}"
            )
        if not _looks_numeric(val):
            raise ValidationError(f"{path}:{lineno}: non-numeric weight {val!r}")
        i, j = index[i_id], index[j_id]
        if i == j:
            continue
        v = float(val)
        if not np.isfinite(v):
            raise ValidationError(f"{path}:{lineno}: non-finite weight")
        prev = w[i, j]
        if not np.isnan(prev) and abs(prev - v) > _SYM_TOL:
            raise ValidationError(
                f"{path}:{lineno}: ({i_id}, {j_id}) disagrees with its "
                f"mirror entry: {v!r} vs {prev!r}"
            )
        w[i, j] = w[j, i] = v
    miss = np.argwhere(np.isnan(w))
    if miss.size:
        i, j = miss[0]
        raise ValidationError(
            f"{path}: missing weight for edge ({node_ids[i]}, {node_ids[j]})"
        )
    return w


def parse_config(path):
    """Read a key=value config file into a dict of strings.

    Lines are taken whole (values may contain commas); ``#`` starts a
    comment and blank lines are skipped.
    """
    out = {}
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ValidationError(f"cannot read {path}: {exc}") from exc
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(
                f"{path}:{lineno}: expected key=value, got {line!r}"
            )
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if not key:
            raise ValidationError(f"{path}:{lineno}: empty key")
        if key in out:
            raise ValidationError(f"{path}:{lineno}: duplicate key {key!r}")
        out[key] = val
    return out


def load_population(
    manifest_path,
    partition_path,
    exclusions_path=None,
    fisher=False,
) -> NetworkPopulation:
    """Assemble a NetworkPopulation from manifest + partition files.

    Excluded nodes are dropped from the partition and from every matrix.
    With ``fisher=True`` entries are treated as correlations and mapped
    through Fisher's z (entries with |r| >= 1 are an error).  An
    intercept column of ones is prepended to the manifest covariates.
    """
    node_ids, labels = read_partition(partition_path)
    if exclusions_path is not None:
        drop = set(read_exclusions(exclusions_path))
        unknown = drop.difference(node_ids)
        if unknown:
            raise ValidationError(
                f"{exclusions_path}: unknown node ids {sorted(unknown)}"
            )
        keep = [k for k, nid in enumerate(node_ids) if nid not in drop]
        if len(keep) < 2:
            raise ValidationError("fewer than 2 nodes remain after exclusions")
        kept_ids = [node_ids[k] for k in keep]
        kept_labels = [labels[k] for k in keep]
    else:
        keep = list(range(len(node_ids)))
        kept_ids, kept_labels = node_ids, labels

    partition = build_partition(kept_ids, kept_labels)
    records, names = read_manifest(manifest_path)
    idx = np.array(keep)
    subjects = []
    for sid, mpath, vals in records:
        w = read_matrix(mpath, node_ids)[np.ix_(idx, idx)]
        if fisher:
            off = ~np.eye(w.shape[0], dtype=bool)
            if np.any(np.abs(w[off]) >= 1.0):
                raise ValidationError(
                    f"{mpath}: Fisher transform needs |r| < 1; "
                    f"max |r| = {np.max(np.abs(w[off]))}"
                )
            w = fisher_z(w)  # zero diagonal maps to zero
        subjects.append(
            SubjectNetwork(sid, w, np.concatenate([[1.0], vals]))
        )
    return NetworkPopulation(partition, subjects, ("intercept",) + names)
