"""Command-line front end: validate, fit, test, refine, simulate, nullcheck.

Thin orchestration over the library modules.  Every subcommand that writes
artifacts also writes a ``run_manifest.json`` (full configuration, seeds,
package versions, wall time), so any run can be reproduced bit-for-bit in
single-threaded mode.

Exit codes: 0 success, 1 validation or usage error, 2 numerical failure,
3 non-convergence.  ``NETLMM_THREADS`` sets the default worker count for
subcommands that can parallelize.
"""

from __future__ import annotations

import json
import os
import time

import click
import numpy as np

from . import __version__, artifacts, simlab
from .errors import ConvergenceError, NumericalError, ValidationError
from .estim import EmOptions, fit_em, ols_fit
from .infer import CORRECTIONS, cell_tests, edge_tests, rejection_sweep
from .ingest import load_population, parse_config
from .netdata import NetworkPopulation, build_designs, build_partition
from .refine import (
    edge_effect_field,
    refine_kmeans,
    refine_likelihood,
    split_community,
)

_V_MODES = ("diag", "diag-edge", "block")


# ---------------------------------------------------------------------------
# small helpers


def _covariate_arg(value):
    """A covariate named on the command line: integer index or name."""
    try:
        return int(value)
    except (TypeError, ValueError):
        return value


def _community_arg(value, partition):
    """Map a command-line community id onto the partition's id type."""
    if value in partition.community_ids:
        return value
    try:
        as_int = int(value)
    except ValueError:
        return value
    return as_int if as_int in partition.community_ids else value


def _estimator_arg(text):
    names = tuple(s.strip() for s in str(text).split(",") if s.strip())
    if not names:
        raise ValidationError("empty estimator list")
    for name in names:
        if name not in simlab.ESTIMATORS:
            raise ValidationError(
                f"unknown estimator {name!r}; choose from "
                f"{', '.join(simlab.ESTIMATORS)}"
            )
    return names


def _load(manifest, partition, exclude, fisher):
    return load_population(
        manifest, partition, exclusions_path=exclude, fisher=fisher
    )


def _em_options(tol, max_iter):
    base = EmOptions()
    return EmOptions(
        tol=base.tol if tol is None else tol,
        max_iter=base.max_iter if max_iter is None else max_iter,
    )


def _dataset_options(required=True):
    """The manifest/partition/exclusions/fisher option quartet."""

    def wrap(f):
        f = click.option(
            "--fisher",
            is_flag=True,
            help="Apply the Fisher z-transform to edge weights "
            "(inputs must be correlations in (-1, 1)).",
        )(f)
        f = click.option(
            "--exclude",
            type=click.Path(exists=True, dir_okay=False),
            default=None,
            help="File listing node ids to drop before modeling.",
        )(f)
        f = click.option(
            "--partition",
            "partition_path",
            required=required,
            type=click.Path(exists=True, dir_okay=False),
            help="Two-column node_id,community_id file.",
        )(f)
        f = click.option(
            "--manifest",
            "manifest_path",
            required=required,
            type=click.Path(exists=True, dir_okay=False),
            help="Subject manifest: subject_id, matrix_path, covariates.",
        )(f)
        return f

    return wrap


def _apply_config(ctx, config_path, casts):
    """Fill parameters from a key=value file; explicit flags win.

    ``casts`` maps config key -> (parameter name, cast).  Returns the
    parsed file contents for the run manifest.
    """
    if config_path is None:
        return {}
    entries = parse_config(config_path)
    explicit = {
        name
        for name in ctx.params
        if ctx.get_parameter_source(name) is click.core.ParameterSource.COMMANDLINE
    }
    for key, raw in entries.items():
        if key not in casts:
            raise ValidationError(
                f"unknown config key {key!r}; supported: "
                f"{', '.join(sorted(casts))}"
            )
        name, cast = casts[key]
        if name in explicit:
            continue
        try:
            ctx.params[name] = cast(raw)
        except ValueError as exc:
            raise ValidationError(f"config key {key}: {exc}") from None
    return dict(entries)


def _echo_frame(frame):
    click.echo(frame.to_string(index=False))


# ---------------------------------------------------------------------------
# group and dispatcher


@click.group(name="netlmm")
@click.version_option(version=__version__, prog_name="netlmm")
def cli():
    """Mixed-effects analysis of populations of weighted networks."""


def main(argv=None):
    """Entry point; returns the process exit code instead of raising."""
    try:
        cli.main(args=argv, prog_name="netlmm", standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("aborted.", err=True)
        return 130
    except click.ClickException as exc:
        exc.show()
        return 1
    except ValidationError as exc:
        click.echo(f"error: {exc}", err=True)
        return 1
    except NumericalError as exc:
        click.echo(f"numerical failure: {exc}", err=True)
        return 2
    except ConvergenceError as exc:
        click.echo(f"not converged: {exc}", err=True)
        return 3
    return 0


# ---------------------------------------------------------------------------
# validate


@cli.command()
@_dataset_options()
def validate(manifest_path, partition_path, exclude, fisher):
    """Ingest a dataset, check its consistency, and print a summary."""
    pop = _load(manifest_path, partition_path, exclude, fisher)
    build_designs(pop)
    part = pop.partition
    sizes = np.bincount(part.labels, minlength=len(part.community_ids))
    click.echo(f"subjects:    {pop.n_subjects}")
    click.echo(f"covariates:  {', '.join(pop.covariate_names)}")
    click.echo(f"nodes:       {part.n_nodes}")
    click.echo(
        "communities: "
        + ", ".join(
            f"{cid} ({int(sz)} nodes)"
            for cid, sz in zip(part.community_ids, sizes)
        )
    )
    click.echo(f"cells:       {part.n_cells}")
    click.echo(f"edges:       {part.n_edges}")
    click.echo("ok")


# ---------------------------------------------------------------------------
# fit


@cli.command()
@_dataset_options()
@click.option(
    "--estimator",
    type=click.Choice(["ols", "gls-em"]),
    default="gls-em",
    show_default=True,
)
@click.option(
    "--v-mode",
    type=click.Choice(_V_MODES),
    default="diag",
    show_default=True,
    help="Residual covariance structure for gls-em.",
)
@click.option("--tol", type=float, default=None, help="EM stopping tolerance.")
@click.option("--max-iter", type=int, default=None, help="EM iteration cap.")
@click.option(
    "--out",
    "outdir",
    required=True,
    type=click.Path(file_okay=False),
    help="Directory for the fit artifacts.",
)
def fit(
    manifest_path,
    partition_path,
    exclude,
    fisher,
    estimator,
    v_mode,
    tol,
    max_iter,
    outdir,
):
    """Fit the model to a dataset and write a fit directory."""
    t0 = time.perf_counter()
    pop = _load(manifest_path, partition_path, exclude, fisher)
    designs = build_designs(pop)
    if estimator == "ols":
        result = ols_fit(pop, designs)
    else:
        result = fit_em(
            pop, designs, v_mode=v_mode, options=_em_options(tol, max_iter)
        )
    artifacts.write_fit(result, outdir, pop=pop)
    config = {
        "manifest": os.path.abspath(manifest_path),
        "partition": os.path.abspath(partition_path),
        "exclude": exclude and os.path.abspath(exclude),
        "fisher": fisher,
        "estimator": estimator,
        "v_mode": v_mode if estimator == "gls-em" else None,
        "tol": tol,
        "max_iter": max_iter,
        "out": os.path.abspath(outdir),
    }
    artifacts.write_run_manifest(
        outdir, "fit", config, elapsed=time.perf_counter() - t0
    )
    click.echo(
        f"{result.method}: {pop.n_subjects} subjects, "
        f"{pop.partition.n_edges} edges, "
        f"{result.iterations} iteration(s); wrote {outdir}"
    )
    if getattr(result, "converged", True) is False:
        raise ConvergenceError(
            f"EM used all {result.iterations} iterations without meeting "
            f"tol; partial artifacts were written to {outdir}"
        )


# ---------------------------------------------------------------------------
# test


@cli.command(name="test")
@click.option(
    "--fit",
    "fit_dir",
    required=True,
    type=click.Path(exists=True, file_okay=False),
    help="A fit directory written by `netlmm fit`.",
)
@click.option(
    "--covariate",
    default="1",
    show_default=True,
    help="Covariate to test (name or column index).",
)
@click.option(
    "--correction",
    type=click.Choice(CORRECTIONS),
    default="bh",
    show_default=True,
)
@click.option("--level", type=float, default=0.05, show_default=True)
@click.option(
    "--reference",
    type=click.Choice(["normal", "t"]),
    default="normal",
    show_default=True,
    help="Null reference distribution for the test statistics.",
)
@click.option(
    "--out",
    "outdir",
    required=True,
    type=click.Path(file_okay=False),
)
def cmd_test(fit_dir, covariate, correction, level, reference, outdir):
    """Test one covariate's cell- and edge-level effects from a fit."""
    t0 = time.perf_counter()
    result = artifacts.read_fit(fit_dir)
    cov = _covariate_arg(covariate)
    cells = cell_tests(
        result, cov, method=correction, level=level, reference=reference
    )
    edges = edge_tests(
        result, cov, method=correction, level=level, reference=reference
    )
    artifacts.write_report(cells, outdir)
    artifacts.write_report(edges, outdir)
    artifacts.write_sweep(
        rejection_sweep(cells.p_raw), outdir, name="cell_rejections.csv"
    )
    artifacts.write_sweep(
        rejection_sweep(edges.p_raw), outdir, name="edge_rejections.csv"
    )
    config = {
        "fit": os.path.abspath(fit_dir),
        "covariate": covariate,
        "correction": correction,
        "level": level,
        "reference": reference,
        "out": os.path.abspath(outdir),
    }
    artifacts.write_run_manifest(
        outdir, "test", config, elapsed=time.perf_counter() - t0
    )
    click.echo(
        f"cells: {int(cells.rejected.sum())} of {cells.n_targets} rejected; "
        f"edges: {int(edges.rejected.sum())} of {edges.n_targets} rejected "
        f"({correction} at level {level}); wrote {outdir}"
    )


# ---------------------------------------------------------------------------
# refine


@cli.command()
@_dataset_options(required=False)
@click.option(
    "--method",
    type=click.Choice(["kmeans", "likelihood"]),
    default="kmeans",
    show_default=True,
)
@click.option(
    "--split-community",
    "split_comm",
    default=None,
    help="Only re-assign the nodes of this community.",
)
@click.option(
    "--parts",
    type=int,
    default=2,
    show_default=True,
    help="Number of sub-communities for --split-community.",
)
@click.option(
    "--k",
    type=int,
    default=None,
    help="Total community count for a full kmeans re-labeling.",
)
@click.option("--covariate", default="1", show_default=True)
@click.option("--n-init", type=int, default=100, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option(
    "--v-mode", type=click.Choice(_V_MODES), default="diag", show_default=True
)
@click.option(
    "--refine-on",
    type=click.Path(exists=True, dir_okay=False),
    default=None,
    help="Manifest used for refinement (defaults to --manifest).",
)
@click.option(
    "--test-on",
    type=click.Path(exists=True, dir_okay=False),
    default=None,
    help="Independent manifest to re-fit and test under the refined "
    "partition.",
)
@click.option(
    "--allow-double-dip",
    is_flag=True,
    help="Permit --test-on to equal the refinement dataset.",
)
@click.option(
    "--correction", type=click.Choice(CORRECTIONS), default="bh", show_default=True
)
@click.option("--level", type=float, default=0.05, show_default=True)
@click.option("--out", "outdir", required=True, type=click.Path(file_okay=False))
def refine(
    manifest_path,
    partition_path,
    exclude,
    fisher,
    method,
    split_comm,
    parts,
    k,
    covariate,
    n_init,
    seed,
    v_mode,
    refine_on,
    test_on,
    allow_double_dip,
    correction,
    level,
    outdir,
):
    """Re-estimate community labels; optionally test on held-out data.

    Selecting a partition and testing effects on the same subjects biases
    the tests, so --test-on must name a different manifest unless
    --allow-double-dip is passed.
    """
    t0 = time.perf_counter()
    source = refine_on or manifest_path
    if source is None:
        raise click.UsageError("pass --manifest or --refine-on")
    if partition_path is None:
        raise click.UsageError("pass --partition")
    if (
        test_on is not None
        and os.path.realpath(test_on) == os.path.realpath(source)
        and not allow_double_dip
    ):
        raise ValidationError(
            "refinement and test manifests are the same dataset; refusing "
            "to select and test on the same subjects "
            "(pass --allow-double-dip to override)"
        )
    pop = _load(source, partition_path, exclude, fisher)
    designs = build_designs(pop)
    cov = _covariate_arg(covariate)
    if split_comm is not None:
        community = _community_arg(split_comm, pop.partition)
        result = split_community(
            pop,
            designs,
            community,
            parts=parts,
            method=method,
            covariate=cov,
            n_init=n_init,
            seed=seed,
            v_mode=v_mode,
        )
    elif method == "kmeans":
        if k is None:
            raise click.UsageError(
                "--method kmeans needs --k (full re-labeling) or "
                "--split-community"
            )
        field = edge_effect_field(pop, designs, covariates=cov)
        result = refine_kmeans(field, k, n_init=n_init, seed=seed)
    else:
        result = refine_likelihood(pop, designs, v_mode=v_mode, seed=seed)
    refined = build_partition(
        pop.partition.node_ids, result.partition_labels()
    )
    os.makedirs(outdir, exist_ok=True)
    artifacts.write_partition_file(
        os.path.join(outdir, "refined_partition.csv"), refined
    )
    provenance = {
        "method": result.method,
        "objective": float(result.objective),
        "seed": result.seed,
        "n_init": result.n_init,
        "best_init": result.best_init,
        "n_sweeps": result.n_sweeps,
        "loglik": None if result.loglik is None else float(result.loglik),
        "communities": [str(c) for c in refined.community_ids],
    }
    with open(os.path.join(outdir, "refinement.json"), "w") as fh:
        json.dump(provenance, fh, indent=2, sort_keys=True)
        fh.write("\n")
    click.echo(
        f"refined to {len(refined.community_ids)} communities "
        f"(objective {result.objective:.6g}); wrote {outdir}"
    )
    if test_on is not None:
        held = _load(test_on, partition_path, exclude, fisher)
        held = NetworkPopulation(refined, held.subjects, held.covariate_names)
        fit_res = fit_em(held, build_designs(held), v_mode=v_mode)
        report = cell_tests(fit_res, cov, method=correction, level=level)
        test_dir = os.path.join(outdir, "test")
        artifacts.write_fit(fit_res, test_dir, pop=held)
        artifacts.write_report(report, test_dir)
        click.echo(
            f"held-out test: {int(report.rejected.sum())} of "
            f"{report.n_targets} cells rejected ({correction} at {level})"
        )
    config = {
        "refine_on": os.path.abspath(source),
        "test_on": test_on and os.path.abspath(test_on),
        "partition": os.path.abspath(partition_path),
        "exclude": exclude and os.path.abspath(exclude),
        "fisher": fisher,
        "method": method,
        "split_community": split_comm,
        "parts": parts if split_comm is not None else None,
        "k": k,
        "covariate": covariate,
        "n_init": n_init,
        "v_mode": v_mode,
        "allow_double_dip": allow_double_dip,
        "correction": correction,
        "level": level,
        "out": os.path.abspath(outdir),
    }
    artifacts.write_run_manifest(
        outdir,
        "refine",
        config,
        seeds={"seed": seed},
        elapsed=time.perf_counter() - t0,
    )


# ---------------------------------------------------------------------------
# simulate


@cli.command()
@click.option(
    "--fixture",
    type=click.Choice(["study", "null", "benchmark"]),
    default="study",
    show_default=True,
    help="Built-in generative spec to simulate from.",
)
@click.option(
    "--from-fit",
    "from_fit",
    type=click.Path(exists=True, file_okay=False),
    default=None,
    help="Derive the generative spec from a fit directory instead "
    "(requires --manifest/--partition for the source data).",
)
@_dataset_options(required=False)
@click.option(
    "--p-threshold",
    type=float,
    default=0.05,
    show_default=True,
    help="With --from-fit: zero out effects whose p exceeds this.",
)
@click.option(
    "--reps",
    type=int,
    default=None,
    help="Replications per estimator [default: 100; 0 skips the study].",
)
@click.option(
    "--estimators",
    default=",".join(simlab.ESTIMATORS),
    show_default=True,
    help="Comma-separated subset of the known estimators.",
)
@click.option("--seed", type=int, default=None, help="Base seed override.")
@click.option(
    "--level",
    type=float,
    default=0.95,
    show_default=True,
    help="Confidence level for the coverage columns.",
)
@click.option(
    "--jobs",
    type=int,
    default=None,
    envvar="NETLMM_THREADS",
    help="Worker processes [default: NETLMM_THREADS or serial].",
)
@click.option(
    "--config",
    "config_path",
    type=click.Path(exists=True, dir_okay=False),
    default=None,
    help="key=value file; explicit flags take precedence.",
)
@click.option(
    "--emit-dataset",
    "emit_dir",
    type=click.Path(file_okay=False),
    default=None,
    help="Also write one simulated dataset (manifest + matrices) here.",
)
@click.option(
    "--emit-format",
    type=click.Choice(["dense", "long"]),
    default="dense",
    show_default=True,
)
@click.option("--out", "outdir", required=True, type=click.Path(file_okay=False))
@click.pass_context
def simulate(
    ctx,
    fixture,
    from_fit,
    manifest_path,
    partition_path,
    exclude,
    fisher,
    p_threshold,
    reps,
    estimators,
    seed,
    level,
    jobs,
    config_path,
    emit_dir,
    emit_format,
    outdir,
):
    """Estimator-comparison study on synthetic network populations."""
    t0 = time.perf_counter()
    file_config = _apply_config(
        ctx,
        config_path,
        {
            "reps": ("reps", int),
            "r": ("reps", int),
            "estimators": ("estimators", str),
            "seed": ("seed", int),
            "level": ("level", float),
            "jobs": ("jobs", int),
        },
    )
    reps = ctx.params["reps"]
    estimators = ctx.params["estimators"]
    seed = ctx.params["seed"]
    level = ctx.params["level"]
    jobs = ctx.params["jobs"]

    if from_fit is not None:
        if manifest_path is None or partition_path is None:
            raise click.UsageError(
                "--from-fit needs --manifest and --partition for the data "
                "the fit was computed on"
            )
        pop = _load(manifest_path, partition_path, exclude, fisher)
        fit_res = artifacts.read_fit(from_fit)
        spec = simlab.spec_from_fit(
            pop,
            build_designs(pop),
            fit_res,
            p_threshold=p_threshold,
            seed=0 if seed is None else seed,
        )
    else:
        maker = {
            "study": simlab.fixture_spec,
            "null": simlab.fixture_null_spec,
            "benchmark": simlab.benchmark_spec,
        }[fixture]
        spec = maker()
    est_names = _estimator_arg(estimators)
    base_seed = spec.seed if seed is None else seed

    if emit_dir is not None:
        sim_pop = simlab.generate(spec, seed=seed)
        artifacts.emit_dataset(
            sim_pop, emit_dir, long_format=emit_format == "long"
        )
        click.echo(
            f"emitted {sim_pop.n_subjects}-subject dataset to {emit_dir}"
        )

    if reps is None:
        reps = 0 if emit_dir is not None else 100
    report = None
    if reps:
        study_cov = 1 if len(spec.covariate_names) > 1 else 0
        report = simlab.estimator_study(
            spec,
            estimators=est_names,
            reps=reps,
            seed=seed,
            covariate=study_cov,
            level=level,
            jobs=jobs,
        )
        artifacts.write_study(report, outdir)
        _echo_frame(report.summary_frame())
    config = {
        "fixture": None if from_fit else fixture,
        "from_fit": from_fit and os.path.abspath(from_fit),
        "manifest": manifest_path and os.path.abspath(manifest_path),
        "partition": partition_path and os.path.abspath(partition_path),
        "p_threshold": p_threshold if from_fit else None,
        "reps": reps,
        "estimators": list(est_names),
        "level": level,
        "jobs": jobs,
        "config_file": file_config,
        "emit_dataset": emit_dir and os.path.abspath(emit_dir),
        "emit_format": emit_format if emit_dir else None,
        "out": os.path.abspath(outdir),
    }
    artifacts.write_run_manifest(
        outdir,
        "simulate",
        config,
        seeds={"base_seed": int(base_seed)},
        elapsed=time.perf_counter() - t0,
    )
    if report is not None:
        click.echo(f"study complete ({reps} reps); wrote {outdir}")
    else:
        click.echo(f"wrote {outdir}")


# ---------------------------------------------------------------------------
# nullcheck


@cli.command()
@click.option(
    "--fixture",
    is_flag=True,
    help="Use the built-in one-group null population.",
)
@_dataset_options(required=False)
@click.option(
    "--restrict",
    default=None,
    help="NAME=VALUE: keep only subjects whose covariate NAME equals "
    "VALUE before splitting.",
)
@click.option("--reps", type=int, default=100, show_default=True)
@click.option("--estimators", default="gls-diag", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option(
    "--level",
    type=float,
    default=0.05,
    show_default=True,
    help="Per-test level used for the small-p diagnostics.",
)
@click.option(
    "--config",
    "config_path",
    type=click.Path(exists=True, dir_okay=False),
    default=None,
    help="key=value file; explicit flags take precedence.",
)
@click.option("--out", "outdir", required=True, type=click.Path(file_okay=False))
@click.pass_context
def nullcheck(
    ctx,
    fixture,
    manifest_path,
    partition_path,
    exclude,
    fisher,
    restrict,
    reps,
    estimators,
    seed,
    level,
    config_path,
    outdir,
):
    """Null-distribution check: random half-splits of one group.

    Each repetition splits the subjects into two fake groups, tests the
    split indicator per cell, and pools the p-values, which should be
    roughly uniform for a calibrated estimator.
    """
    t0 = time.perf_counter()
    file_config = _apply_config(
        ctx,
        config_path,
        {
            "reps": ("reps", int),
            "r": ("reps", int),
            "estimators": ("estimators", str),
            "seed": ("seed", int),
            "level": ("level", float),
        },
    )
    reps = ctx.params["reps"]
    estimators = ctx.params["estimators"]
    seed = ctx.params["seed"]
    level = ctx.params["level"]

    if fixture:
        pop = simlab.generate(simlab.fixture_null_spec())
    else:
        if manifest_path is None or partition_path is None:
            raise click.UsageError(
                "pass --fixture, or --manifest and --partition"
            )
        pop = _load(manifest_path, partition_path, exclude, fisher)
        if restrict is not None:
            key, sep, value = restrict.partition("=")
            if not sep:
                raise ValidationError(
                    f"--restrict wants NAME=VALUE, got {restrict!r}"
                )
            j = pop.covariate_index(key.strip())
            want = float(value)
            kept = [
                s for s in pop.subjects if s.covariates[j] == want
            ]
            if len(kept) < 4:
                raise ValidationError(
                    f"restriction {restrict!r} leaves {len(kept)} subjects; "
                    "need at least 4 to split"
                )
            pop = NetworkPopulation(
                pop.partition, kept, pop.covariate_names
            )
    est_names = _estimator_arg(estimators)
    report = simlab.null_split_study(
        pop, reps=reps, estimators=est_names, seed=seed, level=level
    )
    artifacts.write_null_study(report, outdir, partition=pop.partition)
    for est in est_names:
        click.echo(
            f"{est}: pooled {report.n_reps * report.n_cells} p-values, "
            f"KS {report.ks_stat[est]:.4f} "
            f"(p {report.ks_pvalue[est]:.3g}), "
            f"frac<0.05 {report.frac_below_05[est]:.3f}"
        )
    config = {
        "fixture": fixture,
        "manifest": manifest_path and os.path.abspath(manifest_path),
        "partition": partition_path and os.path.abspath(partition_path),
        "exclude": exclude and os.path.abspath(exclude),
        "fisher": fisher,
        "restrict": restrict,
        "reps": reps,
        "estimators": list(est_names),
        "level": level,
        "config_file": file_config,
        "out": os.path.abspath(outdir),
    }
    artifacts.write_run_manifest(
        outdir,
        "nullcheck",
        config,
        seeds={"seed": seed},
        elapsed=time.perf_counter() - t0,
    )
    click.echo(f"wrote {outdir}")


if __name__ == "__main__":
    raise SystemExit(main())
