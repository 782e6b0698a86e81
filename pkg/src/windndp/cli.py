"""Command-line entry points.

Every experiment is driven by one config (YAML file, profile preset, and
``-s section.key=value`` overrides, later sources winning) and writes into a
run directory ``<out_dir>/<name>`` that carries the fully resolved config
alongside the outputs, so a finished run can be reproduced from the directory
alone.

Failures exit with distinct codes: configuration problems 2, integrity
(digest) failures 3, numerics 4, convergence 5, anything else 1.
"""

from __future__ import annotations

import functools
import json
import os
import sys
import zipfile
from pathlib import Path
from urllib.parse import urlparse

import click
import numpy as np
import pandas as pd

from . import __version__
from .checkpoint import (
    load_checkpoint,
    restore_denoiser,
    restore_gp,
    save_gp_checkpoint,
    save_training_checkpoint,
)
from .config import PROFILES, ExperimentConfig, load_config
from .dataset import (
    Dataset,
    dataset_digest,
    eval_fixtures,
    load_dataset,
    scada_table,
    synthetic_tables,
    training_functions,
    write_dataset,
)
from .denoiser import init_denoiser
from .encoder import init_task_encoder
from .errors import (
    ConfigurationError,
    ConvergenceError,
    IntegrityError,
    NumericError,
    WindndpError,
)
from .flatparams import parameter_count
from .gp import fit_gp
from .metrics import DiffusionAdapter, GpAdapter, MetricsReport, encoder_separation, evaluate_protocol
from .plots import coverage_figure, embedding_figure, error_vs_context_figure, save_svg
from .scada import (
    NormalizationStats,
    ScadaColumnMap,
    StatusColumnMap,
    assign_split,
    build_features,
    fetch_dataset,
    filter_records,
    fit_stats,
    read_scada_csv,
    read_status_csv,
    sha256_file,
)
from .schedules import schedule_from_config
from .synthetic import SyntheticTaskSpec
from .trainer import LrSchedule, TrainerConfig, train, write_training_log

#: first matching class decides the exit code; everything else exits 1
_EXIT_CODES = (
    (ConfigurationError, 2),
    (IntegrityError, 3),
    (ConvergenceError, 5),
    (NumericError, 4),
)


def _exit_code(err: BaseException) -> int:
    for cls, code in _EXIT_CODES:
        if isinstance(err, cls):
            return code
    return 1


def _handled(fn):
    """Map library errors onto the documented exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except WindndpError as err:
            click.echo(f"error: {err}", err=True)
            sys.exit(_exit_code(err))

    return wrapper


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.version_option(__version__, prog_name="windndp")
@click.option(
    "-c",
    "--config",
    "config_path",
    type=click.Path(path_type=Path),
    default=None,
    help="YAML experiment config.",
)
@click.option(
    "--profile",
    type=click.Choice(sorted(PROFILES)),
    default=None,
    help="Scale preset applied under the config file.",
)
@click.option(
    "-s",
    "--set",
    "overrides",
    multiple=True,
    metavar="KEY=VALUE",
    help="Override one config entry, e.g. -s train.epochs=3.",
)
@click.pass_context
def main(ctx, config_path, profile, overrides):
    """Train and evaluate diffusion-based predictive models on wind-power
    and synthetic regression tasks."""
    ctx.obj = (config_path, profile, overrides)


def _config(ctx) -> ExperimentConfig:
    config_path, profile, overrides = ctx.obj
    parsed = {}
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} must look like section.key=value")
        key, value = item.split("=", 1)
        parsed[key.strip()] = value.strip()
    return load_config(config_path, profile=profile, overrides=parsed)


def _run_dir(cfg: ExperimentConfig) -> Path:
    """Create the run directory and write back the resolved config."""
    run = Path(cfg.out_dir) / cfg.name
    run.mkdir(parents=True, exist_ok=True)
    cfg.save(run / "config.yaml")
    return run


def _load_dataset(cfg: ExperimentConfig) -> Dataset:
    if not cfg.data.path:
        raise ConfigurationError("data.path must point at an ingested dataset directory")
    return load_dataset(cfg.data.path)


# --------------------------------------------------------------------------
# fetch
# --------------------------------------------------------------------------


@main.command()
@click.option("--extract", is_flag=True, help="Unpack the verified zip archive next to it.")
@click.pass_context
@_handled
def fetch(ctx, extract):
    """Download and digest-check the raw archive.

    The file lands in $WINDNDP_CACHE (default ./cache); a second run with
    the file already present only re-verifies the digest.
    """
    cfg = _config(ctx)
    if not cfg.data.url or not cfg.data.sha256:
        raise ConfigurationError("fetch needs data.url and data.sha256")
    cache = Path(os.environ.get("WINDNDP_CACHE", "cache"))
    name = Path(urlparse(cfg.data.url).path).name or "archive"
    dest = cache / name
    had_file = dest.exists()
    path = fetch_dataset(cfg.data.url, cfg.data.sha256, dest)
    click.echo(f"{'verified' if had_file else 'fetched'} {path} sha256 {cfg.data.sha256}")
    if extract:
        out = dest.parent / dest.stem
        with zipfile.ZipFile(path) as archive:
            archive.extractall(out)
        click.echo(f"extracted to {out}")


# --------------------------------------------------------------------------
# ingest
# --------------------------------------------------------------------------


def _ingest_synthetic(cfg: ExperimentConfig) -> Path:
    d = cfg.data
    spec = SyntheticTaskSpec(
        input_dim=d.input_dim,
        domain=tuple(d.domain),
        signal_variance=d.signal_variance,
        lengthscale=d.lengthscale,
        noise_variance=d.noise_variance,
        offsets=tuple(d.offsets),
        lengthscale_multipliers=(
            tuple(d.lengthscale_multipliers) if d.lengthscale_multipliers is not None else None
        ),
    )
    tables = synthetic_tables(
        spec, d.n_train_functions, d.n_test_functions, d.n_points, d.context_pool, seed=d.seed
    )
    stats = {task: NormalizationStats.identity(d.input_dim) for task in tables}
    extra = {
        "generator": {
            "domain": list(d.domain),
            "signal_variance": d.signal_variance,
            "lengthscale": d.lengthscale,
            "noise_variance": d.noise_variance,
            "offsets": list(d.offsets),
            "lengthscale_multipliers": (
                list(d.lengthscale_multipliers) if d.lengthscale_multipliers is not None else None
            ),
            "n_train_functions": d.n_train_functions,
            "n_test_functions": d.n_test_functions,
            "n_points": d.n_points,
            "context_pool": d.context_pool,
            "seed": d.seed,
        }
    }
    return write_dataset(
        d.path, source="synthetic", input_dim=d.input_dim, tables=tables, stats=stats, extra=extra
    )


_EMPTY_EVENTS = {
    "turbine": pd.Series([], dtype=object),
    "start": pd.Series([], dtype="datetime64[ns]"),
    "end": pd.Series([], dtype="datetime64[ns]"),
    "category": pd.Series([], dtype=object),
}


def _ingest_scada(cfg: ExperimentConfig) -> Path:
    d = cfg.data
    if not d.raw_dir:
        raise ConfigurationError("scada ingest needs data.raw_dir with the raw csv exports")
    raw = Path(d.raw_dir)
    colmap = ScadaColumnMap(**d.scada_columns)
    statmap = StatusColumnMap(**d.status_columns)
    tables, stats, counts, sources = {}, {}, {}, {}
    input_dim = None
    for turbine in d.turbines:
        data_files = sorted(raw.glob(d.data_glob.format(turbine=turbine)))
        if not data_files:
            raise ConfigurationError(
                f"no raw data files for {turbine} under {raw} "
                f"(pattern {d.data_glob.format(turbine=turbine)!r})"
            )
        status_files = sorted(raw.glob(d.status_glob.format(turbine=turbine)))
        records = (
            pd.concat([read_scada_csv(f, colmap, turbine) for f in data_files], ignore_index=True)
            .sort_values("timestamp", kind="stable")
            .reset_index(drop=True)
        )
        if status_files:
            events = pd.concat(
                [read_status_csv(f, statmap, turbine) for f in status_files], ignore_index=True
            )
        else:
            events = pd.DataFrame(_EMPTY_EVENTS)
        kept, fc = filter_records(
            records, events, feature_set=d.feature_set, outage_window_days=d.outage_window_days
        )
        kept = assign_split(kept, ratio=d.split_ratio, seed=d.seed, mode=d.split_mode)
        x, y = build_features(kept, d.feature_set)
        train_mask = (kept["split"] == "train").to_numpy()
        st = fit_stats(x[train_mask], y[train_mask])
        tables[turbine] = scada_table(kept, x, y, st)
        stats[turbine] = st
        counts[turbine] = fc.as_dict()
        sources[turbine] = {f.name: sha256_file(f) for f in [*data_files, *status_files]}
        input_dim = x.shape[1]
        click.echo(
            f"{turbine}: {fc.input_rows} rows -> {fc.retained} retained "
            f"(events {fc.event_overlap}, outage window {fc.outage_window}, "
            f"missing {fc.missing_values})"
        )
    extra = {
        "split": {"ratio": d.split_ratio, "mode": d.split_mode, "seed": d.seed},
        "filter_counts": counts,
        "raw_files": sources,
        "outage_window_days": d.outage_window_days,
    }
    return write_dataset(
        d.path,
        source="scada",
        input_dim=input_dim,
        tables=tables,
        stats=stats,
        feature_set=d.feature_set,
        extra=extra,
    )


@main.command()
@click.pass_context
@_handled
def ingest(ctx):
    """Build a dataset directory (tables, stats, digest manifest).

    Synthetic sources draw the fixed train/test function corpora; turbine
    sources read the raw exports, apply the event/outage/missing-value
    filters, split, and standardize per turbine.
    """
    cfg = _config(ctx)
    if not cfg.data.path:
        raise ConfigurationError("ingest needs data.path (the dataset directory to write)")
    if cfg.data.source == "synthetic":
        root = _ingest_synthetic(cfg)
    else:
        root = _ingest_scada(cfg)
    ds = load_dataset(root)
    for task in ds.task_ids:
        click.echo(f"{task}: {len(ds.tables[task])} rows")
    click.echo(f"dataset {root} digest {dataset_digest(root)}")


# --------------------------------------------------------------------------
# train
# --------------------------------------------------------------------------


def _train_gp(cfg: ExperimentConfig, dataset: Dataset, run: Path):
    tasks = list(cfg.train.train_tasks) or [cfg.eval.task or dataset.task_ids[0]]
    digest = dataset_digest(dataset.root)
    for task in tasks:
        if task not in dataset.tables:
            raise ConfigurationError(f"unknown task {task!r}; dataset has {list(dataset.task_ids)}")
        x, y = dataset.rows(task, "train")
        posterior = fit_gp(
            x,
            y,
            n_restarts=cfg.model.gp_restarts,
            seed=cfg.model.seed,
            max_points=cfg.model.gp_max_points,
        )
        path = save_gp_checkpoint(
            run / f"gp-{task}.npz", posterior, task, meta={"dataset_digest": digest}
        )
        h = posterior.hyper
        click.echo(
            f"{task}: lml {posterior.log_marginal_likelihood:.3f} mean {h.mean:.4f} "
            f"signal {h.signal_variance:.4f} noise {h.noise_variance:.6f} "
            f"lengthscales {np.array2string(h.lengthscales, precision=4)}"
        )
        click.echo(f"checkpoint {path}")


def _train_diffusion(cfg: ExperimentConfig, dataset: Dataset, run: Path):
    m, t = cfg.model, cfg.train
    tasks = list(t.train_tasks) or list(dataset.task_ids)
    schedule = schedule_from_config(m.schedule_config())
    model = init_denoiser(
        m.width, m.layers, m.heads, embed_dim=m.embed_dim, total_steps=m.total_steps, seed=m.seed
    )
    samples, pool_list = training_functions(
        dataset,
        tasks,
        n_functions=t.n_functions,
        n_points=cfg.data.n_points,
        context_pool=t.context_max,
        seed=t.seed,
    )
    encoder = None
    pools = None
    if m.kind == "mt-ndp":
        encoder = init_task_encoder(
            dataset.input_dim + 1,
            output_dim=m.encoder_output,
            width=m.encoder_width,
            depth=m.encoder_depth,
            seed=m.seed + 1,
        )
        pools = pool_list

    state = None
    if t.resume:
        ckpt = load_checkpoint(t.resume)
        if ckpt.kind != m.kind:
            raise ConfigurationError(
                f"resume checkpoint holds a {ckpt.kind!r} model, config says {m.kind!r}"
            )
        state = ckpt.train_state()
        expected = parameter_count(model) + (parameter_count(encoder) if encoder else 0)
        if state.theta.size != expected:
            raise ConfigurationError(
                f"resume checkpoint has {state.theta.size} parameters, "
                f"the configured architecture has {expected}"
            )
        click.echo(f"resuming from {t.resume} at epoch {state.epoch} (step {state.adam.step})")

    trainer_config = TrainerConfig(
        epochs=t.epochs,
        samples_per_epoch=t.samples_per_epoch,
        batch_size=t.batch_size,
        ema_decay=t.ema_decay,
        context_max=t.context_max,
        seed=t.seed,
        lr=LrSchedule(
            base_lr=t.base_lr,
            warmup_start=t.warmup_start,
            warmup_epochs=t.warmup_epochs,
            decay_epochs=t.decay_epochs,
            final_lr=t.final_lr,
        ),
    )

    def _progress(epoch, batch, loss, lr):
        if batch == 0:
            click.echo(f"epoch {epoch}: loss {loss:.6f} lr {lr:.2e}")

    result = train(
        model,
        schedule,
        samples,
        trainer_config,
        encoder=encoder,
        context_pools=pools,
        state=state,
        callback=_progress,
    )
    ckpt_path = save_training_checkpoint(
        run / "checkpoint.npz",
        model=model,
        schedule=schedule,
        state=result.state(),
        encoder=encoder,
        meta={
            "dataset_digest": dataset_digest(dataset.root),
            "tasks": list(tasks),
            "profile": cfg.profile,
        },
    )
    log_path = write_training_log(result.history, run / "training_log.csv")
    if result.history:
        last = result.history[-1][0]
        final_loss = float(np.mean([loss for e, _, loss, _ in result.history if e == last]))
        click.echo(
            f"trained {m.kind} to epoch {result.epoch}; final-epoch mean loss {final_loss:.6f}"
        )
    else:
        click.echo(f"nothing to do: resumed state already at epoch {result.epoch}")
    click.echo(f"checkpoint {ckpt_path}")
    click.echo(f"training log {log_path}")


@main.command(name="train")
@click.pass_context
@_handled
def train_cmd(ctx):
    """Fit a model on an ingested dataset and checkpoint it into the run
    directory (resumable for the diffusion models via train.resume)."""
    cfg = _config(ctx)
    dataset = _load_dataset(cfg)
    run = _run_dir(cfg)
    if cfg.model.kind == "gp":
        _train_gp(cfg, dataset, run)
    else:
        _train_diffusion(cfg, dataset, run)


# --------------------------------------------------------------------------
# evaluate
# --------------------------------------------------------------------------


def _export_report_tables(report: MetricsReport, figdir: Path, tag: str):
    figdir.mkdir(parents=True, exist_ok=True)
    report.frame().to_csv(figdir / f"metrics-{tag}.csv", index=False)
    rows = []
    for cs in report.context_sizes:
        levels, observed = report.coverage_curve(cs)
        for q, c in zip(levels, observed):
            rows.append({"context_size": cs, "nominal": float(q), "observed": float(c)})
    pd.DataFrame(rows).to_csv(figdir / f"coverage-{tag}.csv", index=False)
    save_svg(coverage_figure(report), figdir / f"coverage-{tag}.svg")
    save_svg(error_vs_context_figure([report]), figdir / f"mae-{tag}.svg")


@main.command()
@click.pass_context
@_handled
def evaluate(ctx):
    """Score a checkpoint on held-out functions across context sizes.

    All models see identical evaluation fixtures for a given dataset, task
    and seed; reports land as evaluation-<model>-<task>.json plus csv/svg
    exports under figures/.
    """
    cfg = _config(ctx)
    dataset = _load_dataset(cfg)
    run = _run_dir(cfg)
    task = cfg.eval.task or dataset.task_ids[0]
    if task not in dataset.tables:
        raise ConfigurationError(f"unknown task {task!r}; dataset has {list(dataset.task_ids)}")
    if cfg.eval.checkpoint:
        ckpt_path = Path(cfg.eval.checkpoint)
    elif cfg.model.kind == "gp":
        ckpt_path = run / f"gp-{task}.npz"
    else:
        ckpt_path = run / "checkpoint.npz"
    ckpt = load_checkpoint(ckpt_path)

    context_sizes = tuple(int(c) for c in cfg.eval.context_sizes)
    samples, contexts = eval_fixtures(
        dataset,
        task,
        n_test=cfg.eval.n_test,
        n_points=cfg.eval.n_points,
        context_pool=max(context_sizes),
        seed=cfg.eval.seed,
    )
    if ckpt.kind == "gp":
        adapter = GpAdapter(restore_gp(ckpt), include_noise=cfg.model.gp_include_noise)
    else:
        model, encoder, schedule = restore_denoiser(ckpt, weights="ema")
        adapter = DiffusionAdapter(
            model, schedule, encoder=encoder, n_trajectories=cfg.eval.n_trajectories
        )
    report = evaluate_protocol(
        adapter,
        samples,
        contexts,
        context_sizes,
        stats=dataset.stats[task],
        seed=cfg.eval.seed,
        feature_set=dataset.feature_set,
        meta={
            "task": task,
            "checkpoint": str(ckpt_path),
            "checkpoint_digest": sha256_file(ckpt_path),
            "dataset_digest": dataset_digest(dataset.root),
        },
    )
    out = report.save(run / f"evaluation-{adapter.name}-{task}.json")
    _export_report_tables(report, run / "figures", f"{adapter.name}-{task}")
    unit = " kW" if dataset.source == "scada" else ""
    for cs in context_sizes:
        agg = report.aggregate(cs)
        click.echo(
            f"context {cs:>3}: MAE{unit} {agg['mae_mean']:.4f} +- {agg['mae_std']:.4f}  "
            f"RMSE{unit} {agg['rmse_mean']:.4f} +- {agg['rmse_std']:.4f}  "
            f"CE {agg['ce_mean']:.4f}"
        )
    click.echo(f"report {out}")


# --------------------------------------------------------------------------
# encoder analysis
# --------------------------------------------------------------------------


@main.command("encoder-analysis")
@click.pass_context
@_handled
def encoder_analysis(ctx):
    """Project task embeddings per context-size bucket and score how far
    apart the task clusters sit (between/within variance ratio)."""
    cfg = _config(ctx)
    dataset = _load_dataset(cfg)
    run = _run_dir(cfg)
    ckpt_path = Path(cfg.eval.checkpoint) if cfg.eval.checkpoint else run / "checkpoint.npz"
    ckpt = load_checkpoint(ckpt_path)
    if ckpt.kind != "mt-ndp":
        raise ConfigurationError(
            f"encoder analysis needs an mt-ndp checkpoint, got {ckpt.kind!r}"
        )
    _, encoder, _ = restore_denoiser(ckpt, weights="ema")
    if len(dataset.task_ids) < 2:
        raise ConfigurationError("encoder analysis needs a dataset with at least two tasks")
    pools = {task: dataset.rows(task, "train") for task in dataset.task_ids}
    buckets = tuple(tuple(int(v) for v in b) for b in cfg.eval.buckets)
    results = encoder_separation(
        encoder, pools, buckets=buckets, draws_per_task=cfg.eval.draws_per_task, seed=cfg.eval.seed
    )
    figdir = run / "figures"
    figdir.mkdir(parents=True, exist_ok=True)
    payload = {}
    for key, entry in results.items():
        proj = entry["projection"]
        payload[key] = {
            "bucket": list(entry["bucket"]),
            "separation_ratio": float(entry["ratio"]),
            "explained_variance_ratio": [float(v) for v in proj.explained_variance_ratio],
            "n_points": len(proj.labels),
            "degenerate": bool(proj.degenerate),
        }
        table = pd.DataFrame(
            {
                "task": list(proj.labels),
                "pc1": proj.points[:, 0],
                "pc2": proj.points[:, 1] if proj.points.shape[1] > 1 else 0.0,
            }
        )
        table.to_csv(figdir / f"embeddings-{key}.csv", index=False)
        save_svg(embedding_figure(proj, title=f"contexts {key}"), figdir / f"embeddings-{key}.svg")
        click.echo(f"bucket {key}: separation ratio {entry['ratio']:.3f}")
    out = run / "analysis.json"
    out.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    click.echo(f"analysis {out}")


# --------------------------------------------------------------------------
# report
# --------------------------------------------------------------------------


@main.command()
@click.argument("run_dirs", nargs=-1, type=click.Path(path_type=Path))
@click.pass_context
@_handled
def report(ctx, run_dirs):
    """Merge evaluation outputs into one comparison report.

    Reads every evaluation-*.json under the given run directories (default:
    the configured run directory) and writes report.json, comparison.csv and
    comparison figures into the first one. Re-running on the same inputs
    reproduces the outputs byte for byte.
    """
    cfg = _config(ctx)
    dirs = [Path(d) for d in run_dirs] or [Path(cfg.out_dir) / cfg.name]
    eval_files = sorted(p for d in dirs for p in d.glob("evaluation-*.json"))
    if not eval_files:
        raise ConfigurationError(
            f"no evaluation reports under {', '.join(str(d) for d in dirs)}"
        )
    reports = [MetricsReport.load(p) for p in eval_files]
    out_dir = dirs[0]
    rows = []
    for rep in reports:
        for cs in rep.context_sizes:
            agg = rep.aggregate(cs)
            rows.append(
                {
                    "model": rep.model,
                    "task": rep.meta.get("task", ""),
                    "feature_set": rep.feature_set or "",
                    "context_size": cs,
                    "mae_mean": agg["mae_mean"],
                    "mae_std": agg["mae_std"],
                    "rmse_mean": agg["rmse_mean"],
                    "rmse_std": agg["rmse_std"],
                    "ce_mean": agg["ce_mean"],
                    "ce_std": agg["ce_std"],
                    "n_samples": agg["n_samples"],
                }
            )
    comparison = (
        pd.DataFrame(rows)
        .sort_values(["model", "task", "context_size"], kind="mergesort")
        .reset_index(drop=True)
    )
    comparison.to_csv(out_dir / "comparison.csv", index=False)
    payload = {"reports": [rep.to_dict() for rep in reports]}
    analysis = out_dir / "analysis.json"
    if analysis.exists():
        payload["encoder_analysis"] = json.loads(analysis.read_text())
    report_path = out_dir / "report.json"
    report_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    figdir = out_dir / "figures"
    save_svg(error_vs_context_figure(reports, "mae"), figdir / "comparison-mae.svg")
    save_svg(error_vs_context_figure(reports, "ce"), figdir / "comparison-ce.svg")
    click.echo(comparison.to_string(index=False))
    click.echo(f"report {report_path}")


if __name__ == "__main__":
    main()
