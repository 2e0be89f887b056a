#!/usr/bin/env python3
"""
MixFT command line
synth -> pretrain -> fit-gmm / finetune -> forecast / evaluate / select-k / ablate / timeline
"""

import functools
import sys
from pathlib import Path
from typing import Dict, List

import click
import numpy as np
import pandas as pd
import structlog
from dotenv import load_dotenv

from base_forecaster import embed_batch, init_model, load_model, pretrain, save_model
from bayesian_mixture import default_prior, fit_vi, save_posterior
from evaluation_kit import (RankTable, ReportWriter, component_examples, entropy_report,
                            membership_timeline, records_table)
from log_setup import LOG_FORMATS, configure_logging
from mixft_errors import MissingArtifactError, MixftError
from mixft_pipeline import (MixftArtifact, RoutingMode, adapter_method, base_method, finetune,
                            forecast_batch, load_artifact, mixft_method, mu_method,
                            other_component_method, per_dataset_baseline, save_artifact,
                            score_methods, select_k, shared_baseline, sweep_k)
from run_config import RunConfig, load_config
from series_data import (Corpus, ingest_csv, load_corpus, save_corpus, stack_windows,
                         window_corpus)
from synthetic_regimes import desk_corpora
from tensor_store import read_json, sha256_directory, sha256_file, write_json

logger = structlog.get_logger(__name__)


def handle_errors(command):
    """Report MixFT failures and exit with their code"""
    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except MixftError as e:
            click.echo(f"❌ {type(e).__name__}: {e}", err=True)
            sys.exit(e.exit_code)
    return wrapper


def _cfg(ctx) -> RunConfig:
    return ctx.obj["config"]


def _require(path: Path) -> Path:
    if not path.exists():
        raise MissingArtifactError(path)
    return path


def _write_manifest(directory: Path, command: str, cfg: RunConfig, inputs: Dict[str, Path],
                    extra: Dict = None) -> None:
    """Command manifest: config hash, seeds and a hash of every input"""
    hashes = {}
    for name, path in sorted(inputs.items()):
        hashes[name] = sha256_directory(path) if path.is_dir() else sha256_file(path)
    payload = {"command": command, "config_hash": cfg.config_hash, "seeds": cfg.seeds,
               "inputs": hashes}
    payload.update(extra or {})
    write_json(directory / f"{command}_manifest.json", payload)
    cfg.save(directory / f"{command}_config.txt")


def _corpora(cfg: RunConfig, group: str) -> List[Corpus]:
    root = _require(cfg.path("corpus_dir"))
    names = _load_index(root)[group]
    return [load_corpus(_require(root / group / name)) for name in names]


def _load_index(root: Path) -> Dict[str, List[str]]:
    return read_json(root / "index.json")


def _base_model_dir(cfg: RunConfig) -> Path:
    return cfg.path("artifact_dir") / "base_model"


def _artifact_dir(cfg: RunConfig, seed: int, partitioner: str = None, k: int = None) -> Path:
    partitioner = partitioner or cfg["mixture.partitioner"]
    k = cfg["mixture.k"] if k is None else k
    return cfg.path("artifact_dir") / f"mixft_{partitioner}_k{k}_seed{seed}"


def _artifact(cfg: RunConfig, seed: int, finetune_corpora, replay, partitioner: str = None,
              k: int = None) -> MixftArtifact:
    """Load the artifact for (partitioner, K, seed), tuning and saving it first if absent"""
    directory = _artifact_dir(cfg, seed, partitioner, k)
    if (directory / "manifest.json").exists():
        return load_artifact(directory, _base_model_dir(cfg))
    model = load_model(_require(_base_model_dir(cfg)))
    k = cfg["mixture.k"] if k is None else k
    artifact = finetune(finetune_corpora, model, k, cfg.finetune_settings(seed, partitioner), replay)
    save_artifact(artifact, directory, _base_model_dir(cfg))
    return artifact


@click.group()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
              help="section.key=value config file")
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
              help="Override one config key (repeatable)")
@click.option("--seed", type=int, default=None, help="Run a single seed")
@click.option("--threads", type=int, default=None, help="Cap worker threads")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None,
              help="Root directory for corpora, artifacts and reports")
@click.option("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR")
@click.option("--log-format", type=click.Choice(LOG_FORMATS), default=None)
@click.pass_context
@handle_errors
def cli(ctx, config_path, overrides, seed, threads, out_dir, log_level, log_format):
    """MixFT: sub-domain fine-tuning of a forecaster with a Bayesian mixture of adapters"""
    load_dotenv()
    configure_logging(log_level, log_format)
    ctx.ensure_object(dict)
    ctx.obj["config"] = load_config(config_path, overrides, out_dir, seed, threads)


@cli.command()
@click.pass_context
@handle_errors
def synth(ctx):
    """Generate the labeled synthetic corpora"""
    cfg = _cfg(ctx)
    corpora = desk_corpora(
        seed=cfg.seeds[0],
        series_per_dataset=cfg["synth.series_per_dataset"],
        length=cfg["synth.length"],
        segment_length=cfg["synth.segment_length"],
        pretrain_series=cfg["pretrain.num_series"],
        pretrain_length=cfg["pretrain.length"],
    )
    root = cfg.path("corpus_dir")
    save_corpus(corpora.pretrain, root / "pretrain" / corpora.pretrain.name)
    for corpus in corpora.finetune:
        save_corpus(corpus, root / "finetune" / corpus.name)
    for corpus in corpora.evaluation:
        save_corpus(corpus, root / "evaluation" / corpus.name)
    write_json(root / "index.json", {
        "pretrain": [corpora.pretrain.name],
        "finetune": [c.name for c in corpora.finetune],
        "evaluation": [c.name for c in corpora.evaluation],
    })
    _write_manifest(root, "synth", cfg, {})
    click.echo(f"✅ Corpora written to {root}")


@cli.command("pretrain")
@click.pass_context
@handle_errors
def pretrain_command(ctx):
    """Pretrain the base forecaster on the pretraining corpus"""
    cfg = _cfg(ctx)
    [corpus] = _corpora(cfg, "pretrain")
    windows = window_corpus(corpus, cfg.window_spec())
    model_cfg = cfg.model_config()
    model, trace = pretrain(init_model(model_cfg), windows, cfg.optimizer_config("pretrain"),
                            np.random.default_rng(model_cfg.seed))
    directory = save_model(model, _base_model_dir(cfg))
    _write_manifest(directory, "pretrain", cfg, {"corpus": cfg.path("corpus_dir") / "pretrain"},
                    {"final_loss": trace[-1] if trace else None})
    click.echo(f"✅ Base model saved to {directory} ({model.parameter_count} parameters)")


@cli.command("fit-gmm")
@click.pass_context
@handle_errors
def fit_gmm(ctx):
    """Fit only the Bayesian mixture over fine-tuning embeddings"""
    cfg = _cfg(ctx)
    model = load_model(_require(_base_model_dir(cfg)))
    windows = [w for c in _corpora(cfg, "finetune") for w in window_corpus(c, cfg.window_spec())]
    contexts, _ = stack_windows(windows)
    Z = embed_batch(model, contexts)
    K = cfg["mixture.k"]
    fit = fit_vi(Z, K, default_prior(Z, K), cfg["mixture.max_iters"], cfg["mixture.tol"],
                 init_seed=cfg.seeds[0])
    directory = save_posterior(fit.posterior, cfg.path("artifact_dir") / f"gmm_k{K}")
    ReportWriter(cfg.path("report_dir")).write_elbo(fit.posterior.elbo_trace)
    _write_manifest(directory, "fit-gmm", cfg, {"base_model": _base_model_dir(cfg)},
                    {"iterations": fit.posterior.iterations, "elbo": fit.posterior.elbo_trace[-1]})
    click.echo(f"✅ Mixture fitted in {fit.posterior.iterations} iterations, "
               f"sizes {np.round(fit.responsibilities.sum(axis=0), 1).tolist()}")


@cli.command("finetune")
@click.pass_context
@handle_errors
def finetune_command(ctx):
    """Tune one MixFT artifact per seed"""
    cfg = _cfg(ctx)
    corpora = _corpora(cfg, "finetune")
    [replay] = _corpora(cfg, "pretrain")
    for seed in cfg.seeds:
        artifact = _artifact(cfg, seed, corpora, replay)
        directory = _artifact_dir(cfg, seed)
        _write_manifest(directory, "finetune", cfg,
                        {"base_model": _base_model_dir(cfg),
                         "finetune": cfg.path("corpus_dir") / "finetune"},
                        {"seed": seed, "partition_sizes": artifact.manifest.get("partition_sizes")})
        click.echo(f"✅ Seed {seed}: {artifact.num_components} adapters saved to {directory}")


@cli.command("forecast")
@click.option("--input", "input_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="CSV series; its last L values per channel are forecast")
@click.option("--seasonality", type=int, default=1)
@click.option("--mode", type=click.Choice([m.value for m in RoutingMode]), default=None)
@click.pass_context
@handle_errors
def forecast_command(ctx, input_path, seasonality, mode):
    """Forecast the end of a series with a tuned artifact"""
    cfg = _cfg(ctx)
    seed = cfg.seeds[0]
    directory = _require(_artifact_dir(cfg, seed))
    artifact = load_artifact(directory, _base_model_dir(cfg))
    mode = RoutingMode.parse(mode or cfg.routing)

    if input_path:
        series = ingest_csv(input_path, seasonality)
    else:
        series = _corpora(cfg, "evaluation")[0].series[0]
    L = artifact.model.config.context_length
    contexts = series.values[-L:, :].T
    result = forecast_batch(artifact, contexts, mode)

    rows = [{"channel": c, "step": h + 1, "value": float(result.forecasts[c, h])}
            for c in range(result.forecasts.shape[0]) for h in range(result.forecasts.shape[1])]
    out = cfg.path("report_dir")
    out.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(rows).to_csv(out / f"forecast_{series.id}_{mode.value}.csv", index=False,
                              float_format="%.10g", lineterminator="\n")
    inputs = {"artifact": directory}
    if input_path:
        inputs["input"] = Path(input_path)
    _write_manifest(out, "forecast", cfg, inputs,
                    {"mode": mode.value, "chosen": result.chosen.tolist(),
                     "probs": result.probs.tolist(), "forward_passes": result.cost.forward_passes,
                     "adapters_used": result.cost.adapters_used})
    click.echo(f"✅ Forecast ({mode.value}) for {series.id}: components {result.chosen.tolist()}")


def _methods(cfg: RunConfig, seed: int, corpora, replay):
    model = load_model(_require(_base_model_dir(cfg)))
    settings = cfg.finetune_settings(seed)
    artifact = _artifact(cfg, seed, corpora, replay)
    methods = [
        base_method(model),
        adapter_method("Shared", model, shared_baseline(corpora, model, settings, replay)),
        mu_method("mu-Datasets", model, per_dataset_baseline(corpora, model, settings, replay),
                  settings.average_level),
        mixft_method("MixFT", artifact, cfg.routing),
    ]
    return methods, artifact


@cli.command()
@click.option("--scores", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Wide MASE table (method column plus one column per dataset) to rank directly")
@click.pass_context
@handle_errors
def evaluate(ctx, scores):
    """Score Base, Shared, mu-Datasets and MixFT on the evaluation corpora"""
    cfg = _cfg(ctx)
    writer = ReportWriter(cfg.path("report_dir"))

    if scores:
        table = RankTable.from_csv(scores)
        writer.write_ranks(table)
        _write_manifest(writer.directory, "evaluate", cfg, {"scores": Path(scores)})
        writer.write_readme(cfg.config_hash, cfg.seeds)
        for method, rank in zip(table.methods, table.average_ranks()):
            click.echo(f"   {method}: {rank:.2f}")
        return

    finetune_corpora = _corpora(cfg, "finetune")
    eval_corpora = _corpora(cfg, "evaluation")
    [replay] = _corpora(cfg, "pretrain")

    records, first_artifact = {}, None
    for seed in cfg.seeds:
        methods, artifact = _methods(cfg, seed, finetune_corpora, replay)
        first_artifact = first_artifact or artifact
        score_methods(methods, eval_corpora, cfg.window_spec(), cfg["window.eval_stride"], seed, records)

    ordered = list(records.values())
    table = records_table(ordered)
    writer.write_mase(ordered)
    writer.write_ranks(table)
    writer.write_entropy(entropy_report(first_artifact, eval_corpora, cfg.window_spec(),
                                        cfg["window.eval_stride"]))
    if first_artifact.posterior is not None:
        writer.write_elbo(first_artifact.posterior.elbo_trace)
    _write_manifest(writer.directory, "evaluate", cfg,
                    {"corpora": cfg.path("corpus_dir"), "base_model": _base_model_dir(cfg)})
    writer.write_readme(cfg.config_hash, cfg.seeds)

    if table.excluded:
        click.echo(f"⚠️ {len(table.excluded)} dataset(s) left out of ranking: {', '.join(table.excluded)}")
    for method, rank in zip(table.methods, table.average_ranks()):
        click.echo(f"   {method}: average rank {rank:.2f}")
    click.echo(f"✅ Report written to {writer.directory}")


@cli.command("select-k")
@click.pass_context
@handle_errors
def select_k_command(ctx):
    """Choose K by average validation rank on the held-out end of each fine-tuning dataset"""
    cfg = _cfg(ctx)
    model = load_model(_require(_base_model_dir(cfg)))
    corpora = _corpora(cfg, "finetune")
    [replay] = _corpora(cfg, "pretrain")

    rows, chosen = [], []
    for seed in cfg.seeds:
        selection = select_k(corpora, model, cfg["mixture.candidate_ks"],
                             cfg.finetune_settings(seed), replay, cfg["pipeline.validation_fraction"])
        chosen.append(selection.chosen)
        rows.extend({"seed": seed, "K": k, "average_rank": rank}
                    for k, rank in selection.average_ranks.items())
        click.echo(f"   seed {seed}: K={selection.chosen}")
        if selection.excluded:
            click.echo(f"⚠️ seed {seed}: {len(selection.excluded)} dataset(s) excluded: "
                       f"{', '.join(selection.excluded)}")

    out = cfg.path("report_dir")
    out.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(rows).to_csv(out / "k_selection.csv", index=False, float_format="%.10g",
                              lineterminator="\n")
    _write_manifest(out, "select-k", cfg, {"base_model": _base_model_dir(cfg)}, {"chosen": chosen})
    click.echo(f"✅ Selected K per seed: {chosen}")


@cli.command()
@click.option("--examples", "per_component", type=click.IntRange(min=1), default=3, show_default=True,
              help="Example contexts written per sub-domain")
@click.pass_context
@handle_errors
def ablate(ctx, per_component):
    """Every routing mode, both partitioners, other-component forecasts and a K sweep"""
    cfg = _cfg(ctx)
    finetune_corpora = _corpora(cfg, "finetune")
    eval_corpora = _corpora(cfg, "evaluation")
    [replay] = _corpora(cfg, "pretrain")
    spec, stride = cfg.window_spec(), cfg["window.eval_stride"]

    routing_records, sweep_tables, examples = {}, [], None
    for seed in cfg.seeds:
        vi = _artifact(cfg, seed, finetune_corpora, replay, "vi")
        km = _artifact(cfg, seed, finetune_corpora, replay, "kmeans")
        methods = [mixft_method(f"MixFT-{mode.value}", vi, mode) for mode in RoutingMode]
        methods.append(mixft_method("MixFT-kmeans", km, RoutingMode.HARD))
        if vi.num_components > 1:
            methods.append(other_component_method("MixFT-other", vi))
        score_methods(methods, eval_corpora, spec, stride, seed, routing_records)
        if examples is None:
            examples = component_examples(vi, eval_corpora, spec, per_component, stride)

        model = vi.model
        sweep = sweep_k(finetune_corpora, eval_corpora, model, cfg["mixture.sweep_ks"],
                        cfg.finetune_settings(seed), replay, RoutingMode.HARD, stride)
        sweep_tables.append(sweep.table)

    routing_writer = ReportWriter(cfg.path("report_dir") / "ablation")
    ordered = list(routing_records.values())
    routing_writer.write_mase(ordered)
    routing_writer.write_ranks(records_table(ordered))
    routing_writer.write_component_examples(examples)
    routing_writer.write_readme(cfg.config_hash, cfg.seeds)
    if vi.num_components < 2:
        click.echo("⚠️ K = 1: no other-component forecasts to score")

    sweep_writer = ReportWriter(cfg.path("report_dir") / "k_sweep")
    mean_scores = np.mean([t.scores for t in sweep_tables], axis=0)
    sweep_table = RankTable(sweep_tables[0].methods, sweep_tables[0].datasets, mean_scores,
                            sweep_tables[0].excluded)
    sweep_writer.write_ranks(sweep_table)
    for seed, table in zip(cfg.seeds, sweep_tables):
        sweep_writer.write_ranks(table, f"ranks_seed{seed}.csv")
    sweep_writer.write_readme(cfg.config_hash, cfg.seeds)

    _write_manifest(cfg.path("report_dir"), "ablate", cfg,
                    {"corpora": cfg.path("corpus_dir"), "base_model": _base_model_dir(cfg)})
    click.echo(f"✅ Ablation written; best K by sweep: {sweep_table.best()}")


@cli.command()
@click.option("--series", "series_ids", multiple=True, help="Series id (default: every series)")
@click.option("--channel", type=int, default=0)
@click.pass_context
@handle_errors
def timeline(ctx, series_ids, channel):
    """Sub-domain membership over time for fine-tuning and evaluation series"""
    cfg = _cfg(ctx)
    seed = cfg.seeds[0]
    directory = _require(_artifact_dir(cfg, seed))
    artifact = load_artifact(directory, _base_model_dir(cfg))
    writer = ReportWriter(cfg.path("report_dir") / "timelines")

    count = 0
    for corpus in _corpora(cfg, "finetune") + _corpora(cfg, "evaluation"):
        for series in corpus.series:
            if series_ids and series.id not in series_ids:
                continue
            writer.write_timeline(membership_timeline(artifact, series, channel))
            count += 1
    _write_manifest(writer.directory, "timeline", cfg, {"artifact": directory})
    writer.write_readme(cfg.config_hash, cfg.seeds)
    click.echo(f"✅ {count} timelines written to {writer.directory}")


if __name__ == "__main__":
    cli()
