"""Command-line entry point: `python holmes.py <subcommand> ...`."""
import asyncio
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import click
from pydantic import BaseModel

from artifacts import annotation_stats, read_annotations, read_feature_dir, read_ground_truth, read_scores, write_scores
from config import PipelineConfig, config_hash, load_config, settings
from errors import ConfigParseError, GradientCheckFailed, IoFailure, ResourceFailure, SchemaViolation, ValidationFailure
from event_engine import CorpusItem, build_corpus, export_jsonl, load_template_pool, proposals_for
from logger import configure_logging
from metrics import evaluate_scores, frame_level, pr_curve_points, roc_curve_points
from models import GlanceSet, ScoreSeries, is_normal
from pseudo_label import update_pseudo_labels
from reports import write_json, write_report, write_table
from sampler import decide
from scorer import load_checkpoint, save_checkpoint, score_streams
from synthbench import EXPERIMENTS, SynthSpec, experiment_config, gen_corpus, load_spec, run_experiment, write_corpus
from trainer import LabeledStream, fit, gradient_check

logger = logging.getLogger("holmes")


class RunReport(BaseModel):
    command: str
    config_hash: str
    seed: int
    result: Dict[str, Any]


def _resolve(ctx: click.Context, **overrides) -> PipelineConfig:
    cfg, client = load_config(ctx.obj["config_path"], overrides)
    ctx.obj["client"] = client
    return cfg


def _echo_json(payload: Any) -> None:
    click.echo(json.dumps(payload, indent=2, sort_keys=True, default=str))


def _read_split(path: Optional[str], subset: str) -> Optional[set]:
    if not path:
        return None
    try:
        return set(json.loads(Path(path).read_text(encoding="utf-8"))[subset])
    except (OSError, json.JSONDecodeError, KeyError) as e:
        raise IoFailure(f"cannot read '{subset}' ids from split file {path}: {e}") from e


def _load_streams(features: str, split: Optional[str], subset: str):
    streams = read_feature_dir(features)
    wanted = _read_split(split, subset)
    if wanted is not None:
        streams = [s for s in streams if s.video_id in wanted]
    return streams


def _scores_by_id(path: str) -> Dict[str, ScoreSeries]:
    return {s.video_id: s for s in read_scores(path)}


def _corpus_items(scores: Dict[str, ScoreSeries], annotations: List[GlanceSet]) -> List[CorpusItem]:
    items = []
    for glances in annotations:
        series = scores.get(glances.video_id)
        if series is None:
            raise SchemaViolation(f"no score series for annotated video {glances.video_id}")
        glances.check_bounds(len(series))
        items.append(CorpusItem(
            video_id=glances.video_id,
            label=glances.anomaly_class,
            snippet_count=len(series),
            scores=series,
            glances=glances,
        ))
    return items


@click.group()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="TOML or JSON config file.")
@click.option("--log-level", default=None, help="Overrides HOLMES_LOG_LEVEL.")
@click.option("--log-file", default=None, help="Also log to this file.")
@click.pass_context
def cli(ctx, config_path, log_level, log_file):
    """Glance-supervised video anomaly detection toolkit."""
    configure_logging(log_level or settings.log_level, log_file or settings.log_file)
    ctx.ensure_object(dict)
    ctx.obj["config_path"] = config_path


@cli.command()
@click.option("--spec", "spec_path", type=click.Path(dir_okay=False), help="Synthetic corpus spec (JSON).")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--seed", type=int, default=None)
def synth(spec_path, out, seed):
    """Generate a synthetic corpus on disk."""
    spec = load_spec(spec_path)
    if seed is not None:
        spec = SynthSpec(**{**spec.model_dump(), "rng_seed": seed})
    corpus = gen_corpus(spec)
    write_corpus(corpus, out)
    _echo_json({"out": out, "videos": len(corpus.streams), "train": len(corpus.train_ids),
                "test": len(corpus.test_ids), "seed": spec.rng_seed})


@cli.command()
@click.option("--features", required=True, type=click.Path(file_okay=False))
@click.option("--annotations", required=True, type=click.Path(dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Checkpoint path.")
@click.option("--split", type=click.Path(dir_okay=False), help="split.json limiting the training videos.")
@click.option("--subset", default="train", show_default=True)
@click.option("--loss-log", type=click.Path(dir_okay=False), help="Per-epoch loss CSV (default: <out>.loss.csv).")
@click.option("--epochs", type=int, default=None)
@click.option("--lr", "learning_rate", type=float, default=None)
@click.option("--seed", "rng_seed", type=int, default=None)
@click.pass_context
def train(ctx, features, annotations, out, split, subset, loss_log, **overrides):
    """Train the scorer and write a checkpoint."""
    cfg = _resolve(ctx, **overrides)
    glances = {g.video_id: g for g in read_annotations(annotations)}
    dataset = []
    for stream in _load_streams(features, split, subset):
        annotation = glances.get(stream.video_id)
        if annotation is None:
            if stream.is_anomalous:
                raise SchemaViolation(f"anomalous stream {stream.video_id} has no annotation")
            annotation = GlanceSet(video_id=stream.video_id, anomaly_class=stream.anomaly_class)
        dataset.append(LabeledStream(stream=stream, glances=annotation))

    model, log = fit(dataset, cfg)
    save_checkpoint(model, out)
    loss_path = loss_log or str(Path(out).with_suffix(".loss.csv"))
    write_table([e.model_dump() for e in log.epochs], loss_path, log.config_hash, log.seed)
    final = log.epochs[-1].total if log.epochs else None
    _echo_json({"checkpoint": out, "loss_log": loss_path, "config_hash": log.config_hash,
                "seed": log.seed, "final_loss": final})


@cli.command()
@click.option("--checkpoint", required=True, type=click.Path(dir_okay=False))
@click.option("--features", required=True, type=click.Path(file_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--split", type=click.Path(dir_okay=False))
@click.option("--subset", default="test", show_default=True)
def score(checkpoint, features, out, split, subset):
    """Score feature streams with a trained checkpoint."""
    model = load_checkpoint(checkpoint)
    series = score_streams(model, _load_streams(features, split, subset))
    write_scores(series, out)
    _echo_json({"scores": out, "videos": len(series), "config_hash": model.config_hash, "seed": model.seed})


@cli.command("mine-labels")
@click.option("--scores", required=True, type=click.Path(dir_okay=False))
@click.option("--annotations", required=True, type=click.Path(dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--alpha", type=float, default=None)
@click.option("--r", "--smoothing-ratio", "smoothing_ratio", type=float, default=None)
@click.pass_context
def mine_labels(ctx, scores, annotations, out, alpha, smoothing_ratio):
    """Refine glances into smoothed pseudo labels."""
    cfg = _resolve(ctx, alpha=alpha, smoothing_ratio=smoothing_ratio)
    by_id = _scores_by_id(scores)
    labels = []
    for glances in read_annotations(annotations):
        if is_normal(glances.anomaly_class):
            continue
        series = by_id.get(glances.video_id)
        if series is None:
            raise SchemaViolation(f"no score series for annotated video {glances.video_id}")
        labels.append(update_pseudo_labels(series, glances, cfg).as_scores())
    write_scores(labels, out)
    _echo_json({"pseudo_labels": out, "videos": len(labels), "config_hash": config_hash(cfg), "seed": cfg.rng_seed})


@cli.command()
@click.option("--scores", required=True, type=click.Path(dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--theta", type=float, default=None)
@click.option("--m", "fallback_frames", type=int, default=None)
@click.option("--max-frames", type=int, default=None)
@click.pass_context
def sample(ctx, scores, out, theta, fallback_frames, max_frames):
    """Select snippets for downstream analysis."""
    cfg = _resolve(ctx, theta=theta, fallback_frames=fallback_frames, max_frames=max_frames)
    decisions = [
        decide(series, cfg.theta, cfg.fallback_frames, cfg.max_frames) for series in read_scores(scores)
    ]
    report = RunReport(
        command="sample",
        config_hash=config_hash(cfg),
        seed=cfg.rng_seed,
        result={"decisions": [d.model_dump(mode="json", include={"video_id", "verdict", "indices"}) for d in decisions]},
    )
    write_json(report, out)
    forwarded = sum(len(d.indices) for d in decisions)
    total = sum(d.snippet_count for d in decisions)
    _echo_json({"decisions": out, "videos": len(decisions), "forwarded": forwarded, "snippets": total})


@cli.command()
@click.option("--scores", required=True, type=click.Path(dir_okay=False))
@click.option("--annotations", required=True, type=click.Path(dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.pass_context
def propose(ctx, scores, annotations, out):
    """Write event proposals (abnormal) and random clips (normal) as JSON lines."""
    cfg = _resolve(ctx)
    items = _corpus_items(_scores_by_id(scores), read_annotations(annotations))
    proposals = [p for index, item in enumerate(items) for p in proposals_for(item, index, cfg)]
    try:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text("".join(p.model_dump_json() + "\n" for p in proposals), encoding="utf-8")
    except OSError as e:
        raise IoFailure(f"cannot write {out}: {e}") from e
    _echo_json({"proposals": out, "count": len(proposals), "config_hash": config_hash(cfg), "seed": cfg.rng_seed})


@cli.command("build-instructions")
@click.option("--scores", required=True, type=click.Path(dir_okay=False))
@click.option("--annotations", required=True, type=click.Path(dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--endpoint", default=None, help="Live text-generation endpoint (also HOLMES_ENDPOINT).")
@click.option("--mock", is_flag=True, help="Use the offline mock clients.")
@click.option("--templates", type=click.Path(dir_okay=False), default=None)
@click.option("--report", type=click.Path(dir_okay=False), default=None)
@click.pass_context
def build_instructions(ctx, scores, annotations, out, endpoint, mock, templates, report):
    """Caption proposals and build instruction records."""
    if mock and endpoint:
        raise click.UsageError("--endpoint and --mock are mutually exclusive")
    mode = "mock" if mock else ("live" if endpoint else None)
    cfg = _resolve(ctx, **{"client.endpoint": endpoint, "client.mode": mode})
    client_cfg = ctx.obj["client"]
    items = _corpus_items(_scores_by_id(scores), read_annotations(annotations))
    records, summary = asyncio.run(build_corpus(items, cfg, client_cfg, load_template_pool(templates)))
    export_jsonl(records, out)
    if report:
        write_json(RunReport(command="build-instructions", config_hash=config_hash(cfg), seed=cfg.rng_seed,
                             result=summary.model_dump()), report)
    _echo_json({"out": out, **summary.model_dump()})


@cli.command()
@click.option("--scores", required=True, type=click.Path(dir_okay=False))
@click.option("--truth", required=True, type=click.Path(dir_okay=False))
@click.option("--report", required=True, type=click.Path(dir_okay=False))
@click.pass_context
def evaluate(ctx, scores, truth, report):
    """Frame-level AUC and AP; writes ROC/PR points next to the report."""
    cfg = _resolve(ctx)
    series = read_scores(scores)
    truths = read_ground_truth(truth)
    result = evaluate_scores(series, truths)
    frame_scores, frame_labels, _ = frame_level(series, truths)
    envelope = RunReport(command="evaluate", config_hash=config_hash(cfg), seed=cfg.rng_seed,
                         result=result.model_dump())
    write_report(
        envelope,
        report,
        rows=[v.model_dump() for v in result.per_video],
        curves={"roc": roc_curve_points(frame_scores, frame_labels), "pr": pr_curve_points(frame_scores, frame_labels)},
        config_hash=envelope.config_hash,
        seed=envelope.seed,
    )
    _echo_json({"auc": result.auc, "ap": result.ap, "frames": result.frames, "videos": result.videos})


@cli.command()
@click.option("--name", required=True, type=click.Choice(EXPERIMENTS))
@click.option("--report", required=True, type=click.Path(dir_okay=False))
@click.option("--spec", "spec_path", type=click.Path(dir_okay=False))
@click.option("--epochs", type=int, default=None)
@click.option("--seed", "rng_seed", type=int, default=None)
@click.pass_context
def experiment(ctx, name, report, spec_path, **overrides):
    """Run one synthetic ablation and write its report."""
    if ctx.obj["config_path"]:
        cfg = _resolve(ctx, **overrides)
    else:
        cfg = experiment_config(name, **{k: v for k, v in overrides.items() if v is not None})
    result = run_experiment(name, load_spec(spec_path) if spec_path else None, cfg)
    write_report(result, report, result.rows, result.curves, result.config_hash, result.seed)
    _echo_json({"experiment": name, "rows": result.rows, "config_hash": result.config_hash})


@cli.command("gradient-check")
@click.option("--seeds", default=5, show_default=True, help="Number of random problems.")
@click.option("--tolerance", default=1e-4, show_default=True)
@click.option("--report", type=click.Path(dir_okay=False), default=None)
@click.pass_context
def gradient_check_cmd(ctx, seeds, tolerance, report):
    """Compare analytic and finite-difference gradients."""
    cfg = _resolve(ctx)
    result = gradient_check(cfg, tuple(range(seeds)), tolerance)
    if report:
        write_json(result, report)
    _echo_json(result.model_dump(include={"max_rel_error", "worst_parameter", "passed", "tolerance"}))
    if not result.passed:
        raise GradientCheckFailed(
            f"max relative error {result.max_rel_error:.2e} on {result.worst_parameter} exceeds {tolerance:g}"
        )


@cli.command()
@click.option("--annotations", required=True, type=click.Path(dir_okay=False))
@click.option("--target", type=float, default=2.35, show_default=True, help="Reference glances per abnormal video.")
@click.option("--report", type=click.Path(dir_okay=False), default=None)
def stats(annotations, target, report):
    """Summarize an annotation file."""
    summary = annotation_stats(read_annotations(annotations), target)
    if report:
        write_json(summary, report)
    _echo_json(summary.model_dump())


def _usage() -> str:
    with click.Context(cli, info_name="holmes") as ctx:
        return f"{ctx.get_usage()}\nTry 'holmes --help' for help."


def main(argv: Optional[List[str]] = None) -> int:
    try:
        rv = cli.main(args=argv, prog_name="holmes", standalone_mode=False)
    except click.UsageError as e:
        click.echo(f"holmes: {e.format_message()} (see --help)", err=True)
        return 1
    except click.exceptions.Abort:
        click.echo("holmes: aborted", err=True)
        return 1
    except click.ClickException as e:
        click.echo(f"holmes: {e.format_message()}", err=True)
        return 2
    except ConfigParseError as e:
        logger.error(f"{e.code}: {e.message}")
        click.echo(f"holmes: {e.code}: {e.message}", err=True)
        click.echo(_usage(), err=True)
        return 1
    except ValidationFailure as e:
        logger.error(f"{e.code}: {e.message}")
        click.echo(f"holmes: {e.code}: {e.message}", err=True)
        return 1
    except ResourceFailure as e:
        logger.error(f"{e.code}: {e.message}")
        click.echo(f"holmes: {e.code}: {e.message}", err=True)
        return 2
    return rv if isinstance(rv, int) else 0


if __name__ == "__main__":
    sys.exit(main())
