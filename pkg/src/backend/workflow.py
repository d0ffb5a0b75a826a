"""
Command bodies behind the CLI: each ``run_*`` takes resolved settings and
paths, does the work through the backend modules and writes the run's
artefacts followed by its manifest.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from src.backend.config import CHECKPOINT_NAME, MANIFEST_NAME, MATRIX_SUFFIX, REPORT_FIELDS, RIDGE_LAMBDA
from src.backend.data.dataset import LABELS_NAME, SyntheticSpec, generate_dataset, load_dataset_dir, write_dataset_dir
from src.backend.data.pretrain import load_pretrained_dir, pretrain_classifier, write_pretrained_dir
from src.backend.errors import ArtifactError, ConfigError, MissingFrozenTower
from src.backend.evaluation import EvalReport, evaluate_model, prediction_difference, summarize_reruns
from src.backend.model.losses import LossVariant, TransferKind
from src.backend.model.towers import Model, ModelMode, build_model
from src.backend.training import LossTrace, TrainConfig, train
from src.backend.utility.checkpoint import load_checkpoint, save_checkpoint
from src.backend.utility.export import (
    PREDICTION_DIFF_HEADER,
    read_loss_trace_csv,
    read_predictions_csv,
    read_report_csv,
    write_csv,
    write_loss_trace_csv,
    write_predictions_csv,
    write_report_csv,
    write_report_json,
    write_summary_csv,
)
from src.backend.utility.manifest import RunManifest, utc_now

logger = logging.getLogger(__name__)

MODE_ALIASES = {"baseline": "baseline", "lit": "lit", "3t": "three_towers", "three_towers": "three_towers"}
MODE_LABELS = {"baseline": "baseline", "lit": "lit", "three_towers": "3t"}
TRANSFER_ALIASES = {"contrastive": "contrastive", "l2": "squared_error", "squared_error": "squared_error"}
TEMPS_ALIASES = {"shared": "shared", "per-term": "per_term", "per_term": "per_term"}
REPORT_ROLES = ("baseline", "lit", "three_towers")

CHECKPOINT_DIRNAME = "checkpoint"
EVAL_DIRNAME = "eval"
LOSS_TRACE_NAME = "loss_trace.csv"
REPORT_JSON_NAME = "report.json"
REPORT_CSV_NAME = "report.csv"
PREDICTIONS_NAME = "predictions.csv"
COMPARISON_NAME = "comparison.csv"
PREDICTION_DIFF_NAME = "prediction_diff.csv"
RUNS_NAME = "runs.csv"
SUMMARY_NAME = "summary.csv"


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def file_sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _jsonable(settings: dict[str, Any]) -> dict[str, Any]:
    return {key: str(value) if isinstance(value, Path) else value for key, value in settings.items()}


def prepare_out_dir(out: Path, force: bool = False) -> Path:
    """Create ``out``; refuse to reuse a non-empty directory unless ``force``."""
    if out.exists() and not out.is_dir():
        raise ArtifactError(f"output path exists and is not a directory: {out}")
    if out.is_dir() and any(out.iterdir()):
        if not force:
            raise ConfigError(f"output directory {out} is not empty (use --force to overwrite)")
        for item in out.iterdir():
            if item.is_file() and (item.suffix == MATRIX_SUFFIX or item.name in {MANIFEST_NAME, LABELS_NAME}):
                item.unlink()
        logger.warning("Overwriting artefacts in %s", out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ArtifactError(f"could not create {out}: {exc}") from exc
    return out


def model_mode_from(settings: dict[str, Any]) -> ModelMode:
    mode = MODE_ALIASES.get(str(settings["mode"]))
    if mode is None:
        raise ConfigError(f"mode must be one of baseline, lit, 3t, got {settings['mode']!r}")
    return ModelMode(
        mode=mode,
        frozen_modality=settings["frozen_modality"],
        init_main_from_pretrained=bool(settings["init_main_from_pretrained"]),
    )


def loss_variant_from(settings: dict[str, Any]) -> LossVariant:
    transfer = TRANSFER_ALIASES.get(str(settings["transfer"]))
    if transfer is None:
        raise ConfigError(f"transfer must be contrastive or l2, got {settings['transfer']!r}")
    temps = TEMPS_ALIASES.get(str(settings["temps"]))
    if temps is None:
        raise ConfigError(f"temps must be shared or per-term, got {settings['temps']!r}")
    return LossVariant(
        temps=temps,
        transfer=TransferKind(transfer, float(settings["loss_weight"])),
        drop_term=settings["drop_term"],
    )


def train_config_from(settings: dict[str, Any], variant: LossVariant) -> TrainConfig:
    return TrainConfig(
        peak_lr=float(settings["peak_lr"]),
        warmup_steps=int(settings["warmup_steps"]),
        total_steps=int(settings["steps"]),
        batch_size=int(settings["batch_size"]),
        clip_norm=float(settings["clip_norm"]),
        weight_decay=float(settings["weight_decay"]),
        beta1=float(settings["beta1"]),
        beta2=float(settings["beta2"]),
        seed=int(settings["seed"]),
        variant=variant,
        log_every=int(settings["log_every"]),
    )


def resolve_checkpoint_dir(path: Path) -> Path:
    for candidate in (path, path / CHECKPOINT_DIRNAME):
        if (candidate / CHECKPOINT_NAME).is_file():
            return candidate
    raise ArtifactError(f"no checkpoint found at {path}")


def resolve_eval_dir(path: Path) -> Path:
    for candidate in (path, path / EVAL_DIRNAME):
        if (candidate / PREDICTIONS_NAME).is_file():
            return candidate
    raise ConfigError(f"no {PREDICTIONS_NAME} found in {path}; run eval first")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def run_gen_data(settings: dict[str, Any], out: Path, force: bool = False) -> RunManifest:
    spec = SyntheticSpec.from_dict(settings)
    prepare_out_dir(out, force)
    dataset = generate_dataset(spec)
    manifest = write_dataset_dir(dataset, out)
    logger.info("Dataset written to %s", out)
    return manifest


def run_pretrain(settings: dict[str, Any], data_dir: Path, out: Path) -> RunManifest:
    started = utc_now()
    dataset = load_dataset_dir(data_dir)
    artifact = pretrain_classifier(
        dataset,
        settings["visible_dims"],
        int(settings["steps"]),
        modality=settings["modality"],
        embed_dim=int(settings["embed_dim"]),
        hidden=int(settings["hidden"]),
        batch_size=int(settings["batch_size"]),
        lr=float(settings["lr"]),
        seed=int(settings["seed"]),
    )
    config = _jsonable({**settings, "data": data_dir, "visible_dims": artifact.visible_dims})
    manifest = write_pretrained_dir(artifact, out, config=config, seed=int(settings["seed"]), started_at=started)
    logger.info(
        "Pretrained %s table (%d rows, width %d) written to %s",
        artifact.modality,
        artifact.table.shape[0],
        artifact.width,
        out,
    )
    return manifest


@dataclass
class TrainResult:
    out: Path
    model: Model
    trace: LossTrace
    manifest: RunManifest


def build_initial_model(settings: dict[str, Any], data_dir: Path, pretrained_dir: Path | None):
    """(dataset, untrained model, train config) for the resolved settings."""
    mode = model_mode_from(settings)
    variant = loss_variant_from(settings)
    config = train_config_from(settings, variant)
    if mode.mode != "three_towers":
        ignored = [
            flag
            for flag, changed in (
                ("--loss-weight", float(settings["loss_weight"]) != 1.0),
                ("--transfer", variant.transfer.kind != "contrastive"),
                ("--drop-term", variant.drop_term != "none"),
                ("--head-variant", settings["head_variant"] != "default"),
            )
            if changed
        ]
        if ignored:
            logger.warning("%s mode ignores %s", mode.mode, ", ".join(ignored))
        # One contrastive term, one temperature.
        variant = LossVariant()
        config = train_config_from(settings, variant)
    if mode.mode == "lit" and mode.init_main_from_pretrained:
        raise ConfigError("--init-main-from-pretrained only applies to 3t mode")

    dataset = load_dataset_dir(data_dir)
    table = body = None
    if mode.uses_frozen:
        if pretrained_dir is None:
            raise MissingFrozenTower(f"--pretrained is required for {MODE_LABELS[mode.mode]} mode")
        artifact = load_pretrained_dir(pretrained_dir)
        if artifact.modality != mode.frozen_modality:
            raise ConfigError(
                f"{pretrained_dir} holds a {artifact.modality} tower but --frozen-modality is {mode.frozen_modality}"
            )
        if artifact.table.shape[0] != dataset.num_pairs:
            raise ConfigError(
                f"pretrained table has {artifact.table.shape[0]} rows, dataset has {dataset.num_pairs} pairs"
            )
        table, body = artifact.table, artifact.body
    elif pretrained_dir is not None:
        logger.warning("--pretrained is ignored in baseline mode")

    model = build_model(
        mode,
        image_dim=dataset.spec.img_dim,
        text_dim=dataset.spec.txt_dim,
        embed_dim=int(settings["embed_dim"]),
        hidden=int(settings["hidden"]),
        frozen_table=table,
        frozen_body=body,
        head_variant=settings["head_variant"],
        third_tower=settings["third_tower"],
        variant=variant,
        seed=int(settings["seed"]),
    )
    return dataset, model, config


def run_train(settings: dict[str, Any], data_dir: Path, pretrained_dir: Path | None, out: Path) -> TrainResult:
    started = utc_now()
    dataset, model, config = build_initial_model(settings, data_dir, pretrained_dir)
    trained, trace = train(model, dataset, config)

    checkpoint_path = save_checkpoint(trained, out / CHECKPOINT_DIRNAME)
    trace_path = write_loss_trace_csv(trace, out / LOSS_TRACE_NAME)
    manifest = RunManifest(
        command="train",
        config=_jsonable({**settings, "data": data_dir, "pretrained": pretrained_dir}),
        seed=config.seed,
        started_at=started,
        finished_at=utc_now(),
        files={
            LOSS_TRACE_NAME: file_sha256(trace_path),
            f"{CHECKPOINT_DIRNAME}/{CHECKPOINT_NAME}": file_sha256(checkpoint_path),
        },
        extra={"mode": model.mode.mode, "parameters": model.parameter_count},
    )
    manifest.write(out)
    if trace.records:
        last = trace.records[-1]
        logger.info("Finished %d steps: total=%.4f tau=%.4f", last.step, last.total, last.tau)
    return TrainResult(out=out, model=trained, trace=trace, manifest=manifest)


def run_eval(
    settings: dict[str, Any],
    checkpoint: Path,
    data_dir: Path,
    alphas: Sequence[float] | None,
    out: Path | None = None,
) -> list[EvalReport]:
    started = utc_now()
    checkpoint_dir = resolve_checkpoint_dir(checkpoint)
    model = load_checkpoint(checkpoint_dir)
    dataset = load_dataset_dir(data_dir)
    if out is None:
        out = checkpoint_dir.parent / EVAL_DIRNAME

    options = {
        "ood_split": settings["ood_split"],
        "shots": int(settings["shots"]),
        "probe_seeds": int(settings["probe_seeds"]),
        "ece_bins": int(settings["ece_bins"]),
    }
    label = MODE_LABELS[model.mode.mode]
    if alphas:
        reports = [evaluate_model(model, dataset, alpha=float(a), **options) for a in alphas]
    else:
        reports = [evaluate_model(model, dataset, variant=label, **options)]

    metadata = {
        "checkpoint": str(checkpoint_dir),
        "data": str(data_dir),
        "mode": model.mode.mode,
        "head_variant": model.heads.variant,
        "tau": model.main_tau,
        "ridge_lambda": RIDGE_LAMBDA,
        **options,
    }
    trace_path = checkpoint_dir.parent / LOSS_TRACE_NAME
    if trace_path.is_file():
        trace = read_loss_trace_csv(trace_path)
        if len(trace):
            final = trace.records[-1]
            metadata["train_steps"] = final.step
            metadata["final_loss"] = {"l_fg": final.l_fg, "l_fh": final.l_fh, "l_gh": final.l_gh, "total": final.total}
    out.mkdir(parents=True, exist_ok=True)
    paths = [
        write_report_json(reports, out / REPORT_JSON_NAME, metadata),
        write_report_csv(reports, out / REPORT_CSV_NAME),
        write_predictions_csv(reports, out / PREDICTIONS_NAME),
    ]
    RunManifest(
        command="eval",
        config=_jsonable({**settings, "checkpoint": checkpoint_dir, "data": data_dir, "alpha": list(alphas or [])}),
        seed=int(settings.get("seed", 0)),
        started_at=started,
        finished_at=utc_now(),
        files={path.name: file_sha256(path) for path in paths},
        extra={"mode": model.mode.mode, "head_variant": model.heads.variant},
    ).write(out)
    return reports


@dataclass
class _EvaluatedRun:
    path: Path
    mode: str
    variant: str
    metrics: dict[str, Any]
    ids: np.ndarray
    labels: np.ndarray
    predictions: np.ndarray


def _load_evaluated_run(path: Path) -> _EvaluatedRun:
    eval_dir = resolve_eval_dir(path)
    manifest = RunManifest.read(eval_dir, expect="eval")
    predictions = read_predictions_csv(eval_dir / PREDICTIONS_NAME)
    if not predictions:
        raise ConfigError(f"{eval_dir / PREDICTIONS_NAME} holds no predictions")
    variant = next(iter(predictions))
    ids, labels, preds = predictions[variant]
    rows = [row for row in read_report_csv(eval_dir / REPORT_CSV_NAME) if row["variant"] == variant]
    metrics = rows[0] if rows else {name: None for name in REPORT_FIELDS}
    return _EvaluatedRun(
        path=path,
        mode=str(manifest.extra.get("mode", "unknown")),
        variant=variant,
        metrics=metrics,
        ids=ids,
        labels=labels,
        predictions=preds,
    )


def assign_roles(runs: Sequence[_EvaluatedRun]) -> list[_EvaluatedRun]:
    """Baseline, LiT, 3T as A, B, C when each appears once; else argument order."""
    by_mode = {run.mode: run for run in runs}
    modes = [run.mode for run in runs]
    if all(modes.count(role) == 1 for role in REPORT_ROLES):
        return [by_mode[role] for role in REPORT_ROLES]
    if len(runs) > 3:
        logger.warning(
            "Prediction differences compare the first three runs; %s only enter the comparison table",
            ", ".join(str(run.path) for run in runs[3:]),
        )
    return list(runs[:3])


def run_report(run_dirs: Sequence[Path], out: Path) -> tuple[Path, Path]:
    if len(run_dirs) < 2:
        raise ConfigError(f"report needs at least two runs, got {len(run_dirs)}")
    started = utc_now()
    runs = [_load_evaluated_run(Path(path)) for path in run_dirs]
    reference = runs[0]
    for run in runs[1:]:
        if not np.array_equal(run.ids, reference.ids) or not np.array_equal(run.labels, reference.labels):
            raise ConfigError(f"{run.path} was evaluated on different example ids than {reference.path}")

    comparison_path = write_csv(
        out / COMPARISON_NAME,
        ("run", "mode", "variant") + REPORT_FIELDS,
        ([str(run.path), run.mode, run.variant] + [run.metrics.get(name) for name in REPORT_FIELDS] for run in runs),
    )

    roles = assign_roles(runs)
    a, b = roles[0], roles[1]
    c = roles[2] if len(roles) > 2 else None
    table = prediction_difference(
        a.predictions,
        b.predictions,
        None if c is None else c.predictions,
        reference.labels,
        roles=(str(a.path), str(b.path), None if c is None else str(c.path)),
    )
    row = table.as_row()
    diff_path = write_csv(out / PREDICTION_DIFF_NAME, PREDICTION_DIFF_HEADER, [[row[key] for key in PREDICTION_DIFF_HEADER]])

    RunManifest(
        command="report",
        config={"runs": [str(path) for path in run_dirs]},
        seed=0,
        started_at=started,
        finished_at=utc_now(),
        files={comparison_path.name: file_sha256(comparison_path), diff_path.name: file_sha256(diff_path)},
        extra={"roles": {"a": a.mode, "b": b.mode, "c": None if c is None else c.mode}},
    ).write(out)
    return comparison_path, diff_path


def run_sweep(
    settings: dict[str, Any],
    eval_settings: dict[str, Any],
    data_dir: Path,
    pretrained_dir: Path | None,
    modes: Sequence[str],
    seeds: Sequence[int],
    out: Path,
) -> Path:
    """Train and evaluate every (mode, seed); record per-run rows and the spread per mode."""
    started = utc_now()
    rows = []
    per_mode: dict[str, list[EvalReport]] = {}
    for mode in modes:
        for seed in seeds:
            run_dir = out / f"{mode}-seed{seed}"
            logger.info("Sweep run %s", run_dir.name)
            run_settings = {**settings, "mode": mode, "seed": seed}
            run_train(run_settings, data_dir, pretrained_dir if mode != "baseline" else None, run_dir)
            report = run_eval({**eval_settings, "seed": seed}, run_dir, data_dir, None)[0]
            per_mode.setdefault(mode, []).append(report)
            rows.append([mode, seed] + [getattr(report, name) for name in REPORT_FIELDS])

    runs_path = write_csv(out / RUNS_NAME, ("mode", "seed") + REPORT_FIELDS, rows)
    summary_path = write_summary_csv(
        {mode: summarize_reruns(reports) for mode, reports in per_mode.items()},
        out / SUMMARY_NAME,
    )
    RunManifest(
        command="sweep",
        config=_jsonable({**settings, "modes": list(modes), "seeds": list(seeds), "data": data_dir, "pretrained": pretrained_dir}),
        seed=int(seeds[0]) if seeds else 0,
        started_at=started,
        finished_at=utc_now(),
        files={RUNS_NAME: file_sha256(runs_path), SUMMARY_NAME: file_sha256(summary_path)},
    ).write(out)
    return summary_path
