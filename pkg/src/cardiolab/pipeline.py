"""File-to-file stages behind the CLI subcommands."""

from __future__ import annotations

import json
import platform
import time
from pathlib import Path

import numpy as np
import scipy

from . import __version__, evaluator, synthgen, trainer
from .cohort import (
    TaskConfig,
    assemble_dataset,
    canonical_json,
    load_dataset,
    parse_thresholds,
    write_dataset,
)
from .config import RunConfig
from .errors import EmptyFold
from .ingestion import CohortFiles, iter_waveforms, parse_context, parse_events, parse_vitals, resample_ecg


def write_run_record(out_dir: Path, command: str, cfg: RunConfig, started: float, **extra) -> None:
    record = {
        "command": command,
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "versions": {
            "cardiolab": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
        "wall_s": round(time.perf_counter() - started, 3),
        **extra,
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run_record.json").write_text(json.dumps(record, sort_keys=True, indent=2) + "\n")


def synth(cfg: RunConfig) -> Path:
    started = time.perf_counter()
    files = synthgen.generate(cfg.synth_config(), cfg.input_dir)
    write_run_record(files.root, "synth", cfg, started)
    return files.root


def build_dataset(cohort_dir, out_dir, task: TaskConfig, seed: int, working_rate_hz: int = 100):
    """Parse a cohort directory, resample waveforms, assemble and write the dataset."""
    files = CohortFiles(Path(cohort_dir))
    for p in (files.waveform_dir, files.labs, files.vitals, files.context, files.thresholds):
        if not p.exists():
            raise FileNotFoundError(f"missing cohort input: {p}")
    ecgs = [resample_ecg(rec, working_rate_hz) for rec in iter_waveforms(files.waveform_dir)]
    ds = assemble_dataset(
        task,
        ecgs,
        parse_events(files.labs),
        parse_vitals(files.vitals),
        parse_context(files.context),
        parse_thresholds(files.thresholds),
        seed=seed,
    )
    ds.extra = {"working_rate_hz": working_rate_hz}
    by_id = {e.record_id: e for e in ecgs}
    ds.waveforms = np.stack([by_id[r].samples.astype(np.float32) for r in ds.records])
    write_dataset(ds, out_dir)
    return ds


def build(cfg: RunConfig) -> Path:
    started = time.perf_counter()
    out = cfg.task_dir / "dataset"
    ds = build_dataset(cfg.input_dir, out, cfg.task_config(), cfg.seed, cfg.data["task"]["working_rate_hz"])
    write_run_record(out, "build", cfg, started, n_records=len(ds.records), retained_labels=ds.retained)
    return out / "manifest.json"


def train(cfg: RunConfig, dataset_dir=None, out_dir=None) -> Path:
    started = time.perf_counter()
    data = load_dataset(dataset_dir or cfg.task_dir / "dataset")
    if not data.labels:
        raise EmptyFold("dataset has no retained labels")
    out = Path(out_dir or cfg.task_dir / "train")
    out.mkdir(parents=True, exist_ok=True)
    deterministic = cfg.data["runtime"]["deterministic"]
    log_path = out / "train_log.jsonl"
    wall = []
    with open(log_path, "w") as fh:
        def on_epoch(entry):
            wall.append(entry["wall_s"])
            fh.write(trainer.log_record(entry, deterministic) + "\n")
            fh.flush()

        result = trainer.train(data, cfg.model_config(len(data.labels), data.features.shape[1]), cfg.trainer_config(), on_epoch)
    ckpt_path = out / "checkpoint.npz"
    trainer.save_checkpoint(result.checkpoint, ckpt_path)
    write_run_record(
        out,
        "train",
        cfg,
        started,
        best_epoch=result.best_epoch,
        valid_macro_auroc=result.best_score,
        checkpoint_sha256=result.checkpoint.digest(),
        manifest_hash=data.manifest_hash,
        epoch_wall_s=wall,
    )
    return ckpt_path


def evaluate(cfg: RunConfig, checkpoint=None, dataset_dir=None, out_dir=None) -> Path:
    started = time.perf_counter()
    data = load_dataset(dataset_dir or cfg.task_dir / "dataset")
    ckpt = trainer.load_checkpoint(checkpoint or cfg.task_dir / "train" / "checkpoint.npz", data.manifest_hash)
    if ckpt.label_ids != [l["label_id"] for l in data.labels]:
        raise ValueError("checkpoint label order differs from the dataset manifest")
    test = data.fold_indices("test")
    if len(test) == 0:
        raise EmptyFold("test fold is empty")
    probs = trainer.predict_records(ckpt, data.waveforms[test], data.features[test])
    e = cfg.data["eval"]
    workers = 1 if cfg.data["runtime"]["deterministic"] else e["workers"]
    metrics = evaluator.evaluate(probs, data.targets[test], data.labels, e["n_bootstrap"], e["ci_level"], cfg.seed, workers)
    task = data.manifest["task"]
    metrics.update(
        {
            "mode": task["mode"],
            "horizon_s": task["horizon_s"],
            "manifest_hash": data.manifest_hash,
            "checkpoint_sha256": ckpt.digest(),
            "n_test_records": int(len(test)),
        }
    )
    out = Path(out_dir or cfg.task_dir / "eval")
    out.mkdir(parents=True, exist_ok=True)
    path = out / "metrics.json"
    path.write_text(canonical_json(metrics))
    write_run_record(out, "eval", cfg, started)
    return path


def report(cfg: RunConfig, metrics_paths, out_dir=None) -> Path:
    started = time.perf_counter()
    docs = [json.loads(Path(p).read_text()) for p in metrics_paths]
    if len(docs) == 1 and docs[0].get("mode", "ESTIMATION") == "ESTIMATION":
        rep = evaluator.make_report(docs[0], "ESTIMATION")
    else:
        if any(d.get("mode") != "MONITORING" for d in docs):
            raise ValueError("report takes one estimation metrics file or monitoring metrics files, one per horizon")
        by_h = {d["horizon_s"]: d for d in docs}
        rep = evaluator.make_report(by_h, "MONITORING", sorted(by_h))
    out = Path(out_dir or cfg.work_dir / "report")
    out.mkdir(parents=True, exist_ok=True)
    echo = docs[0].get("config", {})
    caption = (
        f"{rep.mode.title()} results, rows with interval lower bound > {evaluator.REPORT_MIN_LOWER:.2f}. "
        f"Bootstrap: {echo.get('n_bootstrap')} replicates, level {echo.get('ci_level')}, seed {echo.get('seed')}.\n\n"
    )
    (out / "report.md").write_text(caption + rep.to_markdown())
    (out / "report.csv").write_text(rep.to_csv())
    write_run_record(out, "report", cfg, started, inputs=[str(p) for p in metrics_paths], n_rows=len(rep.rows))
    return out / "report.md"
