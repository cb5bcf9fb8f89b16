"""Command implementations shared by the CLI and the HTTP service.

Each function takes plain arguments, writes its artifacts, and returns a
JSON-ready dict that includes the resolved configuration it ran with.
"""

from __future__ import annotations

import hashlib
import json
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from . import metrics
from .config import RunConfig
from .data import (
    SHAPES,
    Dataset,
    load_cloud_dir,
    load_dataset,
    make_dataset,
    normalize_global,
    save_dataset,
    write_cloud,
)
from .diffusion import make_schedule, sample
from .errors import ConfigError, ContractError
from .finetune import (
    load_checkpoint,
    load_metadata,
    load_model,
    mark_trainable_efficient,
    mark_trainable_full,
    save_model,
    transfer_partial,
)
from .model import NoisePredictor
from .train import TrainSettings, train


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def clouds_digest(clouds) -> str:
    h = hashlib.sha256()
    for c in clouds:
        h.update(np.ascontiguousarray(c, dtype="<f8").tobytes())
    return h.hexdigest()


def gen_data(classes: int, per_class: int, points: int, seed: int, out, test_fraction: float = 0.0) -> dict:
    """Generate, globally normalise and write a synthetic dataset."""
    if not 1 <= classes <= len(SHAPES):
        raise ConfigError(f"classes must be in [1, {len(SHAPES)}], got {classes}")
    if points < 1:
        raise ConfigError("points must be >= 1")
    ds = make_dataset(SHAPES[:classes], per_class, points, seed, test_fraction)
    ds, stats = normalize_global(ds)
    manifest = save_dataset(ds, out)
    summary = {
        "config": {"classes": classes, "per_class": per_class, "points": points, "seed": seed,
                   "test_fraction": test_fraction},
        "class_names": ds.class_names,
        "files": len(ds),
        "train": len(ds.split["train"]),
        "test": len(ds.split["test"]),
        "norm_stats": stats.to_dict(),
        "manifest": str(manifest),
    }
    write_json(summary, Path(out) / "dataset.json")
    return summary


def _training_subset(ds: Dataset, cfg: RunConfig) -> tuple[list[np.ndarray], list[int]]:
    clouds, labels = ds.subset(cfg["train.split"])
    keep = cfg["train.classes"]
    if keep is not None:
        pairs = [(c, y) for c, y in zip(clouds, labels) if y in set(keep)]
        clouds, labels = [c for c, _ in pairs], [y for _, y in pairs]
    if not clouds:
        raise ContractError("no training clouds after split/class filtering")
    sizes = {len(c) for c in clouds}
    if len(sizes) != 1:
        raise ContractError(f"training clouds must share one point count, got {sorted(sizes)}")
    return clouds, labels


def build_model(cfg: RunConfig, num_classes: int) -> tuple[NoisePredictor, dict]:
    """Fresh model, optionally warm-started and partitioned for efficient tuning."""
    mcfg = cfg.model_config(num_classes)
    model = NoisePredictor(mcfg, seed=cfg["train.seed"])
    info: dict = {}
    source = cfg["train.finetune_from"]
    if source is not None:
        report = transfer_partial(load_checkpoint(source), model)
        info["transfer"] = {"source": str(source), "matched": len(report.matched),
                            "missing": report.missing, "shape_mismatch": report.shape_mismatch}
    if cfg["train.efficient"]:
        mark_trainable_efficient(model)
    else:
        mark_trainable_full(model)
    total = model.count_params()
    trainable = model.count_params(trainable_only=True)
    info.update(trainable=trainable, total=total, trainable_fraction=trainable / total)
    return model, info


def train_run(cfg: RunConfig, out_checkpoint, log_path=None) -> dict:
    manifest = cfg["data.manifest"]
    if manifest is None:
        raise ConfigError("data.manifest is not set (use --data or a config file)")
    ds = load_dataset(manifest)
    clouds, labels = _training_subset(ds, cfg)
    model, info = build_model(cfg, len(ds.class_names))
    schedule = make_schedule(cfg["diffusion.T"], cfg["diffusion.beta_start"], cfg["diffusion.beta_end"])
    settings = TrainSettings(epochs=cfg["train.epochs"], batch_size=cfg["train.batch_size"], lr=cfg["train.lr"],
                             cfg_dropout=cfg["train.cfg_dropout"], seed=cfg["train.seed"])
    log_path = Path(log_path) if log_path is not None else Path(str(out_checkpoint) + ".log.jsonl")
    with open(log_path, "w") as log:
        log.write(json.dumps({"event": "start", "config": cfg.echo(), **info}) + "\n")
        hist = train(model, schedule, clouds, labels, settings, log_file=log)
        log.write(json.dumps({"event": "end", "initial_loss": hist.initial, "final_loss": hist.final,
                              "steps": hist.steps, "seconds": round(hist.seconds, 3)}) + "\n")
    summary = {
        "config": cfg.echo(),
        "model": model.config.to_dict(),
        "class_names": ds.class_names,
        "n_train": len(clouds),
        "n_points": len(clouds[0]),
        "initial_loss": hist.initial,
        "final_loss": hist.final,
        "epoch_loss": hist.epoch_loss,
        "steps": hist.steps,
        "seconds": hist.seconds,
        "log": str(log_path),
        **info,
    }
    save_model(model, out_checkpoint, {k: v for k, v in summary.items() if k != "epoch_loss"})
    return summary


def resolve_class(meta: dict, cls) -> int | None:
    """Class given as id or name; ``None`` means unconditional."""
    if cls is None:
        return None
    names = meta.get("class_names") or []
    if isinstance(cls, str) and not cls.lstrip("-").isdigit():
        if cls not in names:
            raise ConfigError(f"unknown class {cls!r}; known: {names}")
        return names.index(cls)
    cid = int(cls)
    n = meta.get("model", {}).get("num_classes")
    if cid < 0 or (n is not None and cid >= n):
        raise ConfigError(f"class id {cid} out of range")
    return cid


def generate(model: NoisePredictor, count: int, n_points: int, class_id=None, steps: int | None = None,
             guidance: float = 0.0, seed: int = 0) -> tuple[np.ndarray, float]:
    """``[count, n_points, 3]`` samples and the wall time they took."""
    if steps is not None and not 1 <= steps <= model.config.T:
        raise ConfigError(f"steps must be in [1, {model.config.T}]")
    if guidance < 0:
        raise ConfigError("guidance must be >= 0")
    schedule = make_schedule(model.config.T)
    labels = class_id if isinstance(class_id, (list, tuple)) else [class_id] * count
    start = time.perf_counter()
    x = sample(model, schedule, n_points, labels, steps=steps, w=guidance, seed=seed, count=count)
    return x, time.perf_counter() - start


def write_samples(clouds, out, report: dict) -> list[str]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for k, c in enumerate(clouds):
        name = f"sample_{k:04d}.xyz"
        write_cloud(c, out / name)
        files.append(name)
    write_json({**report, "files": files}, out / "samples.json")
    return files


def sample_run(checkpoint, count: int, class_id=None, steps: int | None = None, guidance: float = 0.0,
               seed: int = 0, out=None, points: int | None = None) -> dict:
    if count < 1:
        raise ConfigError("count must be >= 1")
    if not Path(checkpoint).exists():
        raise ConfigError(f"checkpoint not found: {checkpoint}")
    meta = load_metadata(checkpoint)
    model = load_model(checkpoint)
    cid = _balanced_labels(model, count) if class_id == "all" else resolve_class(meta, class_id)
    n_points = points or meta.get("n_points", 256)
    x, seconds = generate(model, count, n_points, cid, steps, guidance, seed)
    report = {
        "config": {"checkpoint": str(checkpoint), "count": count, "class": cid, "steps": steps or model.config.T,
                   "guidance": guidance, "seed": seed, "points": n_points},
        "seconds": seconds,
        "digest": clouds_digest(x),
    }
    if out is not None:
        report["files"] = write_samples(x, out, report)
    return report


def evaluate_sets(generated: Sequence[np.ndarray], reference: Sequence[np.ndarray],
                  distances: Sequence[str] = ("cd", "emd"), seed=None) -> dict:
    rows = metrics.evaluate(generated, reference, distances)
    warnings = []
    for r in rows:
        if r.degenerate:
            warnings.append(f"{r.metric}@{r.distance}: generated and reference share identical clouds; "
                            "the tie rule decides this value")
    return {
        "rows": [{"metric": r.metric, "distance": r.distance, "value": r.value, "n_generated": r.n_generated,
                  "n_reference": r.n_reference, "degenerate": r.degenerate, "seed": seed} for r in rows],
        "warnings": warnings,
    }


def parse_metrics(spec: str) -> list[str]:
    names = [m.strip().lower() for m in spec.split(",") if m.strip()]
    bad = [m for m in names if m not in metrics.DISTANCES]
    if not names or bad:
        raise ConfigError(f"metrics must be a comma list of {sorted(metrics.DISTANCES)}, got {spec!r}")
    return names


def _sample_seed(path) -> int | None:
    side = Path(path) / "samples.json"
    if side.exists():
        return json.loads(side.read_text()).get("config", {}).get("seed")
    return None


def eval_run(generated, reference, metric_spec: str = "cd,emd", out=None) -> dict:
    distances = parse_metrics(metric_spec)
    S_g, S_r = load_cloud_dir(generated), load_cloud_dir(reference)
    report = evaluate_sets(S_g, S_r, distances, seed=_sample_seed(generated))
    report["config"] = {"generated": str(generated), "reference": str(reference), "metrics": distances}
    if out is not None:
        write_json(report, out)
    return report


def nearest_cd(samples, reference) -> list[float]:
    """Chamfer distance from each sample to its closest reference cloud."""
    return [float(min(metrics.chamfer(s, r) for r in reference)) for s in samples]


def sweep_steps(checkpoint, steps_list: Sequence[int], reference, count: int = 16, class_id=None,
                guidance: float = 0.0, seed: int = 0, metric_spec: str = "cd", out=None) -> dict:
    """Sample at several step counts and score each set against ``reference``."""
    distances = parse_metrics(metric_spec)
    meta = load_metadata(checkpoint)
    model = load_model(checkpoint)
    S_r = load_cloud_dir(reference)
    n_points = meta.get("n_points", len(S_r[0]))
    labels = _balanced_labels(model, count) if class_id == "all" else resolve_class(meta, class_id)
    entries = []
    for steps in steps_list:
        x, seconds = generate(model, count, n_points, labels, steps, guidance, seed)
        ev = evaluate_sets(list(x), S_r, distances, seed=seed)
        entries.append({"steps": int(steps), "seconds": seconds, "digest": clouds_digest(x),
                        "finite": bool(np.all(np.isfinite(x))), "shape": list(x.shape),
                        "mean_nearest_cd": float(np.mean(nearest_cd(x, S_r))), "rows": ev["rows"]})
    report = {"config": {"checkpoint": str(checkpoint), "steps": [int(s) for s in steps_list], "count": count,
                         "class": class_id, "guidance": guidance, "seed": seed, "reference": str(reference)},
              "sweep": entries}
    if out is not None:
        write_json(report, out)
    return report


def _balanced_labels(model: NoisePredictor, count: int) -> list[int]:
    M = model.config.num_classes
    return [k % M for k in range(count)]
