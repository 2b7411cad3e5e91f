"""Mask-quality metrics, seed aggregation and report emission.

Empty-denominator conventions: IoU of two empty masks is 1.0, precision with no
predicted positives is 1.0 and recall with no true positives available is 1.0,
so perfect agreement on empty masks scores perfectly.
"""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import yaml

from segdreamer.errors import ReportError, ShapeError, UsageError

METRICS_FILE = "metrics.jsonl"
CONFIG_FILE = "config.yaml"

REQUIRED_FIELDS = (
    "eval/return",
    "eval/episode_return",
    "eval/provider_iou",
    "train/provider_iou",
    "train/provider_precision",
    "train/provider_recall",
)

SUMMARY_HEADER = (
    "label", "n_runs", "final_return_mean", "final_return_sem",
    "train_iou_mean", "train_iou_sem",
    "head_precision", "head_recall", "rgb_precision", "rgb_recall",
)


@dataclass
class MaskMetrics:
    iou: float
    precision: float
    recall: float
    frame_count: int


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred, gt = np.asarray(pred), np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction shape {pred.shape} does not match ground truth {gt.shape}")
    return pred, gt


def frame_iou(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    pred = pred.astype(bool)
    union = np.count_nonzero(pred | gt)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & gt) / union


def precision_recall(pred_prob, gt, threshold: float = 0.5) -> tuple[float, float]:
    if not 0.0 < threshold < 1.0:
        raise UsageError(f"threshold must lie in (0, 1), got {threshold}")
    pred_prob, gt = _pair(pred_prob, gt)
    pred = pred_prob.astype(np.float64) >= threshold
    tp = np.count_nonzero(pred & gt)
    fp = np.count_nonzero(pred & ~gt)
    fn = np.count_nonzero(~pred & gt)
    precision = 1.0 if tp + fp == 0 else tp / (tp + fp)
    recall = 1.0 if tp + fn == 0 else tp / (tp + fn)
    return precision, recall


def episodic_quality(frames: Iterable[tuple[np.ndarray, np.ndarray]], threshold: float = 0.5) -> MaskMetrics:
    """Arithmetic mean of the per-frame metrics over an episode."""
    ious, precs, recs = [], [], []
    for pred, gt in frames:
        ious.append(frame_iou(np.asarray(pred, dtype=np.float64) >= threshold, gt))
        p, r = precision_recall(pred, gt, threshold)
        precs.append(p)
        recs.append(r)
    if not ious:
        raise UsageError("episodic_quality needs at least one frame")
    return MaskMetrics(float(np.mean(ious)), float(np.mean(precs)), float(np.mean(recs)), len(ious))


def mean_sem(values: Sequence[float]) -> tuple[float, float]:
    """Mean and standard error of the mean (sample sd / sqrt(n)); SEM is 0 for one value."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise UsageError("mean_sem needs at least one value")
    if values.size == 1:
        return float(values[0]), 0.0
    return float(values.mean()), float(values.std(ddof=1) / math.sqrt(values.size))


# --- run logs --------------------------------------------------------------------------

def read_metrics(run_dir) -> list[dict]:
    path = Path(run_dir) / METRICS_FILE
    if not path.exists():
        raise ReportError(f"{run_dir}: missing {METRICS_FILE}")
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def run_label(run_dir) -> str:
    path = Path(run_dir) / CONFIG_FILE
    if not path.exists():
        return Path(run_dir).name
    with open(path) as f:
        cfg = yaml.safe_load(f) or {}
    return cfg.get("label") or cfg.get("model", {}).get("variant", Path(run_dir).name)


def series(records: list[dict], name: str) -> tuple[np.ndarray, np.ndarray]:
    rows = [(r["step"], r["value"]) for r in records if r["metric_name"] == name]
    if not rows:
        return np.zeros(0), np.zeros(0)
    steps, values = zip(*rows)
    return np.asarray(steps, dtype=np.int64), np.asarray(values, dtype=np.float64)


@dataclass
class RunSummary:
    run_dir: str
    label: str
    final_return: float
    train_iou: float
    head_precision: float
    head_recall: float
    rgb_precision: float
    rgb_recall: float


def _last(records, name) -> float:
    _, values = series(records, name)
    return float(values[-1]) if values.size else float("nan")


def _final_mean(records, name, frac: float = 0.1) -> float:
    """Mean over the last ``frac`` of logged steps (at least the final record)."""
    steps, values = series(records, name)
    if not values.size:
        return float("nan")
    cutoff = steps.max() - frac * max(steps.max() - steps.min(), 0)
    return float(values[steps >= cutoff].mean())


def summarize_run(run_dir) -> RunSummary:
    records = read_metrics(run_dir)
    names = {r["metric_name"] for r in records}
    missing = [f for f in REQUIRED_FIELDS if f not in names]
    if missing:
        raise ReportError(f"{run_dir}: metrics log lacks fields: {', '.join(missing)}")
    return RunSummary(
        run_dir=str(run_dir), label=run_label(run_dir),
        final_return=_last(records, "eval/return"),
        train_iou=float(series(records, "train/provider_iou")[1].mean()),
        head_precision=_final_mean(records, "train/head_precision"),
        head_recall=_final_mean(records, "train/head_recall"),
        rgb_precision=_final_mean(records, "train/rgb_precision"),
        rgb_recall=_final_mean(records, "train/rgb_recall"),
    )


def summary_rows(run_dirs) -> list[dict]:
    groups: dict[str, list[RunSummary]] = defaultdict(list)
    for run_dir in run_dirs:
        s = summarize_run(run_dir)
        groups[s.label].append(s)
    rows = []
    for label, runs in groups.items():
        ret_mean, ret_sem = mean_sem([r.final_return for r in runs])
        iou_mean, iou_sem = mean_sem([r.train_iou for r in runs])
        rows.append({
            "label": label, "n_runs": len(runs),
            "final_return_mean": ret_mean, "final_return_sem": ret_sem,
            "train_iou_mean": iou_mean, "train_iou_sem": iou_sem,
            **{k: float(np.mean([getattr(r, k) for r in runs]))
               for k in ("head_precision", "head_recall", "rgb_precision", "rgb_recall")},
        })
    return rows


def write_summary(rows: list[dict], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=SUMMARY_HEADER, delimiter="\t")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if isinstance(v, float) and math.isnan(v) else v) for k, v in row.items()})
    return path


def read_summary(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f, delimiter="\t"))


def return_curve(run_dirs) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Steps, mean and SEM of eval/return over the runs, on the steps all runs share."""
    per_run = [dict(zip(*series(read_metrics(d), "eval/return"))) for d in run_dirs]
    common = sorted(set.intersection(*(set(r) for r in per_run))) if per_run else []
    stats = [mean_sem([r[s] for r in per_run]) for s in common]
    means = np.array([m for m, _ in stats])
    sems = np.array([e for _, e in stats])
    return np.asarray(common), means, sems


def emit_report(run_dirs, out_dir) -> dict[str, Path]:
    """Write the four comparison figures and ``summary.tsv`` into ``out_dir``."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run_dirs = [Path(d) for d in run_dirs]
    if not run_dirs:
        raise ReportError("no run directories given")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = summary_rows(run_dirs)
    by_label: dict[str, list[Path]] = defaultdict(list)
    for d in run_dirs:
        by_label[run_label(d)].append(d)
    paths = {"summary": write_summary(rows, out_dir / "summary.tsv")}

    fig, ax = plt.subplots(figsize=(6, 4))
    for label, dirs in by_label.items():
        steps, mean, sem = return_curve(dirs)
        ax.plot(steps, mean, label=label)
        ax.fill_between(steps, mean - sem, mean + sem, alpha=0.25)
    ax.set_xlabel("environment steps")
    ax.set_ylabel("test return")
    ax.legend()
    paths["return_curves"] = _save(fig, out_dir / "return_curves.png")

    fig, ax = plt.subplots(figsize=(5, 4))
    for label, dirs in by_label.items():
        summaries = [summarize_run(d) for d in dirs]
        ax.scatter([s.train_iou for s in summaries], [s.final_return for s in summaries], label=label)
    ax.set_xlabel("train-time episodic IoU")
    ax.set_ylabel("final test return")
    ax.legend()
    paths["iou_vs_return"] = _save(fig, out_dir / "iou_vs_return.png")

    fig, ax = plt.subplots(figsize=(5, 4))
    for label, dirs in by_label.items():
        xs, ys = [], []
        for d in dirs:
            records = read_metrics(d)
            s_iou, iou = series(records, "eval/provider_iou")
            s_ret, ret = series(records, "eval/episode_return")
            if not ret.size:
                continue
            cutoff = s_ret.max() - 0.1 * (s_ret.max() - s_ret.min())
            keep = s_ret >= cutoff
            n = min(keep.sum(), (s_iou >= cutoff).sum())
            xs += list(iou[s_iou >= cutoff][:n])
            ys += list(ret[keep][:n])
        ax.scatter(xs, ys, label=label, s=12)
    ax.set_xlabel("test-time episodic IoU")
    ax.set_ylabel("episode return")
    ax.legend()
    paths["test_iou_vs_reward"] = _save(fig, out_dir / "test_iou_vs_reward.png")

    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for label, dirs in by_label.items():
        records = read_metrics(dirs[0]) if len(dirs) == 1 else sum((read_metrics(d) for d in dirs), [])
        for source, style in (("provider", ":"), ("head", "-"), ("rgb", "--")):
            for ax, kind in zip(axes, ("precision", "recall")):
                steps, values = series(records, f"train/{source}_{kind}")
                if values.size:
                    order = np.argsort(steps, kind="stable")
                    ax.plot(steps[order], _smooth(values[order]), style, label=f"{label} {source}")
    for ax, kind in zip(axes, ("precision", "recall")):
        ax.set_xlabel("environment steps")
        ax.set_ylabel(kind)
    axes[1].legend(fontsize=7)
    paths["precision_recall"] = _save(fig, out_dir / "precision_recall.png")
    return paths


def _smooth(values: np.ndarray, window: int = 10) -> np.ndarray:
    if values.size < window:
        return values
    kernel = np.ones(window) / window
    return np.convolve(values, kernel, mode="same")


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    import matplotlib.pyplot as plt

    plt.close(fig)
    return path
