"""Pixelwise confusion counts, precision/recall/F1 and the evaluation runner."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .core import BiTemporalSample, ChangeMask, binarize
from .errors import ConfigError, ShapeError
from .nn_utils import to_tensor


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be non-negative")

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class Metrics:
    precision: float
    recall: float
    f1: float


def confusion(pred, gt) -> ConfusionCounts:
    p = np.asarray(getattr(pred, "values", pred)).astype(bool)
    g = np.asarray(getattr(gt, "values", gt)).astype(bool)
    if p.shape != g.shape:
        raise ShapeError(f"prediction {p.shape} and ground truth {g.shape} differ")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def f1_from(precision: float, recall: float) -> float:
    return 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0


def precision_recall_f1(c: ConfusionCounts) -> Metrics:
    p = c.tp / (c.tp + c.fp) if c.tp + c.fp else 0.0
    r = c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0
    return Metrics(p, r, f1_from(p, r))


def macro_average(per_image: Sequence[Metrics]) -> Metrics:
    if not per_image:
        return Metrics(0.0, 0.0, 0.0)
    return Metrics(*(float(np.mean([getattr(m, k) for m in per_image])) for k in ("precision", "recall", "f1")))


@dataclass
class EvalResult:
    metrics: Metrics
    counts: ConfusionCounts
    rows: list[dict]
    threshold: float


# predictor: (pre NxCxHxW, post NxCxHxW) -> change probabilities Nx1xHxW
Predictor = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


def evaluate(model: Predictor, dataset: Sequence[BiTemporalSample], threshold: float = 0.5,
             batch_size: int = 8, aggregation: str = "micro") -> EvalResult:
    """Binarize ``model`` predictions and score them against every sample's mask.

    Micro aggregation pools pixel counts over the whole dataset; ``"macro"``
    averages the per-image metrics instead.
    """
    if not dataset:
        raise ConfigError("cannot evaluate on an empty dataset")
    if aggregation not in ("micro", "macro"):
        raise ConfigError(f"aggregation must be micro or macro, got {aggregation!r}")
    if not 0.0 < threshold < 1.0:
        raise ConfigError(f"threshold must lie in (0, 1), got {threshold}")
    rows, total = [], ConfusionCounts()
    for start in range(0, len(dataset), batch_size):
        chunk = dataset[start:start + batch_size]
        with torch.no_grad():
            probs = model(to_tensor([s.pre for s in chunk]), to_tensor([s.post for s in chunk]))
        for s, prob in zip(chunk, probs[:, 0].double().numpy()):
            c = confusion(binarize(np.clip(prob, 0.0, 1.0), threshold), s.gt)
            m = precision_recall_f1(c)
            total = total + c
            rows.append({"id": s.id, "tp": c.tp, "fp": c.fp, "fn": c.fn, "tn": c.tn,
                         "precision": m.precision, "recall": m.recall, "f1": m.f1})
    if aggregation == "micro":
        metrics = precision_recall_f1(total)
    else:
        metrics = macro_average([Metrics(r["precision"], r["recall"], r["f1"]) for r in rows])
    return EvalResult(metrics, total, rows, threshold)


REPORT_FIELDS = ("id", "tp", "fp", "fn", "tn", "precision", "recall", "f1")


def write_report(result: EvalResult, out_dir, config_hash: str = "") -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "per_image.csv"
    with csv_path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in result.rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
    summary = {
        "precision": round(result.metrics.precision, 6),
        "recall": round(result.metrics.recall, 6),
        "f1": round(result.metrics.f1, 6),
        "threshold": result.threshold,
        "n_images": len(result.rows),
        "config_hash": config_hash,
    }
    summary_path = out_dir / "summary.json"
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return csv_path, summary_path
