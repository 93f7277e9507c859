"""Ablation protocols and the synthetic directional experiment."""

from __future__ import annotations

import csv
import itertools
import json
import logging
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import ALL_TAGS, BiTemporalSample, DomainTag
from .data import SyntheticConfig, synthesize_benchmark
from .feature_adaptation import FusionStrategy
from .metrics import Metrics, evaluate
from .trainer import TrainConfig, train

log = logging.getLogger(__name__)

# Singles, then doubles, then all three pairs.
PAIR_COMBINATIONS = tuple(
    combo for k in (1, 2, 3) for combo in itertools.combinations(ALL_TAGS, k)
)
FUSION_STRATEGIES = (FusionStrategy.OUTPUT_FUSION, FusionStrategy.FEATURE_FUSION)


@dataclass
class RunResult:
    name: str
    cfg: TrainConfig
    metrics: Metrics
    checkpoint: Path | None = None


def run_one(name: str, cfg: TrainConfig, train_set, test_set, out_dir=None, config_hash: str = "") -> RunResult:
    run_dir = Path(out_dir) / name if out_dir is not None else None
    result = train(cfg, train_set, run_dir, config_hash=config_hash)
    metrics = evaluate(result["state"].predictor(), test_set, cfg.eval_threshold).metrics
    if run_dir is not None:
        (run_dir / "metrics.json").write_text(json.dumps(
            {"precision": metrics.precision, "recall": metrics.recall, "f1": metrics.f1}, indent=2) + "\n")
    log.info("%s: P=%.4f R=%.4f F1=%.4f", name, metrics.precision, metrics.recall, metrics.f1)
    return RunResult(name, cfg, metrics, result["final"])


def combo_name(tags: Sequence[DomainTag]) -> str:
    return "+".join(t.value for t in tags)


def ablate_pairs(base: TrainConfig, train_set, test_set, out_dir=None, config_hash: str = "") -> list[RunResult]:
    """One run per non-empty subset of the three pairs (seven runs)."""
    return [
        run_one(combo_name(tags), replace(base, active_tags=tags, ia_enabled=True), train_set, test_set,
                out_dir, config_hash)
        for tags in PAIR_COMBINATIONS
    ]


def ablate_fusion(base: TrainConfig, train_set, test_set, out_dir=None, config_hash: str = "") -> list[RunResult]:
    return [
        run_one(f"{s.value}_fusion", replace(base, fusion=s), train_set, test_set, out_dir, config_hash)
        for s in FUSION_STRATEGIES
    ]


def write_pairs_table(results: Sequence[RunResult], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = ["original", "pre_domain", "post_domain", "precision", "recall", "f1", "checkpoint"]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in results:
            marks = ["✓" if t in r.cfg.active_tags else "" for t in ALL_TAGS]
            w.writerow(marks + [f"{r.metrics.precision:.4f}", f"{r.metrics.recall:.4f}", f"{r.metrics.f1:.4f}",
                                f"{r.name}/{r.checkpoint.name}" if r.checkpoint else ""])
    return path


def write_fusion_table(results: Sequence[RunResult], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fusion_strategy", "precision", "recall", "f1", "checkpoint"])
        for r in results:
            w.writerow([f"{r.cfg.fusion.value} fusion", f"{r.metrics.precision:.4f}", f"{r.metrics.recall:.4f}",
                        f"{r.metrics.f1:.4f}", f"{r.name}/{r.checkpoint.name}" if r.checkpoint else ""])
    return path


# -- directional experiment -----------------------------------------------------

VARIANTS = {
    "baseline": dict(ia_enabled=False, fa_enabled=False),
    "ia_only": dict(ia_enabled=True, fa_enabled=False),
    "full": dict(ia_enabled=True, fa_enabled=True),
}


@dataclass(frozen=True)
class DirectionalConfig:
    n_train: int = 200
    n_test: int = 50
    tile_size: int = 64
    shift_strength: float = 1.0
    seeds: tuple[int, ...] = (0, 1, 2)
    epochs: int = 16
    batch_size: int = 4


def directional_experiment(dcfg: DirectionalConfig, base: TrainConfig | None = None, out_dir=None) -> dict:
    """Baseline on unshifted vs shifted data, and IA-only / full models on shifted data.

    Every seed draws fresh train and test sets and re-initialises all models.
    Returns per-seed F1 scores and their means.
    """
    base = base or TrainConfig()
    rows = []
    started = time.time()
    for seed in dcfg.seeds:
        data = {}
        for label, shift in (("control", 0.0), ("shifted", dcfg.shift_strength)):
            # test sets use a disjoint seed stream
            tr = SyntheticConfig(n_samples=dcfg.n_train, tile_size=dcfg.tile_size, shift_strength=shift, seed=1000 + seed)
            te = SyntheticConfig(n_samples=dcfg.n_test, tile_size=dcfg.tile_size, shift_strength=shift, seed=5000 + seed)
            data[label] = (synthesize_benchmark(tr), synthesize_benchmark(te))
        cfg = replace(base, seed=seed, epochs=dcfg.epochs, batch_size=dcfg.batch_size)
        runs = [("baseline", "control"), ("baseline", "shifted"), ("ia_only", "shifted"), ("full", "shifted")]
        for variant, label in runs:
            rcfg = replace(cfg, **VARIANTS[variant])
            name = f"seed{seed}_{variant}_{label}"
            res = run_one(name, rcfg, *data[label], out_dir=out_dir)
            rows.append({"seed": seed, "variant": variant, "data": label, "f1": res.metrics.f1,
                         "precision": res.metrics.precision, "recall": res.metrics.recall})
    mean = {}
    for variant, label in {(r["variant"], r["data"]) for r in rows}:
        mean[f"{variant}_{label}"] = float(np.mean([r["f1"] for r in rows if (r["variant"], r["data"]) == (variant, label)]))
    summary = {"runs": rows, "mean_f1": mean, "seconds": time.time() - started}
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "directional.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary
