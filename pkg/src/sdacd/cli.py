"""Command-line entry point: ``sdacd <command> [options]``.

Exit codes: 0 on success, 1 when a run aborts, 2 for usage or configuration
errors (including unreadable data and incompatible checkpoints).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image as PILImage

from . import config as C
from .core import ALL_TAGS, DomainTag, to_uint8
from .data import load_dataset, synthesize_benchmark, tile_directory, write_dataset, write_manifest
from .errors import CheckpointError, ConfigError, IngestionError, SDACDError
from .experiments import (
    DirectionalConfig, ablate_fusion, ablate_pairs, directional_experiment, write_fusion_table, write_pairs_table,
)
from .metrics import evaluate, write_report
from .nn_utils import from_tensor, to_tensor
from .trainer import LOG_FIELDS, load_checkpoint, train

log = logging.getLogger("sdacd")

USAGE_ERRORS = (ConfigError, IngestionError, CheckpointError)


def _pairs(text: str | None):
    if text is None:
        return None
    try:
        return [DomainTag(t.strip()).value for t in text.split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"--pairs takes a comma list of {[t.value for t in ALL_TAGS]}, got {text!r}") from None


def _run_config(args) -> dict:
    """Defaults < config file < SDACD_SEED < explicit flags."""
    layers = []
    if getattr(args, "config", None):
        layers.append(C.load_config(args.config))
    env = C.env_seed()
    if env is not None and not any("train.seed" in layer for layer in layers):
        layers.append({"train.seed": env})
    flags = {
        "data.root": getattr(args, "data", None),
        "out_dir": getattr(args, "out", None),
        "train.epochs": getattr(args, "epochs", None),
        "train.batch_size": getattr(args, "batch_size", None),
        "train.lr": getattr(args, "lr", None),
        "train.seed": getattr(args, "seed", None),
        "train.fusion": getattr(args, "fusion", None),
        "train.gan_form": getattr(args, "gan_form", None),
        "train.pairs": _pairs(getattr(args, "pairs", None)),
        "data.tile_size": getattr(args, "tile", None),
        "eval.threshold": getattr(args, "threshold", None),
    }
    if getattr(args, "no_ia", False):
        flags["train.ia"] = False
    if getattr(args, "no_fa", False):
        flags["train.fa"] = False
    if getattr(args, "resize", False):
        flags["data.resize"] = True
    layers.append(flags)
    layers.append(dict(C.parse_assignment(s) for s in getattr(args, "set", None) or []))
    cfg = C.resolve(*layers)
    if not 0.0 < cfg["eval.threshold"] < 1.0:
        raise ConfigError(f"threshold must lie in (0, 1), got {cfg['eval.threshold']}")
    return cfg


def _load_split(cfg, key):
    spec = C.dataset_spec(cfg, key)
    if not spec.root.exists():
        raise IngestionError(f"dataset root {spec.root} does not exist")
    return load_dataset(spec)


# -- commands ------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = C.resolve({
        "synth.n": args.n, "synth.tile": args.tile, "synth.shift": args.shift,
        "synth.change_rate": args.change_rate, "synth.seed": args.seed,
    })
    scfg = C.synthetic_config(cfg)
    out = Path(args.out)
    try:
        write_dataset(synthesize_benchmark(scfg), out, args.split)
        splits = {args.split: scfg.to_dict()}
        if args.test_n:
            tcfg = replace(scfg, n_samples=args.test_n, seed=scfg.seed + 10007)
            write_dataset(synthesize_benchmark(tcfg), out, "test")
            splits["test"] = tcfg.to_dict()
        manifest = out / "manifest.json"
        write_manifest(manifest, scfg, splits=splits, config_hash=C.config_hash(cfg))
    except OSError as exc:
        print(f"error: cannot write dataset under {out}: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {scfg.n_samples} samples to {out / args.split}")
    return 0


def cmd_tile(args) -> int:
    n = tile_directory(args.src, args.out, args.tile, args.split)
    print(f"wrote {n} tiles to {Path(args.out) / args.split}")
    return 0


def cmd_train(args) -> int:
    cfg = _run_config(args)
    tcfg = C.train_config(cfg)
    train_set = _load_split(cfg, "data.train_split")
    val = _load_split(cfg, "data.val_split") if cfg["data.val_split"] else None
    out = Path(cfg["out_dir"])
    C.dump_config(cfg, out / "config.json")
    h = C.config_hash(cfg)
    result = train(tcfg, train_set, out, val=val, resume=args.resume, config_hash=h)
    print(f"final checkpoint: {result['final']}  (config {h})")
    return 0


def _checkpoint_predictor(args, cfg):
    state, payload = load_checkpoint(args.checkpoint, restore_rng=False)
    tags = cfg["train.pairs"] if args.pairs else None
    fusion = args.fusion or state.cfg.fusion
    return state, payload, state.predictor(fusion, tags)


def cmd_eval(args) -> int:
    cfg = _run_config(args)
    state, payload, predict = _checkpoint_predictor(args, cfg)
    dataset = _load_split(cfg, "data.test_split")
    result = evaluate(predict, dataset, cfg["eval.threshold"], aggregation=args.aggregation)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / "eval"
    write_report(result, out, payload.get("config_hash", ""))
    m = result.metrics
    print(f"P={m.precision:.4f} R={m.recall:.4f} F1={m.f1:.4f} ({len(result.rows)} images)")
    return 0


def _ablation_inputs(args):
    cfg = _run_config(args)
    return cfg, C.train_config(cfg), _load_split(cfg, "data.train_split"), _load_split(cfg, "data.test_split")


def cmd_ablate_pairs(args) -> int:
    cfg, tcfg, tr, te = _ablation_inputs(args)
    out = Path(cfg["out_dir"])
    C.dump_config(cfg, out / "config.json")
    results = ablate_pairs(tcfg, tr, te, out, C.config_hash(cfg))
    path = write_pairs_table(results, out / "pairs_table.csv")
    print(path.read_text(), end="")
    return 0


def cmd_ablate_fusion(args) -> int:
    cfg, tcfg, tr, te = _ablation_inputs(args)
    out = Path(cfg["out_dir"])
    C.dump_config(cfg, out / "config.json")
    results = ablate_fusion(tcfg, tr, te, out, C.config_hash(cfg))
    path = write_fusion_table(results, out / "fusion_table.csv")
    print(path.read_text(), end="")
    return 0


def _save_png(arr, path):
    PILImage.fromarray(np.ascontiguousarray(arr)).save(path, optimize=False)


def cmd_transform(args) -> int:
    cfg = _run_config(args)
    state, _ = load_checkpoint(args.checkpoint, restore_rng=False)
    if "g_pre" not in state.nets:
        raise CheckpointError(f"{args.checkpoint} has no image-adaptation generators")
    dataset = _load_split(cfg, "data.test_split")[: args.limit or None]
    out = Path(args.out)
    (out / "translated").mkdir(parents=True, exist_ok=True)
    (out / "originals").mkdir(parents=True, exist_ok=True)
    g_pre, g_post = state.nets["g_pre"], state.nets["g_post"]
    for s in dataset:
        pre, post = to_tensor([s.pre]), to_tensor([s.post])
        with torch.no_grad():
            images = {"pre_to_post": g_post(pre), "post_to_pre": g_pre(post)}
            if args.cycle:
                images["pre_cycle"] = g_pre(images["pre_to_post"])
                images["post_cycle"] = g_post(images["post_to_pre"])
        for name, t in images.items():
            _save_png(to_uint8(np.clip(from_tensor(t)[0], -1, 1)), out / "translated" / f"{s.id}_{name}.png")
        _save_png(to_uint8(s.pre), out / "originals" / f"{s.id}_pre.png")
        _save_png(to_uint8(s.post), out / "originals" / f"{s.id}_post.png")
    print(f"wrote {len(dataset) * (4 if args.cycle else 2)} translated images to {out / 'translated'}")
    return 0


def loss_series(log_path) -> dict[str, tuple[list[int], list[float]]]:
    """One (steps, values) series per loss column of a training log."""
    log_path = Path(log_path)
    if not log_path.exists():
        raise IngestionError(f"training log {log_path} does not exist")
    with log_path.open() as fh:
        rows = list(csv.DictReader(fh))
    series = {}
    for name in LOG_FIELDS[2:]:
        kept = [r for r in rows if r[name] != ""]
        series[name] = ([int(r["step"]) for r in kept], [float(r[name]) for r in kept])
    return series


def cmd_plot(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"Software": None}
    if args.log:
        series = loss_series(args.log)
        fig, ax = plt.subplots(figsize=(8, 5))
        for name, (steps, values) in series.items():
            ax.plot(steps, values, label=name)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.set_yscale("symlog", linthresh=1e-2)
        ax.legend(ncol=3, fontsize=8)
        fig.tight_layout()
        fig.savefig(out / "losses.png", dpi=80, metadata=meta)
        plt.close(fig)
    if args.ids:
        if not args.checkpoint:
            raise ConfigError("--ids needs --checkpoint and --data")
        cfg = _run_config(args)
        state, _, predict = _checkpoint_predictor(args, cfg)
        samples = {s.id: s for s in _load_split(cfg, "data.test_split")}
        missing = [i for i in args.ids if i not in samples]
        if missing:
            raise IngestionError(f"sample ids not found: {missing}")
        for sid in args.ids:
            s = samples[sid]
            pre, post = to_tensor([s.pre]), to_tensor([s.post])
            panels = [("pre", to_uint8(s.pre)), ("post", to_uint8(s.post))]
            if "g_pre" in state.nets:
                p2p, q2q = state.translations(pre, post)
                panels += [("pre->post", to_uint8(from_tensor(q2q)[0].clip(-1, 1))),
                           ("post->pre", to_uint8(from_tensor(p2p)[0].clip(-1, 1)))]
            prob = predict(pre, post)[0, 0].numpy()
            panels += [("gt", s.gt.values * 255), ("prediction", ((prob >= cfg["eval.threshold"]) * 255).astype(np.uint8))]
            fig, axes = plt.subplots(1, len(panels), figsize=(2 * len(panels), 2.3))
            for ax, (title, img) in zip(axes, panels):
                ax.imshow(img, cmap="gray" if img.ndim == 2 else None, vmin=0, vmax=255)
                ax.set_title(title, fontsize=8)
                ax.axis("off")
            fig.tight_layout()
            fig.savefig(out / f"panel_{sid}.png", dpi=80, metadata=meta)
            plt.close(fig)
    print(f"figures written to {out}")
    return 0


def cmd_directional(args) -> int:
    dcfg = DirectionalConfig(n_train=args.n_train, n_test=args.n_test, tile_size=args.tile,
                             shift_strength=args.shift, seeds=tuple(args.seeds), epochs=args.epochs,
                             batch_size=args.batch_size)
    summary = directional_experiment(dcfg, out_dir=args.out)
    print(json.dumps(summary["mean_f1"], indent=2, sort_keys=True))
    return 0


# -- parser --------------------------------------------------------------------

def _training_options(p):
    p.add_argument("--config", help="JSON file of dotted config keys")
    p.add_argument("--data", help="dataset root with <split>/{A,B,OUT}")
    p.add_argument("--out", help="output directory")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--fusion", choices=["feature", "output"])
    p.add_argument("--gan-form", choices=["least_squares", "vanilla"])
    p.add_argument("--pairs", help="comma list of original,pre_domain,post_domain")
    p.add_argument("--no-ia", action="store_true", help="disable image adaptation")
    p.add_argument("--no-fa", action="store_true", help="disable feature adaptation")
    p.add_argument("--tile", type=int, help="expected tile size (0 = accept any)")
    p.add_argument("--resize", action="store_true", help="resize tiles instead of rejecting them")
    p.add_argument("--threshold", type=float)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sdacd", description="Cross-domain change detection with image and feature adaptation.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic cross-domain dataset")
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--tile", type=int, default=64)
    p.add_argument("--shift", type=float, default=1.0)
    p.add_argument("--change-rate", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", default="train", choices=["train", "val", "test"])
    p.add_argument("--test-n", type=int, default=0, help="also write a test split of this size")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("tile", help="cut large A/B/OUT images into tiles")
    p.add_argument("--src", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tile", type=int, default=256)
    p.add_argument("--split", default="train")
    p.set_defaults(func=cmd_tile)

    p = sub.add_parser("train", help="train a model")
    _training_options(p)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _training_options(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--aggregation", choices=["micro", "macro"], default="micro")
    p.set_defaults(func=cmd_eval)

    for name, func in (("ablate-pairs", cmd_ablate_pairs), ("ablate-fusion", cmd_ablate_fusion)):
        p = sub.add_parser(name, help="run the pair-combination ablation" if name == "ablate-pairs"
                           else "compare feature and output fusion")
        _training_options(p)
        p.set_defaults(func=func)

    p = sub.add_parser("transform", help="dump cross-domain translations")
    _training_options(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cycle", action="store_true", help="also write cycle reconstructions")
    p.add_argument("--limit", type=int, default=0)
    p.set_defaults(func=cmd_transform)

    p = sub.add_parser("plot", help="loss curves and per-sample panels")
    _training_options(p)
    p.add_argument("--log", help="train_log.csv to plot")
    p.add_argument("--checkpoint")
    p.add_argument("--ids", nargs="*", default=[])
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("directional", help="synthetic baseline vs adaptation experiment")
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", type=int, default=200)
    p.add_argument("--n-test", type=int, default=50)
    p.add_argument("--tile", type=int, default=64)
    p.add_argument("--shift", type=float, default=1.0)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--epochs", type=int, default=DirectionalConfig.epochs)
    p.add_argument("--batch-size", type=int, default=DirectionalConfig.batch_size)
    p.set_defaults(func=cmd_directional)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SDACDError as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
