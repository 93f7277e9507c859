"""Alternating end-to-end training.

One training step updates the parameter groups in the order

    g_pre -> g_post -> d_pre -> d_post -> extractor -> classifier -> d_f -> classifier

where the last phase trains the fusion path (fusion head, pair head and
extractor) on the final fused prediction. Every group owns its own Adam
optimizer, and a phase only ever steps the optimizers of its own groups.
"""

from __future__ import annotations

import csv
import logging
import math
import pickle
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn

from .core import BiTemporalSample, DomainTag, canonical_tags
from .data import augment
from .errors import CheckpointError, ConfigError, NumericalError, TrainingAbort
from .feature_adaptation import (
    ChangeClassifier, DomainDiscriminator, FusionStrategy, SiameseExtractor,
    fa_confusion_loss, fa_discriminator_loss, forward_pairs,
)
from .image_adaptation import (
    GanForm, IABatch, ImagePool, PatchDiscriminator, ResidualGenerator, Side,
    ia_adversarial_loss, ia_components, reconstruction_loss, sum_ia_components,
)
from .metrics import evaluate
from .nn_utils import checksum, count_parameters, frozen, to_tensor
from .objectives import LossBundle, LossWeights, change_detection_loss, hybrid_loss, inverse_frequency_weights, total_objective

log = logging.getLogger(__name__)

CKPT_FORMAT = "sdacd-ckpt-v1"
GROUPS = ("g_pre", "g_post", "d_pre", "d_post", "extractor", "classifier", "d_f")
LOG_FIELDS = ("step", "epoch", "cyc", "adv_i", "adv_f_disc", "adv_f_conf", "cd_0", "cd_1", "cd_2", "cd_final", "total")

# (phase number, name, groups stepped)
PHASES = (
    (1, "g_pre", ("g_pre",)),
    (2, "g_post", ("g_post",)),
    (3, "d_pre", ("d_pre",)),
    (4, "d_post", ("d_post",)),
    (5, "extractor", ("extractor",)),
    (6, "classifier", ("classifier",)),
    (7, "d_f", ("d_f",)),
    (8, "fusion", ("classifier", "extractor")),
)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-4
    betas: tuple[float, float] = (0.9, 0.999)
    epochs: int = 1
    batch_size: int = 4
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    gan_form: GanForm = GanForm.LEAST_SQUARES
    fusion: FusionStrategy = FusionStrategy.FEATURE_FUSION
    active_tags: tuple[DomainTag, ...] = (DomainTag.ORIGINAL, DomainTag.PRE_DOMAIN, DomainTag.POST_DOMAIN)
    ia_enabled: bool = True
    fa_enabled: bool = True
    grad_clip: float | None = 5.0
    lr_decay: bool = False
    image_pool: int = 0
    augment: bool = True
    checkpoint_every: int = 0
    gen_width: int = 8
    gen_blocks: int = 2
    disc_width: int = 8
    ext_width: int = 8
    df_width: int = 8
    eval_threshold: float = 0.5

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        tags = canonical_tags(self.active_tags)
        if not self.ia_enabled and DomainTag.ORIGINAL not in tags:
            raise ConfigError("without image adaptation the original pair must be active")
        if isinstance(self.loss_weights, dict):
            object.__setattr__(self, "loss_weights", LossWeights(**self.loss_weights))
        object.__setattr__(self, "active_tags", tags)
        object.__setattr__(self, "gan_form", GanForm(self.gan_form))
        object.__setattr__(self, "fusion", FusionStrategy(self.fusion))
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))

    @property
    def tags(self) -> tuple[DomainTag, ...]:
        """Pairs actually fed to the detector; only the original one without IA."""
        return self.active_tags if self.ia_enabled else (DomainTag.ORIGINAL,)

    @property
    def fa_active(self) -> bool:
        return self.fa_enabled and len(self.tags) >= 2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["gan_form"] = self.gan_form.value
        d["fusion"] = self.fusion.value
        d["active_tags"] = [t.value for t in self.active_tags]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "loss_weights" in d and isinstance(d["loss_weights"], dict):
            d["loss_weights"] = LossWeights(**d["loss_weights"])
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        if "active_tags" in d:
            d["active_tags"] = tuple(DomainTag(t) for t in d["active_tags"])
        return cls(**d)


class ModelState:
    """Networks, optimizers and counters of one training run."""

    def __init__(self, cfg: TrainConfig, channels: int = 3):
        self.cfg = cfg
        self.channels = channels
        torch.manual_seed(cfg.seed)
        nets: dict[str, nn.Module] = {}
        if cfg.ia_enabled:
            nets["g_pre"] = ResidualGenerator("to_pre", channels, cfg.gen_width, n_blocks=cfg.gen_blocks)
            nets["g_post"] = ResidualGenerator("to_post", channels, cfg.gen_width, n_blocks=cfg.gen_blocks)
            nets["d_pre"] = PatchDiscriminator("pre", channels, cfg.disc_width)
            nets["d_post"] = PatchDiscriminator("post", channels, cfg.disc_width)
        ext = SiameseExtractor(channels, cfg.ext_width)
        nets["extractor"] = ext
        nets["classifier"] = ChangeClassifier(ext.widths, n_pairs=len(cfg.tags))
        if cfg.fa_active:
            nets["d_f"] = DomainDiscriminator(len(cfg.tags), cfg.df_width)
        self.nets = nets
        self.optimizers = {
            name: torch.optim.Adam(net.parameters(), lr=cfg.learning_rate, betas=cfg.betas)
            for name, net in nets.items()
        }
        self.epoch = 0
        self.step = 0
        self.pools = {"pre": ImagePool(cfg.image_pool, cfg.seed), "post": ImagePool(cfg.image_pool, cfg.seed + 1)}

    def __getattr__(self, name):
        nets = self.__dict__.get("nets", {})
        if name in nets:
            return nets[name]
        raise AttributeError(name)

    def checksums(self) -> dict[str, str]:
        return {name: checksum(net) for name, net in self.nets.items()}

    def set_lr(self, lr: float) -> None:
        for opt in self.optimizers.values():
            for g in opt.param_groups:
                g["lr"] = lr

    def translations(self, pre, post):
        with torch.no_grad():
            return self.nets["g_pre"](post), self.nets["g_post"](pre)

    def pairs(self, pre, post, tags=None):
        tags = canonical_tags(tags if tags is not None else self.cfg.tags)
        if tags == (DomainTag.ORIGINAL,) or not self.cfg.ia_enabled:
            if tags != (DomainTag.ORIGINAL,):
                raise CheckpointError("model was trained without image adaptation; only the original pair exists")
            return {DomainTag.ORIGINAL: (pre, post)}
        post_to_pre, pre_to_post = self.translations(pre, post)
        every = {
            DomainTag.ORIGINAL: (pre, post),
            DomainTag.PRE_DOMAIN: (pre, post_to_pre),
            DomainTag.POST_DOMAIN: (pre_to_post, post),
        }
        return {t: every[t] for t in tags}

    def predictor(self, fusion=None, tags=None) -> Callable:
        """Callable mapping (pre, post) batches to final change probabilities."""
        fusion = FusionStrategy(fusion or self.cfg.fusion)
        tags = canonical_tags(tags if tags is not None else self.cfg.tags)
        if fusion is FusionStrategy.FEATURE_FUSION and len(tags) != self.nets["classifier"].fusion_head.n_pairs:
            raise CheckpointError(
                f"fusion head was built for {self.nets['classifier'].fusion_head.n_pairs} pairs, "
                f"{len(tags)} requested"
            )
        e, c = self.nets["extractor"], self.nets["classifier"]

        def predict(pre, post):
            with torch.no_grad():
                return forward_pairs(e, c, self.pairs(pre, post, tags), fusion).final

        return predict


def parameter_census(state: ModelState) -> dict[str, int]:
    census = {name: count_parameters(net) for name, net in state.nets.items()}
    census["total"] = sum(census.values())
    return census


def collate(batch: Sequence[BiTemporalSample]):
    pre = to_tensor([s.pre for s in batch])
    post = to_tensor([s.post for s in batch])
    gt = torch.from_numpy(np.stack([s.gt.values for s in batch]).astype(np.float32))[:, None]
    return pre, post, gt


def _params(state, groups):
    return [p for g in groups for p in state.nets[g].parameters()]


def _run_phase(state: ModelState, phase: int, name: str, groups, loss: torch.Tensor, on_phase):
    if not torch.isfinite(loss):
        raise TrainingAbort(name, f"non-finite loss {loss.item()}")
    for opt in state.optimizers.values():
        opt.zero_grad(set_to_none=True)
    loss.backward()
    params = _params(state, groups)
    if state.cfg.grad_clip:
        nn.utils.clip_grad_norm_([p for p in params if p.grad is not None], state.cfg.grad_clip)
    for g in groups:
        state.optimizers[g].step()
    for opt in state.optimizers.values():
        opt.zero_grad(set_to_none=True)
    for p in params:
        if not torch.isfinite(p).all():
            raise TrainingAbort(name, "parameter became non-finite after the update")
    if on_phase is not None:
        on_phase(phase, name, groups)


def _phase_spec(n):
    return PHASES[n - 1]


def train_step(state: ModelState, batch: Sequence[BiTemporalSample], cfg: TrainConfig | None = None,
               on_phase: Callable | None = None):
    """Run the eight update phases on one batch; returns ``(state, LossBundle)``.

    ``on_phase(number, name, groups)`` is called after each executed phase. A
    numerical failure while building a phase's loss aborts with that phase named.
    """
    cfg = cfg or state.cfg
    if not batch:
        raise ConfigError("train_step needs a non-empty batch")
    shapes = {s.pre.shape for s in batch}
    if len(shapes) != 1:
        raise ConfigError(f"all samples in a batch must share dimensions, got {sorted(shapes)}")
    current = [PHASES[0][1]]
    try:
        bundle = _train_phases(state, cfg, *collate(batch), on_phase, current)
    except NumericalError as exc:
        raise TrainingAbort(current[0], str(exc)) from exc
    state.step += 1
    return state, bundle


def _train_phases(state, cfg, pre, post, gt, on_phase, current) -> LossBundle:
    w = cfg.loss_weights
    for net in state.nets.values():
        net.train()
    bundle = LossBundle()

    def enter(n):
        _, name, groups = _phase_spec(n)
        current[0] = name
        return name, groups

    if cfg.ia_enabled:
        g_pre, g_post = state.nets["g_pre"], state.nets["g_post"]
        d_pre, d_post = state.nets["d_pre"], state.nets["d_post"]
        for n in (1, 2):
            name, groups = enter(n)
            b = IABatch.translated(g_pre, g_post, pre, post, cycles=True)
            adv = sum_ia_components(ia_components(g_pre, g_post, d_pre, d_post, b, Side.GENERATOR, cfg.gan_form))
            cyc = reconstruction_loss(b.rec_pre, pre, b.rec_post, post)
            _run_phase(state, n, name, groups, w.lambda_cyc * cyc + w.lambda_i * adv, on_phase)
            bundle.cyc, bundle.adv_i = cyc.item(), adv.item()
        with torch.no_grad():
            b = IABatch.translated(g_pre, g_post, pre, post, cycles=True)
        for n, d, real, fakes, pool in (
            (3, d_pre, pre, (b.post_to_pre, b.rec_pre), state.pools["pre"]),
            (4, d_post, post, (b.pre_to_post, b.rec_post), state.pools["post"]),
        ):
            name, groups = enter(n)
            loss = sum(ia_adversarial_loss(d, real, pool.query(f), Side.DISCRIMINATOR, cfg.gan_form) for f in fakes)
            _run_phase(state, n, name, groups, w.lambda_i * loss, on_phase)
        every = {
            DomainTag.ORIGINAL: (pre, post),
            DomainTag.PRE_DOMAIN: (pre, b.post_to_pre),
            DomainTag.POST_DOMAIN: (b.pre_to_post, post),
        }
        pairs = {t: every[t] for t in cfg.tags}
    else:
        pairs = {DomainTag.ORIGINAL: (pre, post)}

    e, c = state.nets["extractor"], state.nets["classifier"]
    d_f = state.nets.get("d_f")
    weights = inverse_frequency_weights(gt)

    # phase 5: extractor on per-pair change losses plus domain confusion
    name, groups = enter(5)
    out = forward_pairs(e, c, pairs, cfg.fusion, with_final=False)
    _, _, cd = change_detection_loss([out.pair_probs[t] for t in cfg.tags], None, gt, weights)
    loss = w.lambda_cd * cd
    if cfg.fa_active:
        conf = fa_confusion_loss(d_f, out.pair_probs)
        loss = loss + w.lambda_f * conf
        bundle.adv_f_conf = conf.item()
    _run_phase(state, 5, name, groups, loss, on_phase)

    # phase 6: pair head on per-pair change losses
    name, groups = enter(6)
    with frozen(e):
        out = forward_pairs(e, c, pairs, cfg.fusion, with_final=False)
    per_pair, _, cd = change_detection_loss([out.pair_probs[t] for t in cfg.tags], None, gt, weights)
    bundle.cd_per_pair = [v.item() for v in per_pair]
    _run_phase(state, 6, name, groups, w.lambda_cd * cd, on_phase)

    # phases 7 and 8 share one forward pass; d_f does not enter the fusion graph
    name, groups = enter(7)
    out = forward_pairs(e, c, pairs, cfg.fusion, with_final=True)
    if cfg.fa_active:
        disc = fa_discriminator_loss(d_f, out.pair_probs)
        bundle.adv_f_disc = disc.item()
        _run_phase(state, 7, name, groups, w.lambda_f * disc, on_phase)
    name, groups = enter(8)
    final = hybrid_loss(out.final, gt, weights)
    bundle.cd_final = final.item()
    _run_phase(state, 8, name, groups, w.lambda_cd * final, on_phase)

    bundle.total = total_objective(bundle, w)
    return bundle


# -- checkpoints -------------------------------------------------------------

SEGMENTS = {
    "g_pre": ("g_pre", None),
    "g_post": ("g_post", None),
    "d_pre": ("d_pre", None),
    "d_post": ("d_post", None),
    "extractor": ("extractor", None),
    "classifier": ("classifier", "pair_head"),
    "fusion_head": ("classifier", "fusion_head"),
    "domain_discriminator": ("d_f", None),
}


def save_checkpoint(state: ModelState, path, config_hash: str = "", extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    segments = {}
    for seg, (group, sub) in SEGMENTS.items():
        if group in state.nets:
            net = state.nets[group]
            segments[seg] = (getattr(net, sub) if sub else net).state_dict()
    payload = {
        "format": CKPT_FORMAT,
        "config": state.cfg.to_dict(),
        "config_hash": config_hash,
        "channels": state.channels,
        "segments": segments,
        "optimizers": {k: opt.state_dict() for k, opt in state.optimizers.items()},
        "epoch": state.epoch,
        "step": state.step,
        "rng": {"torch": torch.get_rng_state()},
        "extra": extra or {},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def read_checkpoint(path) -> dict:
    path = Path(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except (OSError, RuntimeError, EOFError, pickle.UnpicklingError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CKPT_FORMAT:
        raise CheckpointError(f"{path} is not a {CKPT_FORMAT} checkpoint")
    return payload


def load_checkpoint(path, restore_rng: bool = True) -> tuple[ModelState, dict]:
    payload = read_checkpoint(path)
    cfg = TrainConfig.from_dict(payload["config"])
    state = ModelState(cfg, payload.get("channels", 3))
    try:
        for seg, (group, sub) in SEGMENTS.items():
            if group not in state.nets:
                continue
            net = state.nets[group]
            (getattr(net, sub) if sub else net).load_state_dict(payload["segments"][seg])
        for k, opt in state.optimizers.items():
            opt.load_state_dict(payload["optimizers"][k])
    except (KeyError, RuntimeError) as exc:
        raise CheckpointError(f"checkpoint {path} does not match its own config: {exc}") from exc
    state.epoch, state.step = payload["epoch"], payload["step"]
    if restore_rng:
        torch.set_rng_state(payload["rng"]["torch"])
    return state, payload


# -- training loop -----------------------------------------------------------

def _append_rows(path: Path, rows):
    new = not path.exists()
    with path.open("a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS, lineterminator="\n")
        if new:
            w.writeheader()
        for row in rows:
            w.writerow({k: (f"{v:.8g}" if isinstance(v, float) else v) for k, v in row.items()})


def train(cfg: TrainConfig, dataset: Sequence[BiTemporalSample], out_dir=None, val: Sequence | None = None,
          resume=None, config_hash: str = "", on_step: Callable | None = None) -> dict:
    """Train for ``cfg.epochs`` epochs; returns a dict with the state, bundles and paths.

    With ``out_dir`` set, a ``train_log.csv`` row is appended per step, validation
    metrics per epoch go to ``val_metrics.csv`` and checkpoints are written every
    ``cfg.checkpoint_every`` epochs plus ``final.pt`` at the end.
    """
    if not dataset:
        raise ConfigError("training dataset is empty")
    shapes = {s.pre.shape for s in dataset}
    if len(shapes) != 1:
        raise ConfigError(f"training samples must share dimensions, got {sorted(shapes)}")
    if resume is not None:
        state, _ = load_checkpoint(resume)
        if state.cfg.seed != cfg.seed:
            log.warning("resuming with seed %s from a checkpoint trained with seed %s", cfg.seed, state.cfg.seed)
        state.cfg = replace(state.cfg, epochs=cfg.epochs)
    else:
        state = ModelState(cfg, channels=next(iter(shapes))[2])
    cfg = state.cfg
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    bundles, checkpoints = [], []
    n = len(dataset)
    for epoch in range(state.epoch, cfg.epochs):
        if cfg.lr_decay:
            state.set_lr(cfg.learning_rate * (1 - epoch / max(cfg.epochs, 1)))
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(n)
        rows = []
        for start in range(0, n, cfg.batch_size):
            batch = [dataset[i] for i in order[start:start + cfg.batch_size]]
            if cfg.augment:
                batch = [augment(s, rng) for s in batch]
            _, bundle = train_step(state, batch, cfg)
            bundles.append(bundle)
            rows.append({"step": state.step, "epoch": epoch, **bundle.row()})
            if on_step is not None:
                on_step(state, bundle)
        state.epoch = epoch + 1
        if out is not None:
            _append_rows(out / "train_log.csv", rows)
            if val:
                res = evaluate(state.predictor(), val, cfg.eval_threshold)
                _append_val(out / "val_metrics.csv", epoch, res.metrics)
            if cfg.checkpoint_every and state.epoch % cfg.checkpoint_every == 0 and state.epoch < cfg.epochs:
                checkpoints.append(save_checkpoint(state, out / f"epoch_{state.epoch:04d}.pt", config_hash))
        log.info("epoch %d done, last total loss %.4f", epoch, bundles[-1].total if bundles else math.nan)
    final = save_checkpoint(state, out / "final.pt", config_hash) if out is not None else None
    return {"state": state, "bundles": bundles, "checkpoints": checkpoints, "final": final}


def _append_val(path: Path, epoch: int, m):
    new = not path.exists()
    with path.open("a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(["epoch", "precision", "recall", "f1"])
        w.writerow([epoch, f"{m.precision:.6f}", f"{m.recall:.6f}", f"{m.f1:.6f}"])
