"""Siamese change detector and the prediction-space domain discriminator.

The extractor is shared across both dates and across all pairs. The classifier
has one pair head, applied to every pair, and a fusion head that decodes the
concatenated per-pair features into the final map. The domain discriminator
looks at a change prediction and guesses which pair produced it.
"""

from __future__ import annotations

import enum
from typing import Mapping, NamedTuple, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import DomainTag, canonical_tags
from .errors import ConfigError, NumericalError, ShapeError
from .nn_utils import frozen, kaiming_init

PROB_FLOOR = 1e-7


class FusionStrategy(str, enum.Enum):
    FEATURE_FUSION = "feature"
    OUTPUT_FUSION = "output"


class FeaturePair(NamedTuple):
    pre: list[torch.Tensor]
    post: list[torch.Tensor]


def _conv_block(cin, cout, stride=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1),
        nn.ReLU(inplace=True),
    )


class SiameseExtractor(nn.Module):
    """Multi-scale encoder; scale ``i`` has stride ``2**i`` and ``width * 2**i`` channels."""

    def __init__(self, channels: int = 3, width: int = 16, n_scales: int = 3):
        super().__init__()
        self.widths = [width * 2 ** i for i in range(n_scales)]
        self.stride = 2 ** (n_scales - 1)
        stages = [_conv_block(channels, self.widths[0])]
        for i in range(1, n_scales):
            stages.append(_conv_block(self.widths[i - 1], self.widths[i], stride=2))
        self.stages = nn.ModuleList(stages)
        kaiming_init(self)

    def forward(self, x) -> list[torch.Tensor]:
        h, w = x.shape[-2:]
        if h % self.stride or w % self.stride:
            raise ShapeError(f"input {h}x{w} is not divisible by the extractor stride {self.stride}")
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class PairHead(nn.Module):
    """Decode post-minus-pre feature differences into a change logit map."""

    def __init__(self, widths: Sequence[int]):
        super().__init__()
        self.widths = list(widths)
        self.hidden_width = widths[0]
        self.top = nn.Sequential(nn.Conv2d(widths[-1], widths[-1], 3, padding=1), nn.ReLU(inplace=True))
        self.up = nn.ModuleList(
            nn.Sequential(nn.Conv2d(widths[i + 1] + widths[i], widths[i], 3, padding=1), nn.ReLU(inplace=True))
            for i in reversed(range(len(widths) - 1))
        )
        self.out = nn.Conv2d(self.hidden_width, 1, 1)

    def hidden(self, fp: FeaturePair) -> torch.Tensor:
        if len(fp.pre) != len(self.widths) or any(f.shape[1] != w for f, w in zip(fp.pre, self.widths)):
            raise ShapeError(
                f"feature widths {[f.shape[1] for f in fp.pre]} do not match head widths {self.widths}"
            )
        diffs = [b - a for a, b in zip(fp.pre, fp.post)]
        x = self.top(diffs[-1])
        for block, skip in zip(self.up, reversed(diffs[:-1])):
            x = F.interpolate(x, size=skip.shape[-2:], mode="nearest")
            x = block(torch.cat([x, skip], 1))
        return x

    def forward(self, fp: FeaturePair) -> torch.Tensor:
        return self.out(self.hidden(fp))


class FusionHead(nn.Module):
    def __init__(self, hidden_width: int, n_pairs: int):
        super().__init__()
        self.n_pairs = n_pairs
        self.in_width = hidden_width * n_pairs
        self.body = nn.Sequential(nn.Conv2d(self.in_width, hidden_width, 3, padding=1), nn.ReLU(inplace=True))
        self.out = nn.Conv2d(hidden_width, 1, 1)

    def forward(self, hiddens: Sequence[torch.Tensor]) -> torch.Tensor:
        x = torch.cat(list(hiddens), 1)
        if x.shape[1] != self.in_width:
            raise ShapeError(
                f"fusion head built for {self.n_pairs} pairs ({self.in_width} channels), got {x.shape[1]} channels"
            )
        return self.out(self.body(x))


class ChangeClassifier(nn.Module):
    def __init__(self, widths: Sequence[int], n_pairs: int = 3):
        super().__init__()
        self.pair_head = PairHead(widths)
        self.fusion_head = FusionHead(self.pair_head.hidden_width, n_pairs)
        kaiming_init(self)


class DomainDiscriminator(nn.Module):
    """Classify a change probability map into one of ``n_domains`` pair tags."""

    def __init__(self, n_domains: int = 3, width: int = 16, n_layers: int = 3):
        super().__init__()
        self.n_domains = n_domains
        layers, cin = [], 1
        for i in range(n_layers):
            cout = width * 2 ** i
            layers += [nn.Conv2d(cin, cout, 4, stride=2, padding=1), nn.LeakyReLU(0.2, inplace=True)]
            cin = cout
        self.features = nn.Sequential(*layers)
        self.classify = nn.Linear(cin, n_domains)
        kaiming_init(self)

    def logits(self, prob: torch.Tensor) -> torch.Tensor:
        return self.classify(self.features(prob).mean(dim=(2, 3)))

    def forward(self, prob: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.logits(prob), dim=1)


def extract_pair(e: SiameseExtractor, pre: torch.Tensor, post: torch.Tensor) -> FeaturePair:
    if pre.shape != post.shape:
        raise ShapeError(f"pre {tuple(pre.shape)} and post {tuple(post.shape)} differ")
    # one pass over both dates keeps the two branches bitwise identical in weights
    feats = e(torch.cat([pre, post], 0))
    n = pre.shape[0]
    return FeaturePair([f[:n] for f in feats], [f[n:] for f in feats])


def predict_pair(c: ChangeClassifier, fp: FeaturePair) -> torch.Tensor:
    return torch.sigmoid(c.pair_head(fp))


def fuse(c: ChangeClassifier, features: Mapping[DomainTag, FeaturePair],
         strategy=FusionStrategy.FEATURE_FUSION, tags=None) -> torch.Tensor:
    """Final change probabilities from all active pairs."""
    strategy = FusionStrategy(strategy)
    tags = canonical_tags(tags if tags is not None else features)
    missing = [t.value for t in tags if t not in features]
    if missing:
        raise ConfigError(f"fusion needs features for pairs {missing}")
    if strategy is FusionStrategy.OUTPUT_FUSION:
        return output_fusion([predict_pair(c, features[t]) for t in tags])
    return torch.sigmoid(c.fusion_head([c.pair_head.hidden(features[t]) for t in tags]))


def output_fusion(probs: Sequence[torch.Tensor]) -> torch.Tensor:
    return torch.stack(list(probs), 0).mean(0)


class FAOutputs(NamedTuple):
    pair_probs: dict[DomainTag, torch.Tensor]
    final: torch.Tensor


def forward_pairs(e, c, pairs: Mapping[DomainTag, tuple[torch.Tensor, torch.Tensor]],
                  strategy=FusionStrategy.FEATURE_FUSION, with_final=True) -> FAOutputs:
    """Per-pair probabilities and (optionally) the fused prediction in one pass."""
    strategy = FusionStrategy(strategy)
    tags = canonical_tags(pairs)
    hiddens, probs = {}, {}
    for t in tags:
        fp = extract_pair(e, *pairs[t])
        hiddens[t] = c.pair_head.hidden(fp)
        probs[t] = torch.sigmoid(c.pair_head.out(hiddens[t]))
    final = None
    if with_final:
        if strategy is FusionStrategy.OUTPUT_FUSION:
            final = output_fusion([probs[t] for t in tags])
        else:
            final = torch.sigmoid(c.fusion_head([hiddens[t] for t in tags]))
    return FAOutputs(probs, final)


def _check_simplex(p: torch.Tensor) -> None:
    sums = p.sum(1)
    if not torch.isfinite(p).all() or (p < 0).any() or (sums - 1).abs().max() > 1e-5:
        raise NumericalError(
            f"domain discriminator output is not a probability simplex "
            f"(row sums in [{sums.min().item():.6g}, {sums.max().item():.6g}], min entry {p.min().item():.3g})"
        )


def domain_cross_entropy(p: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean ``-log p[target]`` over rows of an N x K probability matrix."""
    _check_simplex(p)
    picked = p.gather(1, target.view(-1, 1)).squeeze(1)
    return -torch.log(picked.clamp_min(PROB_FLOOR)).mean()


def uniform_cross_entropy(p: torch.Tensor, floor: float | None = PROB_FLOOR) -> torch.Tensor:
    """Mean cross-entropy between the uniform distribution and each row of ``p``."""
    _check_simplex(p)
    logp = torch.log(p.clamp_min(floor) if floor else p)
    return -logp.mean(1).mean()


def _stack_predictions(preds: Mapping[DomainTag, torch.Tensor]):
    tags = canonical_tags(preds)
    x = torch.cat([preds[t] for t in tags], 0)
    target = torch.cat([torch.full((preds[t].shape[0],), i, dtype=torch.long) for i, t in enumerate(tags)])
    return tags, x, target


def fa_discriminator_loss(d_f: DomainDiscriminator, preds: Mapping[DomainTag, torch.Tensor]) -> torch.Tensor:
    """Cross-entropy of ``d_f`` identifying the pair behind each prediction.

    Class ``i`` is the ``i``-th active tag in canonical order. Predictions are
    detached so only ``d_f`` receives gradient.
    """
    tags, x, target = _stack_predictions({t: p.detach() for t, p in preds.items()})
    if d_f.n_domains != len(tags):
        raise ConfigError(f"domain discriminator has {d_f.n_domains} classes but {len(tags)} pairs are active")
    return domain_cross_entropy(d_f(x), target)


def fa_confusion_loss(d_f: DomainDiscriminator, preds: Mapping[DomainTag, torch.Tensor]) -> torch.Tensor:
    """Push predictions towards a uniform ``d_f`` response; ``d_f`` stays fixed."""
    tags, x, _ = _stack_predictions(preds)
    if d_f.n_domains != len(tags):
        raise ConfigError(f"domain discriminator has {d_f.n_domains} classes but {len(tags)} pairs are active")
    with frozen(d_f):
        return uniform_cross_entropy(d_f(x))
