"""Cross-domain image translation with cycle-consistency.

Two residual generators map post-event images into the pre-event domain
(``to_pre``) and back (``to_post``); two patch discriminators judge real versus
translated images in each domain. Losses are written to be minimized, so the
discriminator objective is the negated log-likelihood.
"""

from __future__ import annotations

import enum
import random
from dataclasses import dataclass
from typing import Mapping

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import BiTemporalSample, DomainTag, Image, PairSet, RangeTag
from .errors import NumericalError, PipelineOrderError, ShapeError
from .nn_utils import frozen, kaiming_init, to_tensor


class GanForm(str, enum.Enum):
    VANILLA = "vanilla"
    LEAST_SQUARES = "least_squares"


class Side(str, enum.Enum):
    GENERATOR = "generator"
    DISCRIMINATOR = "discriminator"


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1, padding_mode="reflect"),
            nn.InstanceNorm2d(channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, padding=1, padding_mode="reflect"),
            nn.InstanceNorm2d(channels),
        )

    def forward(self, x):
        return x + self.block(x)


class ResidualGenerator(nn.Module):
    """Encoder / residual core / decoder translating an image into the other domain.

    The output is ``hardtanh(skip(x) + scale * body(x))`` where ``skip`` is a
    per-pixel colour map initialised to the identity. The small residual scale
    keeps Adam steps on the wide last layer from swinging the output. With
    ``identity_init`` the last body layer starts near zero, so a fresh generator
    is close to the identity map.
    """

    def __init__(self, role: str, channels: int = 3, width: int = 16, n_down: int = 2,
                 n_blocks: int = 2, identity_init: bool = True, residual_scale: float = 0.1):
        super().__init__()
        self.role = role
        self.downsampling = 2 ** n_down
        layers = [
            nn.Conv2d(channels, width, 7, padding=3, padding_mode="reflect"),
            nn.InstanceNorm2d(width),
            nn.ReLU(inplace=True),
        ]
        w = width
        for _ in range(n_down):
            layers += [nn.Conv2d(w, w * 2, 3, stride=2, padding=1), nn.InstanceNorm2d(w * 2), nn.ReLU(inplace=True)]
            w *= 2
        layers += [ResidualBlock(w) for _ in range(n_blocks)]
        for _ in range(n_down):
            layers += [
                nn.ConvTranspose2d(w, w // 2, 3, stride=2, padding=1, output_padding=1),
                nn.InstanceNorm2d(w // 2),
                nn.ReLU(inplace=True),
            ]
            w //= 2
        self.body = nn.Sequential(*layers)
        self.head = nn.Conv2d(w, channels, 3, padding=1, padding_mode="reflect")
        self.residual_scale = residual_scale
        self.skip = nn.Conv2d(channels, channels, 1)
        kaiming_init(self)
        with torch.no_grad():
            self.skip.weight.copy_(torch.eye(channels).view(channels, channels, 1, 1))
            self.skip.bias.zero_()
            if identity_init:
                nn.init.normal_(self.head.weight, std=1e-3)
                self.head.bias.zero_()

    def forward(self, x):
        h, w = x.shape[-2:]
        if h % self.downsampling or w % self.downsampling:
            raise ShapeError(
                f"input {h}x{w} is not divisible by the generator downsampling factor {self.downsampling}"
            )
        return F.hardtanh(self.skip(x) + self.residual_scale * self.head(self.body(x)))


class PatchDiscriminator(nn.Module):
    """Fully convolutional real/fake classifier returning a map of logits.

    No normalisation layers: per-image statistics carry the colour cast that
    separates the two domains.
    """

    def __init__(self, role: str, channels: int = 3, width: int = 16, n_layers: int = 2):
        super().__init__()
        self.role = role
        layers = [nn.Conv2d(channels, width, 4, stride=2, padding=1), nn.LeakyReLU(0.2, inplace=True)]
        w = width
        for _ in range(1, n_layers):
            layers += [nn.Conv2d(w, w * 2, 4, stride=2, padding=1), nn.LeakyReLU(0.2, inplace=True)]
            w *= 2
        layers += [nn.Conv2d(w, w, 3, padding=1), nn.LeakyReLU(0.2, inplace=True)]
        layers.append(nn.Conv2d(w, 1, 3, padding=1))
        self.model = nn.Sequential(*layers)
        kaiming_init(self)

    def forward(self, x):
        return self.model(x)


def translate(gen: ResidualGenerator, img: Image) -> Image:
    """Run one image through a generator and return the translated image."""
    if img.range_tag is not RangeTag.SIGNED_UNIT:
        raise ShapeError("translate expects a normalized image in [-1, 1]")
    with torch.no_grad():
        out = gen(to_tensor([img]))[0].permute(1, 2, 0).numpy()
    return Image(np.clip(out, -1.0, 1.0), RangeTag.SIGNED_UNIT)


def _check_finite(scores: torch.Tensor, what: str) -> None:
    ok = torch.isfinite(scores)
    if not ok.all():
        n_nan = torch.isnan(scores).sum().item()
        n_inf = (~ok).sum().item() - n_nan
        raise NumericalError(
            f"{what}: {n_nan} NaN and {n_inf} infinite values among {scores.numel()} discriminator outputs "
            f"(shape {tuple(scores.shape)})"
        )


def adversarial_loss_from_scores(real_scores, fake_scores, side=Side.DISCRIMINATOR, form=GanForm.LEAST_SQUARES):
    """Adversarial loss on raw discriminator outputs.

    For the vanilla form the scores are logits, ``D(x) = sigmoid(score)``.
    For least squares they are compared against the targets 1 (real) and 0 (fake)
    directly. ``real_scores`` is ignored on the generator side and may be None.
    """
    side, form = Side(side), GanForm(form)
    _check_finite(fake_scores, "fake scores")
    if side is Side.GENERATOR:
        if form is GanForm.VANILLA:
            return F.binary_cross_entropy_with_logits(fake_scores, torch.ones_like(fake_scores))
        return ((fake_scores - 1) ** 2).mean()
    _check_finite(real_scores, "real scores")
    if form is GanForm.VANILLA:
        return (F.binary_cross_entropy_with_logits(real_scores, torch.ones_like(real_scores))
                + F.binary_cross_entropy_with_logits(fake_scores, torch.zeros_like(fake_scores)))
    return ((real_scores - 1) ** 2).mean() + (fake_scores ** 2).mean()


def ia_adversarial_loss(d: PatchDiscriminator, real, fake, side=Side.DISCRIMINATOR, form=GanForm.LEAST_SQUARES):
    """One directional adversarial term for discriminator ``d``.

    On the generator side ``d`` is frozen so no gradient reaches it; on the
    discriminator side ``fake`` is detached so no gradient reaches the generator.
    """
    side = Side(side)
    if real is not None and real.shape != fake.shape:
        raise ShapeError(f"real {tuple(real.shape)} and fake {tuple(fake.shape)} differ")
    if side is Side.GENERATOR:
        with frozen(d):
            return adversarial_loss_from_scores(None, d(fake), side, form)
    return adversarial_loss_from_scores(d(real), d(fake.detach()), side, form)


IA_COMPONENTS = ("pre", "post", "pre_reverse", "post_reverse")


def sum_ia_components(components: Mapping[str, torch.Tensor]) -> torch.Tensor:
    """Add the two forward and two reverse adversarial terms."""
    missing = [k for k in IA_COMPONENTS if components.get(k) is None]
    if missing:
        raise PipelineOrderError(f"missing image-adaptation loss components: {', '.join(missing)}")
    return sum(components[k] for k in IA_COMPONENTS)


@dataclass
class IABatch:
    """Images for one image-adaptation step.

    ``post_to_pre`` and ``pre_to_post`` are the cached first-hop translations and
    must be filled in by the caller before adversarial losses are computed.
    """

    pre: torch.Tensor
    post: torch.Tensor
    post_to_pre: torch.Tensor | None = None
    pre_to_post: torch.Tensor | None = None
    # second hops, pre->post->pre and post->pre->post; filled lazily
    rec_pre: torch.Tensor | None = None
    rec_post: torch.Tensor | None = None

    @classmethod
    def translated(cls, g_pre, g_post, pre, post, cycles=False):
        b = cls(pre, post, post_to_pre=g_pre(post), pre_to_post=g_post(pre))
        if cycles:
            b.rec_pre, b.rec_post = g_pre(b.pre_to_post), g_post(b.post_to_pre)
        return b


def ia_components(g_pre, g_post, d_pre, d_post, batch: IABatch, side=Side.GENERATOR,
                  form=GanForm.LEAST_SQUARES) -> dict[str, torch.Tensor]:
    if batch.post_to_pre is None or batch.pre_to_post is None:
        raise PipelineOrderError("translations must be cached on the batch before adversarial losses")
    if batch.rec_pre is None:
        batch.rec_pre = g_pre(batch.pre_to_post)
    if batch.rec_post is None:
        batch.rec_post = g_post(batch.post_to_pre)
    # reverse terms: second hop of each cycle judged against the original domain
    return {
        "pre": ia_adversarial_loss(d_pre, batch.pre, batch.post_to_pre, side, form),
        "post": ia_adversarial_loss(d_post, batch.post, batch.pre_to_post, side, form),
        "pre_reverse": ia_adversarial_loss(d_pre, batch.pre, batch.rec_pre, side, form),
        "post_reverse": ia_adversarial_loss(d_post, batch.post, batch.rec_post, side, form),
    }


def full_ia_adversarial_loss(g_pre, g_post, d_pre, d_post, batch: IABatch, side=Side.GENERATOR,
                             form=GanForm.LEAST_SQUARES) -> torch.Tensor:
    return sum_ia_components(ia_components(g_pre, g_post, d_pre, d_post, batch, side, form))


def cycle_loss(g_pre, g_post, i_pre: torch.Tensor, i_post: torch.Tensor) -> torch.Tensor:
    """Mean absolute reconstruction error of both translation cycles."""
    return reconstruction_loss(g_pre(g_post(i_pre)), i_pre, g_post(g_pre(i_post)), i_post)


def reconstruction_loss(rec_pre, i_pre, rec_post, i_post) -> torch.Tensor:
    for rec, orig in ((rec_pre, i_pre), (rec_post, i_post)):
        if rec.shape != orig.shape:
            raise ShapeError(f"reconstruction {tuple(rec.shape)} does not match original {tuple(orig.shape)}")
    return (rec_pre - i_pre).abs().mean() + (rec_post - i_post).abs().mean()


def build_pair_set(sample: BiTemporalSample, g_pre, g_post, tags=None) -> PairSet:
    """Form the original, pre-domain and post-domain pairs for one sample."""
    pre, post = sample.pre, sample.post
    pairs = {DomainTag.ORIGINAL: (pre, post)}
    wanted = set(DomainTag(t) for t in tags) if tags is not None else None
    if wanted is None or DomainTag.PRE_DOMAIN in wanted:
        pairs[DomainTag.PRE_DOMAIN] = (pre, translate(g_pre, post))
    if wanted is None or DomainTag.POST_DOMAIN in wanted:
        pairs[DomainTag.POST_DOMAIN] = (translate(g_post, pre), post)
    if wanted is not None and DomainTag.ORIGINAL not in wanted:
        del pairs[DomainTag.ORIGINAL]
    return PairSet(pairs, sample.gt)


class ImagePool:
    """Replay buffer of previously generated images for discriminator updates."""

    def __init__(self, size: int = 50, seed: int = 0):
        self.size = size
        self.images: list[torch.Tensor] = []
        self._rng = random.Random(seed)

    def query(self, images: torch.Tensor) -> torch.Tensor:
        if self.size == 0:
            return images
        out = []
        for img in images.detach():
            img = img.unsqueeze(0)
            if len(self.images) < self.size:
                self.images.append(img)
                out.append(img)
            elif self._rng.random() > 0.5:
                i = self._rng.randrange(self.size)
                out.append(self.images[i].clone())
                self.images[i] = img
            else:
                out.append(img)
        return torch.cat(out, 0)
