"""Value types shared across the package.

Images are stored channel-last as ``float32`` numpy arrays. Masks are ``uint8``
arrays of zeros and ones. All types are frozen and copy their input arrays, so
they can be shared freely between readers.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import ConfigError, IngestionError, ShapeError


class RangeTag(str, enum.Enum):
    RAW_0_255 = "raw_0_255"
    UNIT = "unit"
    SIGNED_UNIT = "signed_unit"

    @property
    def interval(self) -> tuple[float, float]:
        return _INTERVALS[self]


_INTERVALS = {
    RangeTag.RAW_0_255: (0.0, 255.0),
    RangeTag.UNIT: (0.0, 1.0),
    RangeTag.SIGNED_UNIT: (-1.0, 1.0),
}


class DomainTag(str, enum.Enum):
    """Which bi-temporal pair a prediction came from.

    ``ORIGINAL`` is ``(pre, post)``, ``PRE_DOMAIN`` is ``(pre, post->pre)`` and
    ``POST_DOMAIN`` is ``(pre->post, post)``.
    """

    ORIGINAL = "original"
    PRE_DOMAIN = "pre_domain"
    POST_DOMAIN = "post_domain"

    @property
    def index(self) -> int:
        return ALL_TAGS.index(self)


ALL_TAGS = (DomainTag.ORIGINAL, DomainTag.PRE_DOMAIN, DomainTag.POST_DOMAIN)


def canonical_tags(tags) -> tuple[DomainTag, ...]:
    """Deduplicate ``tags`` and return them in the fixed ORIGINAL, PRE, POST order."""
    chosen = {DomainTag(t) for t in tags}
    if not chosen:
        raise ConfigError("at least one domain tag must be active")
    return tuple(t for t in ALL_TAGS if t in chosen)


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Image:
    values: np.ndarray
    range_tag: RangeTag = RangeTag.SIGNED_UNIT

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        if values.ndim == 2:
            values = values[..., None]
        if values.ndim != 3 or min(values.shape) <= 0:
            raise ShapeError(f"image must be HxWxC with positive extents, got {values.shape}")
        tag = RangeTag(self.range_tag)
        lo, hi = tag.interval
        if not np.all(np.isfinite(values)):
            raise IngestionError("image contains non-finite values")
        if values.min() < lo or values.max() > hi:
            raise IngestionError(
                f"image values [{values.min():.4g}, {values.max():.4g}] outside {tag.value} range [{lo}, {hi}]"
            )
        object.__setattr__(self, "values", _frozen(values))
        object.__setattr__(self, "range_tag", tag)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape


@dataclass(frozen=True)
class ChangeMask:
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim == 3 and values.shape[-1] == 1:
            values = values[..., 0]
        if values.ndim != 2:
            raise ShapeError(f"change mask must be HxW, got {values.shape}")
        if not np.isin(values, (0, 1)).all():
            raise IngestionError("change mask values must be 0 or 1")
        object.__setattr__(self, "values", _frozen(values.astype(np.uint8)))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class ChangeProbMap:
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim == 3 and values.shape[-1] == 1:
            values = values[..., 0]
        if values.ndim != 2:
            raise ShapeError(f"probability map must be HxW, got {values.shape}")
        if not np.all(np.isfinite(values)) or values.min() < 0 or values.max() > 1:
            raise IngestionError("probability map values must be finite and in [0, 1]")
        object.__setattr__(self, "values", _frozen(values))


@dataclass(frozen=True)
class BiTemporalSample:
    pre: Image
    post: Image
    gt: ChangeMask
    id: str = ""

    def __post_init__(self):
        hw = (self.pre.height, self.pre.width)
        if (self.post.height, self.post.width) != hw or (self.gt.height, self.gt.width) != hw:
            raise ShapeError(
                f"sample {self.id!r}: pre {self.pre.shape}, post {self.post.shape} and gt "
                f"{self.gt.values.shape} disagree on height/width"
            )
        if self.pre.range_tag != self.post.range_tag:
            raise IngestionError(f"sample {self.id!r}: pre and post carry different range tags")


@dataclass(frozen=True)
class PairSet:
    pairs: Mapping[DomainTag, tuple[Image, Image]]
    gt: ChangeMask
    tags: tuple[DomainTag, ...] = field(init=False)

    def __post_init__(self):
        if not self.pairs:
            raise ConfigError("a pair set needs at least one pair")
        shapes = {img.shape for pair in self.pairs.values() for img in pair}
        if len(shapes) != 1:
            raise ShapeError(f"all images in a pair set must share dimensions, got {sorted(shapes)}")
        (shape,) = shapes
        if (self.gt.height, self.gt.width) != shape[:2]:
            raise ShapeError("ground truth does not match pair dimensions")
        tags = canonical_tags(self.pairs)
        object.__setattr__(self, "pairs", {t: self.pairs[t] for t in tags})
        object.__setattr__(self, "tags", tags)

    def __getitem__(self, tag: DomainTag) -> tuple[Image, Image]:
        return self.pairs[DomainTag(tag)]

    def __len__(self) -> int:
        return len(self.pairs)


def binarize(prob, threshold: float = 0.5) -> ChangeMask:
    """Threshold a probability map; pixels equal to ``threshold`` count as change."""
    if not 0.0 < threshold < 1.0:
        raise ConfigError(f"threshold must lie in (0, 1), got {threshold}")
    values = prob.values if isinstance(prob, (ChangeProbMap, ChangeMask)) else np.asarray(prob)
    return ChangeMask((values >= threshold).astype(np.uint8))


def normalize_image(raw: Image | np.ndarray) -> Image:
    """Map 8-bit intensities affinely onto [-1, 1]."""
    if isinstance(raw, Image):
        if raw.range_tag is not RangeTag.RAW_0_255:
            raise IngestionError(f"expected a raw_0_255 image, got {raw.range_tag.value}")
        values = raw.values
    else:
        values = np.asarray(raw, dtype=np.float64)
        if values.size and (values.min() < 0 or values.max() > 255):
            raise IngestionError("raw pixel values must lie in [0, 255]")
    return Image(np.asarray(values, dtype=np.float64) / 127.5 - 1.0, RangeTag.SIGNED_UNIT)


def denormalize_image(img: Image | np.ndarray) -> Image:
    values = img.values if isinstance(img, Image) else np.asarray(img)
    values = np.clip((np.asarray(values, dtype=np.float64) + 1.0) * 127.5, 0.0, 255.0)
    return Image(values, RangeTag.RAW_0_255)


def to_uint8(img: Image | np.ndarray) -> np.ndarray:
    """Denormalize and round to 8-bit for writing to disk."""
    return np.rint(denormalize_image(img).values).astype(np.uint8)
