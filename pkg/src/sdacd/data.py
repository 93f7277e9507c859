"""Dataset ingestion, augmentation and the synthetic cross-domain benchmark.

On-disk layout: ``<root>/<split>/{A,B,OUT}/<name>.<ext>`` with A holding the
pre-event images, B the post-event images and OUT the 8-bit change masks.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage
from skimage import draw

from .core import BiTemporalSample, ChangeMask, Image, normalize_image, to_uint8
from .errors import ConfigError, IngestionError

log = logging.getLogger(__name__)

IMAGE_EXTS = (".png", ".tif", ".tiff", ".bmp", ".jpg", ".jpeg")
SUBDIRS = ("A", "B", "OUT")
GT_THRESHOLD = 128


@dataclass(frozen=True)
class DatasetSpec:
    root: Path
    split: str = "train"
    tile_size: int | None = 256
    layout: str = "triple_dirs"
    resize: bool = False

    def __post_init__(self):
        if self.split not in ("train", "val", "test"):
            raise ConfigError(f"split must be train, val or test, got {self.split!r}")
        if self.layout != "triple_dirs":
            raise ConfigError(f"unsupported layout {self.layout!r}")
        object.__setattr__(self, "root", Path(self.root))


def _index(folder: Path) -> dict[str, Path]:
    if not folder.is_dir():
        raise IngestionError(f"missing directory {folder}")
    return {p.stem: p for p in sorted(folder.iterdir()) if p.suffix.lower() in IMAGE_EXTS}


def _read(path: Path, mode: str, size: int | None, resize: bool) -> np.ndarray:
    try:
        with PILImage.open(path) as im:
            im = im.convert(mode)
            if size is not None and im.size != (size, size):
                if not resize:
                    raise IngestionError(f"{path}: size {im.size[0]}x{im.size[1]} != tile size {size} (use --resize)")
                im = im.resize((size, size), PILImage.NEAREST if mode == "L" else PILImage.BILINEAR)
            return np.asarray(im)
    except OSError as exc:
        raise IngestionError(f"cannot read {path}: {exc}") from exc


def load_dataset(spec: DatasetSpec) -> list[BiTemporalSample]:
    base = spec.root / spec.split
    if not spec.root.exists():
        raise IngestionError(f"dataset root {spec.root} does not exist")
    index = {d: _index(base / d) for d in SUBDIRS}
    names = set().union(*index.values())
    offenders = sorted(f"{n} (missing from {','.join(d for d in SUBDIRS if n not in index[d])})"
                       for n in names if any(n not in index[d] for d in SUBDIRS))
    if offenders:
        raise IngestionError(f"unmatched files under {base}: " + "; ".join(offenders))
    samples = []
    for name in sorted(names):
        pre = _read(index["A"][name], "RGB", spec.tile_size, spec.resize)
        post = _read(index["B"][name], "RGB", spec.tile_size, spec.resize)
        gt = _read(index["OUT"][name], "L", spec.tile_size, spec.resize)
        if pre.shape != post.shape or pre.shape[:2] != gt.shape:
            raise IngestionError(f"{name}: A {pre.shape}, B {post.shape} and OUT {gt.shape} disagree")
        samples.append(BiTemporalSample(
            normalize_image(pre), normalize_image(post),
            ChangeMask((gt >= GT_THRESHOLD).astype(np.uint8)), id=name,
        ))
    return samples


def write_dataset(samples: Iterable[BiTemporalSample], root, split: str = "train") -> list[Path]:
    """Write samples as lossless PNG triples; returns the written paths."""
    base = Path(root) / split
    for d in SUBDIRS:
        (base / d).mkdir(parents=True, exist_ok=True)
    written = []
    for s in samples:
        for d, arr in (("A", to_uint8(s.pre)), ("B", to_uint8(s.post)), ("OUT", s.gt.values * 255)):
            path = base / d / f"{s.id}.png"
            PILImage.fromarray(np.ascontiguousarray(arr.astype(np.uint8))).save(path, optimize=False)
            written.append(path)
    return written


def tile_directory(src, out, tile: int, split: str = "train") -> int:
    """Cut large A/B/OUT triples into non-overlapping ``tile`` x ``tile`` crops.

    Border remainders smaller than a tile are dropped. Returns the tile count.
    """
    src, out = Path(src), Path(out)
    spec = DatasetSpec(src, split, tile_size=None)
    count = 0
    for d in SUBDIRS:
        (out / split / d).mkdir(parents=True, exist_ok=True)
    for s in load_dataset(spec):
        h, w = s.gt.height, s.gt.width
        for r in range(0, h - tile + 1, tile):
            for c in range(0, w - tile + 1, tile):
                sub = crop(s, r, c, tile, f"{s.id}_{r:05d}_{c:05d}")
                write_dataset([sub], out, split)
                count += 1
    return count


# -- geometry ---------------------------------------------------------------

def _apply(arr: np.ndarray, hflip: bool, vflip: bool, k: int) -> np.ndarray:
    if hflip:
        arr = arr[:, ::-1]
    if vflip:
        arr = arr[::-1, :]
    return np.rot90(arr, k, axes=(0, 1))


def apply_geometry(sample: BiTemporalSample, hflip=False, vflip=False, k=0) -> BiTemporalSample:
    """Apply the same flips and ``k`` quarter turns to pre, post and gt."""
    return BiTemporalSample(
        Image(_apply(sample.pre.values, hflip, vflip, k), sample.pre.range_tag),
        Image(_apply(sample.post.values, hflip, vflip, k), sample.post.range_tag),
        ChangeMask(_apply(sample.gt.values, hflip, vflip, k)),
        id=sample.id,
    )


def augment(sample: BiTemporalSample, rng: np.random.Generator) -> BiTemporalSample:
    hflip = rng.random() < 0.5
    vflip = rng.random() < 0.5
    k = int(rng.integers(4))
    return apply_geometry(sample, hflip, vflip, k)


def crop(sample: BiTemporalSample, top: int, left: int, size: int, new_id: str | None = None) -> BiTemporalSample:
    sl = (slice(top, top + size), slice(left, left + size))
    return BiTemporalSample(
        Image(sample.pre.values[sl], sample.pre.range_tag),
        Image(sample.post.values[sl], sample.post.range_tag),
        ChangeMask(sample.gt.values[sl]),
        id=new_id if new_id is not None else sample.id,
    )


def instance_crop_augment(dataset: Sequence[BiTemporalSample], crops_per_instance: int, tile_size: int,
                          rng: np.random.Generator) -> list[BiTemporalSample]:
    """Extra training tiles centred on individual changed regions.

    Each 8-connected component of the change mask yields ``crops_per_instance``
    windows that contain at least one of its pixels. A component wider or taller
    than the tile is covered by a window centred on its bounding box.
    """
    if crops_per_instance < 0:
        raise ConfigError("crops_per_instance must be >= 0")
    out = []
    structure = np.ones((3, 3), dtype=bool)
    for s in dataset:
        h, w = s.gt.height, s.gt.width
        if h < tile_size or w < tile_size:
            raise IngestionError(f"{s.id}: image {h}x{w} smaller than crop tile {tile_size}")
        labels, n = ndimage.label(s.gt.values, structure=structure)
        for comp, box in enumerate(ndimage.find_objects(labels), start=1):
            rows, cols = np.nonzero(labels[box] == comp)
            rows, cols = rows + box[0].start, cols + box[1].start
            too_big = (box[0].stop - box[0].start > tile_size) or (box[1].stop - box[1].start > tile_size)
            for k in range(crops_per_instance):
                if too_big:
                    cr = (box[0].start + box[0].stop) // 2
                    cc = (box[1].start + box[1].stop) // 2
                    top = min(max(cr - tile_size // 2, 0), h - tile_size)
                    left = min(max(cc - tile_size // 2, 0), w - tile_size)
                else:
                    i = int(rng.integers(len(rows)))
                    r, c = rows[i], cols[i]
                    top = int(rng.integers(max(0, r - tile_size + 1), min(r, h - tile_size) + 1))
                    left = int(rng.integers(max(0, c - tile_size + 1), min(c, w - tile_size) + 1))
                out.append(crop(s, top, left, tile_size, f"{s.id}_inst{comp}_{k}"))
    return out


# -- synthetic benchmark ----------------------------------------------------

@dataclass(frozen=True)
class SyntheticConfig:
    n_samples: int = 8
    tile_size: int = 64
    shapes_per_scene: tuple[int, int] = (3, 6)
    change_rate: float = 0.3
    shift_strength: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 0:
            raise ConfigError("n_samples must be >= 0")
        if self.tile_size < 16:
            raise ConfigError("tile_size must be >= 16")
        lo, hi = self.shapes_per_scene
        if not 0 <= lo <= hi:
            raise ConfigError(f"invalid shapes_per_scene range {self.shapes_per_scene}")
        if not 0.0 <= self.change_rate <= 1.0:
            raise ConfigError(f"change_rate must lie in [0, 1], got {self.change_rate}")
        if not (self.shift_strength >= 0 and math.isfinite(self.shift_strength)):
            raise ConfigError(f"shift_strength must be finite and >= 0, got {self.shift_strength}")
        object.__setattr__(self, "shapes_per_scene", (int(lo), int(hi)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shapes_per_scene"] = list(self.shapes_per_scene)
        return d


@dataclass
class Scene:
    """One synthetic sample together with the generator's internal state."""

    pre_rgb: np.ndarray      # HxWx3 uint8, after the pre-domain style
    post_rgb: np.ndarray
    occupancy_pre: np.ndarray  # HxW bool, union of shapes present before
    occupancy_post: np.ndarray
    gt: np.ndarray           # HxW uint8


def _smooth_noise(rng, size, cells):
    coarse = rng.random((cells, cells))
    return ndimage.zoom(coarse, size / cells, order=1, mode="nearest")[:size, :size]


def _shape_mask(rng, size, lo, hi):
    h = int(rng.integers(lo, hi + 1))
    w = int(rng.integers(lo, hi + 1))
    r0 = int(rng.integers(0, size - h + 1))
    c0 = int(rng.integers(0, size - w + 1))
    mask = np.zeros((size, size), dtype=bool)
    kind = rng.integers(3)
    if kind == 0:
        mask[r0:r0 + h, c0:c0 + w] = True
    elif kind == 1:
        rr, cc = draw.ellipse(r0 + h / 2, c0 + w / 2, h / 2, w / 2, shape=mask.shape)
        mask[rr, cc] = True
    else:
        n = int(rng.integers(3, 7))
        angles = np.sort(rng.uniform(0, 2 * np.pi, n))
        radius = rng.uniform(0.6, 1.0, n)
        rr = r0 + h / 2 + radius * np.sin(angles) * h / 2
        cc = c0 + w / 2 + radius * np.cos(angles) * w / 2
        pr, pc = draw.polygon(rr, cc, shape=mask.shape)
        mask[pr, pc] = True
    return mask


def _place(rng, size, taken, lo, hi, attempts=30):
    """A new shape mask that keeps a one-pixel gap to ``taken``, or None."""
    blocked = ndimage.binary_dilation(taken, iterations=1)
    for _ in range(attempts):
        mask = _shape_mask(rng, size, lo, hi)
        if mask.sum() >= 4 and not (mask & blocked).any():
            return mask
    return None


def _hue_rotation(angle):
    """RGB matrix rotating colours by ``angle`` radians about the grey axis."""
    c, s = math.cos(angle), math.sin(angle)
    k = 1.0 / 3.0
    sq = math.sqrt(k)
    return np.array([
        [c + (1 - c) * k, k * (1 - c) - sq * s, k * (1 - c) + sq * s],
        [k * (1 - c) + sq * s, c + k * (1 - c), k * (1 - c) - sq * s],
        [k * (1 - c) - sq * s, k * (1 - c) + sq * s, c + k * (1 - c)],
    ])


# maxima per domain at shift_strength 1; the two domains sit at opposite signs
STYLE_HUE_DEGREES = 60.0
STYLE_BRIGHTNESS = 0.15
STYLE_GAIN = 0.2
STYLE_NOISE = 0.03


def style_transform(rgb: np.ndarray, sign: int, strength: float, rng) -> np.ndarray:
    """Photometric domain style; ``sign`` +1 and -1 give disjoint parameter ranges.

    The pre domain is rotated towards positive hue, brightened and warmed; the
    post domain the opposite way. Every parameter scales with ``strength``.
    """
    if strength == 0:
        return rgb
    u = rng.uniform(0.5, 1.0, 3)
    angle = sign * u[0] * math.radians(STYLE_HUE_DEGREES) * strength
    brightness = sign * u[1] * STYLE_BRIGHTNESS * strength
    g = u[2] * STYLE_GAIN * strength
    gain = np.array([1 + sign * g, 1.0, 1 - sign * g])
    out = rgb @ _hue_rotation(angle).T
    out = out * gain + brightness
    out = out + rng.normal(0.0, STYLE_NOISE * strength, out.shape)
    return np.clip(out, 0.0, 1.0)


def synthesize_scene(cfg: SyntheticConfig, index: int) -> Scene:
    rng = np.random.default_rng([cfg.seed, index])
    size = cfg.tile_size
    base_colour = rng.uniform(0.25, 0.6, 3)
    texture = 0.12 * (_smooth_noise(rng, size, 6) - 0.5) + 0.04 * (rng.random((size, size)) - 0.5)
    background = np.clip(base_colour + texture[..., None] * np.array([1.0, 0.9, 0.8]), 0, 1)

    lo, hi = max(3, size // 10), max(4, size // 4)
    n_shapes = int(rng.integers(cfg.shapes_per_scene[0], cfg.shapes_per_scene[1] + 1))
    taken = np.zeros((size, size), dtype=bool)
    base = []
    for _ in range(n_shapes):
        m = _place(rng, size, taken, lo, hi)
        if m is not None:
            base.append((m, rng.uniform(0.0, 1.0, 3)))
            taken |= m
    removed = [rng.random() < cfg.change_rate for _ in base]
    added = []
    for _ in range(len(base) or 1):
        if rng.random() < cfg.change_rate:
            m = _place(rng, size, taken, lo, hi)
            if m is not None:
                added.append((m, rng.uniform(0.0, 1.0, 3)))
                taken |= m
    pre_shapes = base
    post_shapes = [s for s, r in zip(base, removed) if not r] + added

    def render(shapes):
        img = background.copy()
        occ = np.zeros((size, size), dtype=bool)
        for mask, colour in shapes:
            img[mask] = np.clip(colour + 0.5 * texture[mask][:, None], 0, 1)
            occ |= mask
        return img, occ

    pre_clean, occ_pre = render(pre_shapes)
    post_clean, occ_post = render(post_shapes)
    pre = style_transform(pre_clean, +1, cfg.shift_strength, rng)
    post = style_transform(post_clean, -1, cfg.shift_strength, rng)
    return Scene(
        pre_rgb=np.rint(pre * 255).astype(np.uint8),
        post_rgb=np.rint(post * 255).astype(np.uint8),
        occupancy_pre=occ_pre,
        occupancy_post=occ_post,
        gt=(occ_pre ^ occ_post).astype(np.uint8),
    )


def synthesize_benchmark(cfg: SyntheticConfig) -> list[BiTemporalSample]:
    out = []
    for i in range(cfg.n_samples):
        scene = synthesize_scene(cfg, i)
        out.append(BiTemporalSample(normalize_image(scene.pre_rgb), normalize_image(scene.post_rgb),
                                    ChangeMask(scene.gt), id=f"syn_{i:05d}"))
    return out


def write_manifest(path, cfg: SyntheticConfig, **extra) -> None:
    Path(path).write_text(json.dumps({"generator": cfg.to_dict(), **extra}, indent=2, sort_keys=True) + "\n")
