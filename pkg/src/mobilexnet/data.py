"""RGB-D sample loading, dataset crop recipes, online augmentation, batching.

Every spatial transform computes one source-coordinate map and applies it to
rgb (bilinear), depth and validity (nearest), so the three fields always move
in lockstep. Depth is never interpolated across pixels.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image
from scipy import ndimage

from .layers import interp_matrix


class DataError(ValueError):
    pass


@dataclass
class DepthSample:
    rgb: np.ndarray       # (H, W, 3) uint8
    depth_m: np.ndarray   # (H, W) float32, metres
    valid: np.ndarray     # (H, W) bool

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.uint8)
        self.depth_m = np.asarray(self.depth_m, dtype=np.float32)
        self.valid = np.asarray(self.valid, dtype=bool)
        hw = self.depth_m.shape
        if self.rgb.shape != hw + (3,) or self.valid.shape != hw:
            raise DataError(f"rgb {self.rgb.shape}, depth {hw}, valid {self.valid.shape} disagree")

    @property
    def hw(self) -> Tuple[int, int]:
        return self.depth_m.shape


@dataclass(frozen=True)
class AugmentConfig:
    rotation_deg: Tuple[float, float] = (-5.0, 5.0)
    scale: Tuple[float, float] = (1.0, 1.5)
    jitter: Tuple[float, float] = (0.6, 1.4)
    flip_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for name in ("rotation_deg", "scale", "jitter"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} interval is empty: {lo} > {hi}")
        if self.scale[0] < 1:
            raise ValueError("scale lower bound must be >= 1")
        if self.jitter[0] < 0:
            raise ValueError("jitter factors must be non-negative")
        if not 0 <= self.flip_prob <= 1:
            raise ValueError("flip_prob must lie in [0, 1]")

    @classmethod
    def identity(cls, seed: int = 0) -> "AugmentConfig":
        return cls((0.0, 0.0), (1.0, 1.0), (1.0, 1.0), 0.0, seed)


# -- manifest ---------------------------------------------------------------------

RECIPES = ("half_center_crop", "bottom_crop", "center_crop", "none")


@dataclass(frozen=True)
class Recipe:
    name: str = "none"
    h: int = 0
    w: int = 0

    def __post_init__(self):
        if self.name not in RECIPES:
            raise DataError(f"unknown recipe {self.name!r}; expected one of {RECIPES}")


@dataclass(frozen=True)
class ManifestEntry:
    rgb_path: str
    depth_path: str
    depth_divisor: float


@dataclass
class Manifest:
    entries: List[ManifestEntry]
    recipe: Recipe = field(default_factory=Recipe)

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, i: int) -> DepthSample:
        return preprocess(load_sample(self.entries[i]), self.recipe)


def read_manifest(path: Union[str, Path]) -> Manifest:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    base = path.parent
    recipe = Recipe()
    entries = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        if line.startswith("#recipe"):
            parts = line.split()
            try:
                name = parts[1]
                h, w = (int(parts[2]), int(parts[3])) if len(parts) > 2 else (0, 0)
                recipe = Recipe(name, h, w)
            except (IndexError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: bad recipe header {line!r}") from exc
            continue
        if line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataError(f"{path}:{lineno}: expected rgb<TAB>depth<TAB>divisor")
        try:
            divisor = float(parts[2])
        except ValueError:
            raise DataError(f"{path}:{lineno}: divisor {parts[2]!r} is not a number") from None
        if not divisor > 0:
            raise DataError(f"{path}:{lineno}: divisor must be positive")
        rgb, depth = (str(base / p) if not os.path.isabs(p) else p for p in parts[:2])
        for p in (rgb, depth):
            if not os.path.exists(p):
                raise DataError(f"{path}:{lineno}: missing file {p}")
        entries.append(ManifestEntry(rgb, depth, divisor))
    if not entries:
        raise DataError(f"{path}: manifest has no samples")
    return Manifest(entries, recipe)


def write_manifest(path: Union[str, Path], entries: Sequence[ManifestEntry],
                   recipe: Recipe = Recipe()) -> None:
    lines = [f"#recipe {recipe.name} {recipe.h} {recipe.w}"]
    lines += [f"{e.rgb_path}\t{e.depth_path}\t{e.depth_divisor!r}" for e in entries]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# -- PNG io -----------------------------------------------------------------------

def load_sample(entry: ManifestEntry) -> DepthSample:
    try:
        with Image.open(entry.rgb_path) as im:
            rgb = np.asarray(im.convert("RGB"), dtype=np.uint8)
        with Image.open(entry.depth_path) as im:
            raw = np.asarray(im).astype(np.int64)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot decode {entry.rgb_path} / {entry.depth_path}: {exc}") from exc
    if raw.ndim != 2:
        raise DataError(f"{entry.depth_path}: depth PNG must be single-channel")
    if raw.shape != rgb.shape[:2]:
        raise DataError(f"size mismatch: rgb {rgb.shape[:2]} vs depth {raw.shape}")
    depth = (raw / entry.depth_divisor).astype(np.float32)
    return DepthSample(rgb, depth, raw > 0)


def encode_depth(depth_m: np.ndarray, divisor: float, valid: Optional[np.ndarray] = None) -> np.ndarray:
    raw = np.rint(np.asarray(depth_m, dtype=np.float64) * divisor)
    raw = np.clip(raw, 0, 65535).astype(np.uint16)
    if valid is not None:
        raw[~np.asarray(valid, dtype=bool)] = 0
    return raw


def save_depth_png(path, depth_m, divisor: float, valid=None) -> None:
    Image.fromarray(encode_depth(depth_m, divisor, valid)).save(path)


def save_rgb_png(path, rgb) -> None:
    Image.fromarray(np.asarray(rgb, dtype=np.uint8), mode="RGB").save(path)


def write_dataset(samples: Sequence[DepthSample], out_dir, divisor: float = 1000.0,
                  recipe: Recipe = Recipe()) -> Path:
    """Write samples as PNG pairs plus a manifest; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(samples):
        rgb_name, depth_name = f"{i:05d}_rgb.png", f"{i:05d}_depth.png"
        save_rgb_png(out / rgb_name, s.rgb)
        save_depth_png(out / depth_name, s.depth_m, divisor, s.valid)
        entries.append(ManifestEntry(rgb_name, depth_name, divisor))
    path = out / "manifest.tsv"
    write_manifest(path, entries, recipe)
    return path


# -- deterministic preprocessing -----------------------------------------------------

def resize_rgb(rgb: np.ndarray, h: int, w: int) -> np.ndarray:
    ah = interp_matrix(rgb.shape[0], h)
    aw = interp_matrix(rgb.shape[1], w)
    rows = np.tensordot(ah, rgb.astype(np.float64), axes=(1, 0))  # (h, W, C)
    out = np.tensordot(aw, rows, axes=(1, 1)).transpose(1, 0, 2)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def _nearest_index(n_in: int, n_out: int) -> np.ndarray:
    return np.minimum(np.floor((np.arange(n_out) + 0.5) * n_in / n_out).astype(int), n_in - 1)


def resize_sample(s: DepthSample, h: int, w: int) -> DepthSample:
    iy, ix = _nearest_index(s.hw[0], h), _nearest_index(s.hw[1], w)
    return DepthSample(resize_rgb(s.rgb, h, w), s.depth_m[np.ix_(iy, ix)], s.valid[np.ix_(iy, ix)])


def crop_sample(s: DepthSample, top: int, left: int, h: int, w: int) -> DepthSample:
    H, W = s.hw
    if h > H or w > W or top < 0 or left < 0 or top + h > H or left + w > W:
        raise DataError(f"crop {h}x{w} at ({top},{left}) does not fit a {H}x{W} image")
    sl = (slice(top, top + h), slice(left, left + w))
    return DepthSample(s.rgb[sl], s.depth_m[sl], s.valid[sl])


def preprocess(s: DepthSample, recipe: Recipe) -> DepthSample:
    H, W = s.hw
    if recipe.name == "none":
        return s
    if recipe.name == "half_center_crop":
        s = resize_sample(s, H // 2, W // 2)
        H, W = s.hw
    if recipe.h > H or recipe.w > W:
        raise DataError(f"crop {recipe.h}x{recipe.w} larger than image {H}x{W}")
    left = (W - recipe.w) // 2
    top = H - recipe.h if recipe.name == "bottom_crop" else (H - recipe.h) // 2
    return crop_sample(s, top, left, recipe.h, recipe.w)


# -- augmentation ------------------------------------------------------------------

def _warp(s: DepthSample, sy: np.ndarray, sx: np.ndarray) -> DepthSample:
    """Resample all fields at source coordinates (sy, sx) per output pixel."""
    H, W = s.hw
    iy, ix = np.rint(sy).astype(int), np.rint(sx).astype(int)
    inside = (iy >= 0) & (iy < H) & (ix >= 0) & (ix < W)
    iyc, ixc = np.clip(iy, 0, H - 1), np.clip(ix, 0, W - 1)
    valid = inside & s.valid[iyc, ixc]
    depth = np.where(valid, s.depth_m[iyc, ixc], 0).astype(np.float32)
    rgb = np.empty(s.rgb.shape, dtype=np.float64)
    src = s.rgb.astype(np.float64)
    for ch in range(3):
        rgb[..., ch] = ndimage.map_coordinates(src[..., ch], [sy, sx], order=1, mode="nearest")
    rgb[~inside] = 0
    return DepthSample(np.clip(np.rint(rgb), 0, 255).astype(np.uint8), depth, valid)


def _grid(H, W):
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    y, x = np.mgrid[0:H, 0:W].astype(np.float64)
    return y - cy, x - cx, cy, cx


def rotate_and_zoom(s: DepthSample, angle_deg: float, factor: float) -> DepthSample:
    """Rotate by ``angle_deg`` about the centre, then scale content by ``factor``.

    Both steps are folded into one inverse coordinate map, so every field is
    resampled exactly once. Depth is divided by the scale factor.
    """
    if angle_deg == 0 and factor == 1:
        return s
    dy, dx, cy, cx = _grid(*s.hw)
    dy, dx = dy / factor, dx / factor
    t = math.radians(angle_deg)
    c, sn = math.cos(t), math.sin(t)
    out = _warp(s, cy + c * dy - sn * dx, cx + sn * dy + c * dx)
    if factor != 1:
        out.depth_m = (out.depth_m / np.float32(factor)).astype(np.float32)
    return out


def rotate(s: DepthSample, angle_deg: float) -> DepthSample:
    return rotate_and_zoom(s, angle_deg, 1.0)


def zoom(s: DepthSample, factor: float) -> DepthSample:
    """Scale content by ``factor`` about the centre, crop back, divide depth."""
    return rotate_and_zoom(s, 0.0, factor)


def color_jitter(rgb: np.ndarray, brightness: float, contrast: float, saturation: float) -> np.ndarray:
    img = rgb.astype(np.float64)
    lum = np.array([0.299, 0.587, 0.114])
    img = np.clip(img * brightness, 0, 255)
    mean = (img @ lum).mean()
    img = np.clip(mean + contrast * (img - mean), 0, 255)
    gray = (img @ lum)[..., None]
    img = np.clip(gray + saturation * (img - gray), 0, 255)
    return np.rint(img).astype(np.uint8)


def hflip(s: DepthSample) -> DepthSample:
    return DepthSample(s.rgb[:, ::-1].copy(), s.depth_m[:, ::-1].copy(), s.valid[:, ::-1].copy())


def augment(s: DepthSample, cfg: AugmentConfig, rng: np.random.Generator) -> DepthSample:
    """Rotate, scale, colour-jitter and flip, in that order."""
    angle = rng.uniform(*cfg.rotation_deg)
    factor = rng.uniform(*cfg.scale)
    b, c, sat = (rng.uniform(*cfg.jitter) for _ in range(3))
    flip = rng.random() < cfg.flip_prob
    s = rotate_and_zoom(s, angle, factor)
    if (b, c, sat) != (1.0, 1.0, 1.0):
        s = DepthSample(color_jitter(s.rgb, b, c, sat), s.depth_m, s.valid)
    return hflip(s) if flip else s


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, index])


# -- batching ------------------------------------------------------------------------

Batch = Tuple[np.ndarray, np.ndarray, np.ndarray]


def epoch_order(n: int, seed: int, epoch: int, shuffle: bool = True) -> np.ndarray:
    if not shuffle:
        return np.arange(n)
    return np.random.default_rng([seed, epoch]).permutation(n)


def to_arrays(samples: Sequence[DepthSample]) -> Batch:
    shapes = {s.hw for s in samples}
    if len(shapes) != 1:
        raise DataError(f"cannot batch samples of different sizes {sorted(shapes)}")
    rgb = np.stack([s.rgb for s in samples]).transpose(0, 3, 1, 2).astype(np.float32) / 255.0
    depth = np.stack([s.depth_m for s in samples])[:, None].astype(np.float32)
    mask = np.stack([s.valid for s in samples])[:, None]
    return rgb, depth, mask


def batch_iter(source, batch_size: int, shuffle_seed: int = 0, epoch: int = 0,
               augment_cfg: Optional[AugmentConfig] = None, shuffle: bool = True) -> Iterator[Batch]:
    """Yield (rgb, depth, mask) batches; rgb scaled to [0, 1], NCHW.

    Each sample's augmentation stream depends only on (seed, epoch, index),
    so the batch stream is independent of prefetching or worker order.
    """
    n = len(source)
    if n == 0:
        raise DataError("empty dataset")
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    order = epoch_order(n, shuffle_seed, epoch, shuffle)
    for start in range(0, n, batch_size):
        chunk = []
        for idx in order[start:start + batch_size]:
            s = source[int(idx)]
            if augment_cfg is not None:
                s = augment(s, augment_cfg, sample_rng(augment_cfg.seed, epoch, int(idx)))
            chunk.append(s)
        yield to_arrays(chunk)


# -- synthetic data --------------------------------------------------------------------

def synthetic_planes(n: int = 8, h: int = 32, w: int = 32, seed: int = 0,
                     depth_range: Tuple[float, float] = (1.0, 4.0)) -> List[DepthSample]:
    """Fronto-parallel planes at evenly spaced depths.

    Each image has a flat colour whose brightness tracks the plane depth plus a
    per-sample tint and fixed low-amplitude texture, so samples are distinct.
    """
    rng = np.random.default_rng(seed)
    depths = np.linspace(depth_range[0], depth_range[1], n)
    out = []
    for d in depths:
        level = 40 + 170 * (d - depth_range[0]) / max(depth_range[1] - depth_range[0], 1e-9)
        tint = rng.uniform(-25, 25, size=3)
        texture = rng.normal(0, 4, size=(h, w, 1))
        rgb = np.clip(level + tint + texture, 0, 255)
        out.append(DepthSample(np.rint(rgb).astype(np.uint8),
                               np.full((h, w), d, np.float32), np.ones((h, w), bool)))
    return out
