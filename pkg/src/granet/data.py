"""Image I/O, resizing, paired datasets and synthetic rain.

Images are handled as ``(h, w, 3)`` float32 arrays in [0, 1]; 8-bit
conversion happens only when reading or writing files.
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from . import config as kv

log = logging.getLogger(__name__)

__all__ = [
    "ImageError",
    "RainParams",
    "DatasetPair",
    "to_uint8",
    "from_uint8",
    "load_image",
    "save_image",
    "resize_long_side",
    "synth_rain",
    "make_scene",
    "scan_dataset",
    "IMAGE_SUFFIXES",
]

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


class ImageError(ValueError):
    pass


def to_uint8(img: np.ndarray) -> np.ndarray:
    """[0, 1] floats -> uint8, clamped, rounding half away from zero."""
    scaled = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0
    return np.floor(scaled + 0.5).astype(np.uint8)


def from_uint8(img: np.ndarray) -> np.ndarray:
    return np.asarray(img, dtype=np.float32) / np.float32(255.0)


def load_image(path: Union[str, Path]) -> np.ndarray:
    """Read an 8-bit image as (h, w, 3) float32. Grayscale is replicated to RGB."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("I;16", "I;16B", "I;16L", "I;16N", "I", "F") or mode.startswith("I;"):
                raise ImageError(f"{path}: {mode} images are not supported; only 8-bit images are accepted")
            if mode == "L":
                arr = np.asarray(im, dtype=np.uint8)
                arr = np.repeat(arr[:, :, None], 3, axis=2)
            else:
                arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except ImageError:
        raise
    except FileNotFoundError as exc:
        raise ImageError(f"{path}: no such file") from exc
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise ImageError(f"{path}: cannot decode image ({exc})") from exc
    return from_uint8(arr)


def save_image(path: Union[str, Path], img: np.ndarray) -> None:
    path = Path(path)
    arr = np.asarray(img)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ImageError(f"{path}: expected an (h, w, 3) image, got shape {arr.shape}")
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(arr), mode="RGB").save(path, format="PNG")


def _bilinear_coords(n_out: int, n_in: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, (src - lo).astype(np.float64)


def resize_long_side(img: np.ndarray, max_side: int = 512) -> np.ndarray:
    """Bilinearly shrink so that max(h, w) == max_side; smaller images pass through."""
    h, w = img.shape[:2]
    if max(h, w) <= max_side:
        return img
    if h >= w:
        nh, nw = max_side, max(1, int(round(w * max_side / h)))
    else:
        nh, nw = max(1, int(round(h * max_side / w))), max_side
    y0, y1, fy = _bilinear_coords(nh, h)
    x0, x1, fx = _bilinear_coords(nw, w)
    src = np.asarray(img, dtype=np.float64)
    top = src[y0] * (1 - fy)[:, None, None] + src[y1] * fy[:, None, None]
    out = top[:, x0] * (1 - fx)[None, :, None] + top[:, x1] * fx[None, :, None]
    return out.astype(img.dtype)


# --------------------------------------------------------------------------
# synthetic rain
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class RainParams:
    num_streaks: tuple[int, int] = (6, 16)
    length: tuple[float, float] = (6.0, 20.0)
    angle_mean: float = 0.0
    angle_std: float = 10.0
    width: tuple[float, float] = (0.8, 1.5)
    intensity: tuple[float, float] = (0.15, 0.35)
    mist_strength: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("num_streaks", "length", "width", "intensity"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"rain.{name}: low {lo} exceeds high {hi}")
        if self.num_streaks[0] < 0 or self.length[0] < 0 or self.width[0] < 0:
            raise ValueError("rain parameters must be non-negative")
        if not (0.0 <= self.intensity[0] and self.intensity[1] <= 1.0):
            raise ValueError("rain.intensity must lie in [0, 1]")
        if self.mist_strength < 0 or self.angle_std < 0:
            raise ValueError("rain.mist_strength and rain.angle_std must be non-negative")

    def to_lines(self) -> list[str]:
        return kv.to_lines(self, "rain")


def _stroke(mask: np.ndarray, x0: float, y0: float, x1: float, y1: float, width: float, value: float) -> None:
    """Add an anti-aliased segment: full value within width/2, linear falloff over one pixel."""
    h, w = mask.shape
    reach = width / 2.0 + 1.0
    r0 = max(0, int(math.floor(min(y0, y1) - reach)))
    r1 = min(h, int(math.ceil(max(y0, y1) + reach)) + 1)
    c0 = max(0, int(math.floor(min(x0, x1) - reach)))
    c1 = min(w, int(math.ceil(max(x0, x1) + reach)) + 1)
    if r0 >= r1 or c0 >= c1:
        return
    yy, xx = np.mgrid[r0:r1, c0:c1].astype(np.float64)
    dx, dy = x1 - x0, y1 - y0
    seg2 = dx * dx + dy * dy
    if seg2 > 0:
        t = np.clip(((xx - x0) * dx + (yy - y0) * dy) / seg2, 0.0, 1.0)
    else:
        t = np.zeros_like(xx)
    dist = np.hypot(xx - (x0 + t * dx), yy - (y0 + t * dy))
    cover = np.clip(reach - dist, 0.0, 1.0)
    mask[r0:r1, c0:c1] += value * cover


def _mist(h: int, w: int, strength: float, rng: np.random.Generator) -> np.ndarray:
    gh, gw = max(2, h // 16 + 2), max(2, w // 16 + 2)
    grid = rng.random((gh, gw))
    y0, y1, fy = _bilinear_coords(h, gh)
    x0, x1, fx = _bilinear_coords(w, gw)
    top = grid[y0] * (1 - fy)[:, None] + grid[y1] * fy[:, None]
    field_ = top[:, x0] * (1 - fx)[None, :] + top[:, x1] * fx[None, :]
    return strength * field_


def synth_rain(
    clean: np.ndarray, params: RainParams, rng: Optional[np.random.Generator] = None
) -> tuple[np.ndarray, np.ndarray]:
    """Additive rain: ``rainy = clip(clean + mask)``; returns (rainy, unclipped mask).

    Without an explicit ``rng`` the generator is seeded from ``params.seed``.
    The mask is gray (identical in the three channels) and non-negative.
    """
    rng = np.random.default_rng(params.seed) if rng is None else rng
    h, w = clean.shape[:2]
    plane = np.zeros((h, w), dtype=np.float64)
    count = int(rng.integers(params.num_streaks[0], params.num_streaks[1] + 1))
    for _ in range(count):
        cx, cy = rng.uniform(0, w), rng.uniform(0, h)
        length = rng.uniform(*params.length)
        angle = math.radians(rng.normal(params.angle_mean, params.angle_std))
        width = rng.uniform(*params.width)
        value = rng.uniform(*params.intensity)
        hx, hy = 0.5 * length * math.sin(angle), 0.5 * length * math.cos(angle)
        _stroke(plane, cx - hx, cy - hy, cx + hx, cy + hy, width, value)
    if params.mist_strength > 0:
        plane += _mist(h, w, params.mist_strength, rng)
    mask = np.repeat(plane[:, :, None], 3, axis=2).astype(np.float32)
    rainy = np.clip(clean.astype(np.float32) + mask, 0.0, 1.0)
    return rainy, mask


def make_scene(h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """A procedural clean image: smooth colour gradient, a few flat shapes, mild texture."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    yy /= max(h - 1, 1)
    xx /= max(w - 1, 1)
    img = np.empty((h, w, 3))
    for ch in range(3):
        a, b, c = rng.uniform(-0.4, 0.4, size=3)
        img[:, :, ch] = rng.uniform(0.2, 0.6) + a * xx + b * yy + c * xx * yy
    for _ in range(int(rng.integers(2, 6))):
        colour = rng.uniform(0.0, 0.9, size=3)
        if rng.random() < 0.5:
            cy, cx = rng.uniform(0, 1, size=2)
            r = rng.uniform(0.08, 0.3)
            inside = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        else:
            y0, x0 = rng.uniform(0, 0.8, size=2)
            y1, x1 = y0 + rng.uniform(0.1, 0.5), x0 + rng.uniform(0.1, 0.5)
            inside = (yy >= y0) & (yy < y1) & (xx >= x0) & (xx < x1)
        img[inside] = colour
    freq = rng.uniform(4, 12)
    phase = rng.uniform(0, 2 * np.pi)
    img += 0.03 * np.sin(2 * np.pi * freq * (xx + 0.5 * yy) + phase)[:, :, None]
    return np.clip(img, 0.0, 1.0).astype(np.float32)


# --------------------------------------------------------------------------
# paired datasets
# --------------------------------------------------------------------------


@dataclass
class DatasetPair:
    rainy: Path
    clean: Path
    rainy_image: Optional[np.ndarray] = field(default=None, repr=False)
    clean_image: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def name(self) -> str:
        return self.rainy.stem

    def load(self, max_side: Optional[int] = None) -> tuple[np.ndarray, np.ndarray]:
        if self.rainy_image is None:
            self.rainy_image = load_image(self.rainy)
            self.clean_image = load_image(self.clean)
            if self.rainy_image.shape != self.clean_image.shape:
                raise ImageError(
                    f"{self.rainy.name}: rainy {self.rainy_image.shape[:2]} and clean "
                    f"{self.clean_image.shape[:2]} sizes differ"
                )
            if max_side:
                self.rainy_image = resize_long_side(self.rainy_image, max_side)
                self.clean_image = resize_long_side(self.clean_image, max_side)
        return self.rainy_image, self.clean_image


def _image_files(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def scan_dataset(
    rainy_dir: Union[str, Path],
    clean_dir: Union[str, Path],
    suffix_pattern: Optional[str] = None,
) -> list[DatasetPair]:
    """Pair rainy and clean images by filename stem.

    ``suffix_pattern`` is a regex removed from the end of rainy stems before
    matching (e.g. ``r"_\\d+$"`` maps ``12_3.png`` to clean ``12.png``).
    Unpaired files and pairs whose image sizes differ are logged and skipped.
    """
    rainy_dir, clean_dir = Path(rainy_dir), Path(clean_dir)
    for d in (rainy_dir, clean_dir):
        if not d.is_dir():
            raise FileNotFoundError(f"dataset directory {d} does not exist")
    strip = re.compile(suffix_pattern + ("" if suffix_pattern.endswith("$") else "$")) if suffix_pattern else None
    clean_by_stem = {p.stem: p for p in _image_files(clean_dir)}
    used: set[str] = set()
    pairs: list[DatasetPair] = []
    for rp in _image_files(rainy_dir):
        stem = strip.sub("", rp.stem) if strip else rp.stem
        cp = clean_by_stem.get(stem)
        if cp is None:
            log.warning("no clean image for %s", rp.name)
            continue
        used.add(stem)
        try:
            with Image.open(rp) as a, Image.open(cp) as b:
                sa, sb = a.size, b.size
        except (UnidentifiedImageError, OSError) as exc:
            log.warning("skipping %s: %s", rp.name, exc)
            continue
        if sa != sb:
            log.warning("skipping %s: rainy size %s does not match clean size %s", rp.name, sa, sb)
            continue
        pairs.append(DatasetPair(rp, cp))
    for stem in sorted(set(clean_by_stem) - used):
        log.warning("clean image %s has no rainy counterpart", clean_by_stem[stem].name)
    return pairs
