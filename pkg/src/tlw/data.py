"""PNG I/O, bicubic resampling, luma, and patch pairs.

Image arrays here are plain float32 numpy arrays in NCHW layout with values
in [0, 1]; they only become graph tensors at the model boundary.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np
from PIL import Image

from .stochastic import RngState

logger = logging.getLogger(__name__)

CUBIC_A = -0.5
SCALES = (2, 3, 4)


# -- PNG ------------------------------------------------------------------------

def load_png(path) -> np.ndarray:
    """Decode an 8-bit RGB or grayscale PNG to (1, C, H, W) float32 in [0, 1]."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            fmt = im.format
            if fmt != "PNG":
                raise ValueError(f"{path}: expected PNG, found {fmt}")
            if im.mode == "P":
                im = im.convert("RGB")
            if im.mode not in ("L", "RGB"):
                raise ValueError(f"{path}: unsupported PNG mode {im.mode!r} (need 8-bit RGB or L)")
            arr = np.asarray(im, dtype=np.uint8)
    except (OSError, SyntaxError) as exc:
        raise ValueError(f"cannot decode image {path}: {exc}") from exc
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return (arr.transpose(2, 0, 1)[None].astype(np.float32) / 255.0).astype(np.float32)


def to_uint8(img) -> np.ndarray:
    """Clamp to [0, 1], scale by 255, round half away from zero."""
    v = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0
    return np.floor(v + 0.5).astype(np.uint8)


def save_png(img, path) -> None:
    arr = np.asarray(img)
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise ValueError(f"save_png takes a single image, got batch of {arr.shape[0]}")
        arr = arr[0]
    if arr.ndim == 3:
        arr = arr.transpose(1, 2, 0)
        if arr.shape[2] == 1:
            arr = arr[:, :, 0]
    q = to_uint8(arr)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        Image.fromarray(q, mode="L" if q.ndim == 2 else "RGB").save(path, format="PNG")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def as_rgb(img: np.ndarray) -> np.ndarray:
    return np.repeat(img, 3, axis=1) if img.shape[1] == 1 else img


# -- bicubic --------------------------------------------------------------------

def cubic(x: np.ndarray, a: float = CUBIC_A) -> np.ndarray:
    x = np.abs(x)
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def resize_weights(in_size: int, out_size: int) -> np.ndarray:
    """(out_size, in_size) interpolation matrix for one axis.

    Downscaling stretches the kernel by 1/scale (antialiasing). Taps outside
    the image are clamped to the border pixel; each row sums to 1.
    """
    scale = out_size / in_size
    stretch = min(scale, 1.0)
    width = 4.0 / stretch
    out = np.arange(out_size, dtype=np.float64)
    centre = (out + 0.5) / scale - 0.5
    left = np.floor(centre - width / 2).astype(np.int64)
    taps = int(np.ceil(width)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]
    wts = stretch * cubic(stretch * (centre[:, None] - idx))
    wts /= wts.sum(axis=1, keepdims=True)
    idx = np.clip(idx, 0, in_size - 1)
    mat = np.zeros((out_size, in_size))
    rows = np.repeat(np.arange(out_size), taps)
    np.add.at(mat, (rows, idx.ravel()), wts.ravel())
    return mat


def bicubic_resize(img, out_h: int, out_w: int) -> np.ndarray:
    img = np.asarray(img)
    if out_h <= 0 or out_w <= 0:
        raise ValueError(f"target size must be positive, got {out_h}x{out_w}")
    h, w = img.shape[-2:]
    if (h, w) == (out_h, out_w):
        return img.astype(np.float32, copy=True)
    rh = resize_weights(h, out_h)
    rw = resize_weights(w, out_w)
    out = np.einsum("ph,...hw,qw->...pq", rh, img.astype(np.float64), rw)
    return out.astype(np.float32)


def degrade(hr: np.ndarray, scale: int) -> np.ndarray:
    h, w = hr.shape[-2:]
    return bicubic_resize(hr, h // scale, w // scale)


def crop_to_scale(img: np.ndarray, scale: int) -> np.ndarray:
    h, w = img.shape[-2:]
    return img[..., : h - h % scale, : w - w % scale]


# -- color ----------------------------------------------------------------------

def rgb_to_y(img) -> np.ndarray:
    """Studio-swing BT.601 luma of an (N, 3, H, W) image in [0, 1]; returns (N, 1, H, W)."""
    img = np.asarray(img, dtype=np.float64)
    if img.shape[-3] != 3:
        raise ValueError(f"rgb_to_y needs 3 channels, got {img.shape[-3]}")
    r, g, b = img[..., 0:1, :, :], img[..., 1:2, :, :], img[..., 2:3, :, :]
    return (16.0 + 65.481 * r + 128.553 * g + 24.966 * b) / 255.0


# -- pairs and manifests ----------------------------------------------------

@dataclass
class ImagePair:
    hr: np.ndarray
    lr: np.ndarray
    lr_up: np.ndarray
    scale: int
    name: str = ""


def make_pair(hr: np.ndarray, scale: int, name: str = "") -> ImagePair:
    if scale not in SCALES:
        raise ValueError(f"scale must be one of {SCALES}, got {scale}")
    hr = crop_to_scale(as_rgb(hr), scale).astype(np.float32)
    lr = degrade(hr, scale)
    lr_up = bicubic_resize(lr, hr.shape[-2], hr.shape[-1])
    return ImagePair(hr=hr, lr=lr, lr_up=lr_up, scale=scale, name=name)


@dataclass
class DatasetManifest:
    paths: List[Path]
    splits: List[str]
    root: Path = field(default_factory=Path)
    scale: Optional[int] = None

    @classmethod
    def load(cls, manifest_path, scale: Optional[int] = None) -> "DatasetManifest":
        manifest_path = Path(manifest_path)
        try:
            entries = json.loads(manifest_path.read_text())
        except OSError as exc:
            raise OSError(f"cannot read manifest {manifest_path}: {exc}") from exc
        root = manifest_path.parent
        paths = [root / e["path"] for e in entries]
        splits = [e.get("split", "train") for e in entries]
        missing = [str(p) for p in paths if not p.is_file()]
        if missing:
            raise FileNotFoundError(f"manifest {manifest_path} references missing files: {', '.join(missing)}")
        return cls(paths=paths, splits=splits, root=root, scale=scale)

    def select(self, split: Optional[str]) -> List[Path]:
        if split is None:
            return list(self.paths)
        return [p for p, s in zip(self.paths, self.splits) if s == split]

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for p, s in zip(self.paths, self.splits):
            h.update(str(p.relative_to(self.root) if p.is_relative_to(self.root) else p).encode())
            h.update(s.encode())
            h.update(hashlib.sha256(p.read_bytes()).digest())
        return h.hexdigest()


def grid_positions(size: int, patch: int, stride: int) -> List[int]:
    return list(range(0, size - patch + 1, stride))


def extract_patches(img: np.ndarray, patch: int, stride: int) -> List[np.ndarray]:
    h, w = img.shape[-2:]
    return [
        img[..., i : i + patch, j : j + patch]
        for i in grid_positions(h, patch, stride)
        for j in grid_positions(w, patch, stride)
    ]


def make_pairs(
    images: Iterable,
    scale: int,
    patch: int,
    stride: int,
    seed: int,
) -> List[ImagePair]:
    """Fixed-grid patches from each image, degraded, then shuffled by seed.

    ``images`` is a DatasetManifest, a list of paths, or a list of arrays.
    """
    if patch % scale:
        raise ValueError(f"patch size {patch} is not divisible by scale {scale}")
    if isinstance(images, DatasetManifest):
        images = images.paths
    pairs = []
    for idx, item in enumerate(images):
        if isinstance(item, (str, Path)):
            name, img = Path(item).stem, load_png(item)
        else:
            name, img = f"img{idx:04d}", np.asarray(item, dtype=np.float32)
        h, w = img.shape[-2:]
        if h < patch or w < patch:
            logger.warning("skipping %s: %dx%d is smaller than patch %d", name, h, w, patch)
            continue
        for n, p in enumerate(extract_patches(img, patch, stride)):
            pairs.append(make_pair(p, scale, name=f"{name}_p{n:03d}"))
    order = RngState(seed).generator("make_pairs").permutation(len(pairs))
    return [pairs[i] for i in order]


def load_images(paths: Sequence) -> List[np.ndarray]:
    return [as_rgb(load_png(p)) for p in paths]


# -- toy corpus -------------------------------------------------------------

def toy_image(gen: np.random.Generator, size: int = 32) -> np.ndarray:
    """One procedural RGB patch with hard edges: banded gradient, checkerboard, or disks."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / (size - 1)
    kind = gen.integers(3)
    c0, c1 = gen.uniform(0.05, 0.95, (2, 3))
    theta = gen.uniform(0, 2 * np.pi)
    t = np.cos(theta) * xx + np.sin(theta) * yy
    t = (t - t.min()) / (t.max() - t.min() + 1e-12)
    if kind == 0:
        bands = int(gen.integers(3, 7))
        t = np.floor(t * bands) / (bands - 1)
        img = c0[:, None, None] * (1 - t) + c1[:, None, None] * t
    elif kind == 1:
        period = int(gen.integers(4, 9))
        oy, ox = gen.integers(0, period, 2)
        ii, jj = np.mgrid[0:size, 0:size]
        mask = (((ii + oy) // period + (jj + ox) // period) % 2).astype(np.float64)
        img = c0[:, None, None] * (1 - mask) + c1[:, None, None] * mask
    else:
        img = c0[:, None, None] * (1 - t) + c1[:, None, None] * t
        for _ in range(int(gen.integers(2, 6))):
            cy, cx = gen.uniform(0, 1, 2)
            r = gen.uniform(0.08, 0.3)
            inside = ((yy - cy) ** 2 + (xx - cx) ** 2) <= r * r
            img[:, inside] = gen.uniform(0.05, 0.95, 3)[:, None]
    return np.clip(img, 0.0, 1.0)[None].astype(np.float32)


def toy_corpus(count: int = 200, size: int = 32, seed: int = 0) -> List[np.ndarray]:
    gen = RngState(seed).generator("toy_corpus")
    return [toy_image(gen, size) for _ in range(count)]


def toy_pairs(count: int, scale: int = 2, size: int = 32, seed: int = 0) -> List[ImagePair]:
    return [make_pair(img, scale, name=f"toy{i:04d}") for i, img in enumerate(toy_corpus(count, size, seed))]
