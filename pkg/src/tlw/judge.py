"""Perceptual distance judges.

The fixed-feature judge follows the LPIPS computation pattern (conv stack,
channel unit-normalisation, squared feature differences averaged over space
and summed over layers) but uses frozen seeded filters instead of pretrained
weights. Its magnitudes are not comparable with real LPIPS.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T

NORM_EPS = 1e-10
JUDGE_KINDS = ("pixel-mse", "fixed-feature")


@dataclass(frozen=True)
class JudgeSpec:
    kind: str = "fixed-feature"
    layer_widths: Tuple[int, ...] = (16, 32, 64)
    kernel: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.kind not in JUDGE_KINDS:
            raise ValueError(f"unknown judge kind {self.kind!r}; expected one of {JUDGE_KINDS}")
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        if self.kind == "fixed-feature" and not self.layer_widths:
            raise ValueError("fixed-feature judge needs at least one layer")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "layer_widths": list(self.layer_widths),
            "kernel": self.kernel,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "JudgeSpec":
        unknown = set(d) - {"kind", "layer_widths", "kernel", "seed"}
        if unknown:
            raise KeyError(f"unknown judge key(s): {sorted(unknown)}")
        return cls(**{k: (tuple(v) if k == "layer_widths" else v) for k, v in d.items()})


def build_fixed_feature_judge(layer_widths: Sequence[int], kernel: int = 3, seed: int = 0) -> JudgeSpec:
    return JudgeSpec(kind="fixed-feature", layer_widths=tuple(layer_widths), kernel=kernel, seed=seed)


def _orthogonal_filters(rng: np.random.Generator, out_ch: int, in_ch: int, k: int) -> np.ndarray:
    fan_in = in_ch * k * k
    a = rng.standard_normal((max(out_ch, fan_in), min(out_ch, fan_in)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    q = q if out_ch >= fan_in else q.T
    # orthonormal rows/cols, rescaled so ReLU activations keep their variance
    return (np.sqrt(2.0) * q[:out_ch, :fan_in]).reshape(out_ch, in_ch, k, k)


def unit_normalize_channels(f: T.Tensor, eps: float = NORM_EPS) -> T.Tensor:
    """f / (||f||_channels + eps) at every pixel."""
    x = f.data.astype(np.float64)
    n = np.sqrt(np.sum(x * x, axis=1, keepdims=True))
    d = n + eps
    y = x / d

    def bw(g):
        g = g.astype(np.float64)
        dot = np.sum(g * x, axis=1, keepdims=True)
        safe_n = np.where(n > 0, n, 1.0)
        gx = g / d - np.where(n > 0, x * dot / (safe_n * d * d), 0.0)
        return (gx.astype(f.dtype),)

    return T.apply_op(y, (f,), bw, "unit_normalize")


class Judge:
    """A built judge: immutable, frozen parameters."""

    def __init__(self, spec: JudgeSpec):
        self.spec = spec
        self.layers: List[Tuple[T.Tensor, T.Tensor]] = []
        if spec.kind == "fixed-feature":
            rng = np.random.Generator(np.random.Philox(key=np.uint64(spec.seed)))
            in_ch = 3
            for width in spec.layer_widths:
                w = _orthogonal_filters(rng, width, in_ch, spec.kernel).astype(np.float32)
                w.setflags(write=False)
                b = np.zeros(width, dtype=np.float32)
                b.setflags(write=False)
                self.layers.append((T.Tensor(w), T.Tensor(b)))
                in_ch = width

    def parameters(self) -> List[T.Tensor]:
        return [t for layer in self.layers for t in layer]

    def features(self, a: T.Tensor) -> List[T.Tensor]:
        pad = self.spec.kernel // 2
        feats = []
        h = a
        for w, b in self.layers:
            h = T.relu(T.conv2d(h, w, b, padding=pad))
            feats.append(unit_normalize_channels(h))
        return feats

    def distance(
        self,
        a: T.Tensor,
        b: T.Tensor,
        b_features: Optional[List[T.Tensor]] = None,
    ) -> T.Tensor:
        """Per-image distances, shape (batch,).

        ``b_features`` may carry precomputed features of ``b`` when the same
        reference is compared many times.
        """
        if a.shape != b.shape:
            raise T.ShapeError(f"judge inputs differ in shape: {a.shape} vs {b.shape}")
        if self.spec.kind == "pixel-mse":
            return T.mean(T.square(a - b), axis=(1, 2, 3))
        fa = self.features(a)
        fb = b_features if b_features is not None else self.features(b)
        total = None
        for xa, xb in zip(fa, fb):
            d = T.mean(T.reduce("sum", T.square(xa - xb), axis=1), axis=(1, 2))
            total = d if total is None else total + d
        return total

    __call__ = distance


_CACHE: dict = {}


def get_judge(spec: JudgeSpec) -> Judge:
    if spec not in _CACHE:
        _CACHE[spec] = Judge(spec)
    return _CACHE[spec]


def judge_distance(spec: JudgeSpec, a: T.Tensor, b: T.Tensor) -> T.Tensor:
    return get_judge(spec).distance(a, b)
