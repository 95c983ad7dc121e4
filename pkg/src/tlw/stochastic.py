"""Seeded, counter-based randomness and the relaxed Bernoulli sampler."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np

from . import tensor as T

P_CLAMP = 1e-6
_MASK64 = (1 << 64) - 1

StreamKey = Union[int, str]


def _stream_id(parts: Tuple[StreamKey, ...]) -> int:
    h = hashlib.sha256(repr(tuple(parts)).encode()).digest()
    return int.from_bytes(h[:8], "little")


@dataclass
class RngState:
    """A 64-bit seed plus a stream position.

    Draws come from Philox keyed by (seed, stream) with the position in the
    high counter word, so draw ``n`` at position ``t`` can be regenerated
    without replaying earlier positions.
    """

    seed: int
    position: int = 0

    def generator(self, *stream: StreamKey, position: Optional[int] = None) -> np.random.Generator:
        pos = self.position if position is None else position
        key = np.array([self.seed & _MASK64, _stream_id(stream)], dtype=np.uint64)
        counter = np.array([0, 0, 0, pos & _MASK64], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key, counter=counter))

    def advance(self, steps: int = 1) -> None:
        self.position += steps

    def to_dict(self) -> dict:
        return {"seed": self.seed, "position": self.position}

    @classmethod
    def from_dict(cls, d: dict) -> "RngState":
        return cls(seed=int(d["seed"]), position=int(d["position"]))


def seed_all(seed: int) -> RngState:
    return RngState(seed=int(seed) & _MASK64, position=0)


def uniform_noise(gen: np.random.Generator, shape) -> np.ndarray:
    """Uniform draws strictly inside (0, 1), float64."""
    u = gen.random(shape)
    return np.clip(u, np.finfo(np.float64).tiny, 1.0 - np.finfo(np.float64).epsneg)


def logistic_noise(u: np.ndarray) -> np.ndarray:
    return np.log(u) - np.log1p(-u)


def relaxed_bernoulli(p: T.Tensor, tau: float, u: np.ndarray) -> T.Tensor:
    """sigmoid((logit(p) + logit(u)) / tau) for given uniform noise ``u``."""
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    pc = T.clamp(p, P_CLAMP, 1.0 - P_CLAMP)
    logit_p = T.log(pc) - T.log(1.0 - pc)
    noise = T.Tensor(logistic_noise(u), dtype=p.dtype)
    w = T.sigmoid((logit_p + noise) * (1.0 / tau))
    # keep draws strictly inside (0, 1) after float rounding
    fi = np.finfo(p.dtype)
    return T.clamp(w, float(fi.tiny), float(1.0 - fi.epsneg))


def sample_relaxed_bernoulli(
    p: T.Tensor, tau: float, rng: Union[RngState, np.random.Generator]
) -> T.Tensor:
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    gen = rng.generator("relaxed_bernoulli") if isinstance(rng, RngState) else rng
    return relaxed_bernoulli(p, tau, uniform_noise(gen, p.shape))
