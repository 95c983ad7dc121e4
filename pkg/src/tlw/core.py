"""Trainable loss weights: FixedSum, the weight criterion and the two losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .judge import Judge

FIXEDSUM_EPS = 1e-8
WC_EPS = 1e-6
MSE_WEIGHT_OFFSET = 0.1

BASE_LOSS_KINDS = ("l1", "mse")
DIRECTIONS = ("inverted", "literal")


def _check_k(k: float) -> None:
    if not 0.0 < k < 1.0:
        raise ValueError(f"FixedSum ratio k must lie in (0, 1), got {k}")


def fixedsum(x: T.Tensor, k: float) -> T.Tensor:
    """Rescale each image (leading axis) so its elements sum to k*N, staying in [0, 1].

    Below target the gap is filled proportionally to each element's headroom
    ``1 - x``; above target every element is scaled down by ``kN / S``.
    """
    _check_k(k)
    shape = x.shape
    flat = x.data.reshape(shape[0], -1).astype(np.float64)
    n = flat.shape[1]
    s = flat.sum(axis=1, keepdims=True)
    kn = k * n
    grow = kn > s
    den_grow = np.maximum(n - s, FIXEDSUM_EPS)
    den_shrink = np.maximum(s, FIXEDSUM_EPS)
    c = (kn - s) / den_grow
    scale = kn / den_shrink
    out = np.where(grow, flat + c * (1.0 - flat), flat * scale)

    def bw(g):
        g = g.reshape(shape[0], -1).astype(np.float64)
        # branch kN > S: diag (N-kN)/(N-S) plus rank-one (1-x_i)(kN-N)/(N-S)^2
        up = g * (n - kn) / den_grow + np.sum(g * (1.0 - flat), axis=1, keepdims=True) * (kn - n) / den_grow**2
        # branch kN <= S: diag kN/S minus rank-one x_i kN/S^2
        down = g * scale - np.sum(g * flat, axis=1, keepdims=True) * kn / den_shrink**2
        return (np.where(grow, up, down).reshape(shape),)

    return T.apply_op(out.reshape(shape), (x,), bw, "fixedsum")


def fixedsum_jacobian(x: np.ndarray, k: float) -> np.ndarray:
    """Dense d out_i / d x_j for a single vector, written out term by term."""
    _check_k(k)
    x = np.asarray(x, dtype=np.float64).ravel()
    n = x.size
    s = x.sum()
    kn = k * n
    eye = np.eye(n)
    if kn > s:
        return eye * (n - kn) / (n - s) + np.outer(1.0 - x, np.ones(n)) * (kn - n) / (n - s) ** 2
    return eye * kn / s - np.outer(x, np.ones(n)) * kn / s**2


@dataclass
class CriterionValue:
    """WC = (num + eps) / (den + eps), one entry per image."""

    numerator: T.Tensor
    denominator: T.Tensor
    eps: float = WC_EPS

    @property
    def log_wc(self) -> T.Tensor:
        return T.log(self.numerator + self.eps) - T.log(self.denominator + self.eps)

    @property
    def wc(self) -> T.Tensor:
        return (self.numerator + self.eps) / (self.denominator + self.eps)

    def detach(self) -> "CriterionValue":
        return CriterionValue(T.detach(self.numerator), T.detach(self.denominator), self.eps)


def blends(x: T.Tensor, x_hat: T.Tensor, w: T.Tensor):
    """(x_w, x_{1-w}): each pixel taken from the reference with weight w, or 1 - w."""
    one_minus = 1.0 - w
    x_w = one_minus * x_hat + w * x
    x_inv = w * x_hat + one_minus * x
    return x_w, x_inv


def weight_criterion(
    x: T.Tensor,
    x_hat: T.Tensor,
    w: T.Tensor,
    judge: Judge,
    eps: float = WC_EPS,
    x_features=None,
) -> CriterionValue:
    if x.shape != x_hat.shape:
        raise T.ShapeError(f"reference and estimate differ in shape: {x.shape} vs {x_hat.shape}")
    x_w, x_inv = blends(x, x_hat, w)
    if x_features is None and judge.spec.kind == "fixed-feature":
        with T.no_grad():
            x_features = judge.features(x)
    num = judge.distance(x_w, x, b_features=x_features)
    den = judge.distance(x_inv, x, b_features=x_features)
    return CriterionValue(num, den, eps)


def _check_direction(direction: str) -> None:
    if direction not in DIRECTIONS:
        raise ValueError(f"unknown criterion direction {direction!r}; expected one of {DIRECTIONS}")


def posterior_weight(wc, direction: str = "inverted"):
    """Unnormalised posterior mass of a weight map: WC itself, or 1/WC."""
    _check_direction(direction)
    if isinstance(wc, CriterionValue):
        wc = wc.wc.data
    wc = np.asarray(wc, dtype=np.float64)
    m = wc if direction == "literal" else 1.0 / wc
    return float(m) if m.ndim == 0 else m


def log_posterior_weight(crit: CriterionValue, direction: str = "inverted") -> np.ndarray:
    _check_direction(direction)
    num = crit.numerator.data.astype(np.float64) + crit.eps
    den = crit.denominator.data.astype(np.float64) + crit.eps
    log_wc = np.log(num) - np.log(den)
    return log_wc if direction == "literal" else -log_wc


def weighted_base_norm(
    x: T.Tensor,
    x_hat: T.Tensor,
    w: Optional[T.Tensor],
    kind: str = "l1",
    per_image: bool = False,
) -> T.Tensor:
    """Mean of w * |x - x_hat| (L1) or w' * (x - x_hat)^2 (MSE).

    For MSE the weight is divided by ``|x - x_hat| + 0.1`` using the detached
    residual. ``w`` may be None for an unweighted loss.
    """
    if kind not in BASE_LOSS_KINDS:
        raise ValueError(f"unknown base loss {kind!r}; expected one of {BASE_LOSS_KINDS}")
    diff = x - x_hat
    if kind == "l1":
        err = T.abs_(diff)
        weight = w
    else:
        err = T.square(diff)
        if w is None:
            weight = None
        else:
            shrink = 1.0 / (np.abs(diff.data) + MSE_WEIGHT_OFFSET)
            weight = T.detach(w) * T.Tensor(shrink, dtype=x_hat.dtype)
    if weight is not None:
        err = T.detach(weight) * err
    if per_image:
        return T.mean(err, axis=(1, 2, 3))
    return T.mean(err)


def loss_theta(
    x: T.Tensor,
    x_hat: T.Tensor,
    samples: Sequence[T.Tensor],
    criteria: Sequence[CriterionValue],
    kind: str = "l1",
    direction: str = "inverted",
) -> T.Tensor:
    """-log sum_i m(WC_i) exp(-||w_i * (x - x_hat)||), via logsumexp, averaged over the batch.

    Samples and criterion values enter as constants.
    """
    if len(samples) == 0:
        raise ValueError("loss_theta needs at least one weight sample")
    if len(samples) != len(criteria):
        raise ValueError(f"{len(samples)} samples but {len(criteria)} criterion values")
    terms = []
    for w, crit in zip(samples, criteria):
        log_m = T.Tensor(log_posterior_weight(crit, direction), dtype=x_hat.dtype)
        norm = weighted_base_norm(x, x_hat, T.detach(w), kind, per_image=True)
        terms.append(log_m - norm)
    return -T.mean(T.logsumexp(terms))


def loss_phi(crit: CriterionValue, direction: str = "inverted") -> T.Tensor:
    """-log m(WC), batch mean: -log WC (literal) or +log WC (inverted)."""
    _check_direction(direction)
    lw = crit.log_wc
    return T.mean(-lw if direction == "literal" else lw)
