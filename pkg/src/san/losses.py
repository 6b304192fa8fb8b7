"""Loss functions for the three training stages.

Every loss returns its scalar value together with the gradient(s) with
respect to its prediction argument(s), so the training loops can feed them
straight into ``engine.backward``.  All values are per-batch means.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import kernels
from .errors import ConfigError, ShapeError

PROB_EPS = 1e-7

DEFAULT_SIGMAS = (2.0, 5.0, 10.0, 20.0, 40.0, 80.0)


@dataclass(frozen=True)
class KernelBank:
    """Weighted sum of Gaussian RBF kernels.

    Each term is ``eta * exp(-||a - b||^2 / (2 * sigma))``; ``sigma`` divides
    the squared distance directly.
    """

    sigmas: tuple[float, ...] = DEFAULT_SIGMAS
    etas: tuple[float, ...] = (1.0,) * len(DEFAULT_SIGMAS)

    def __post_init__(self):
        object.__setattr__(self, "sigmas", tuple(float(s) for s in self.sigmas))
        object.__setattr__(self, "etas", tuple(float(e) for e in self.etas))
        if not self.sigmas:
            raise ConfigError("kernel bank is empty")
        if len(self.sigmas) != len(self.etas):
            raise ConfigError("kernel bank needs one weight per bandwidth")
        if min(self.sigmas) <= 0 or min(self.etas) <= 0:
            raise ConfigError("kernel bandwidths and weights must be positive")

    @property
    def total_weight(self) -> float:
        return sum(self.etas)


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.01
    beta: float = 1e-4
    gamma: float = 0.01
    margin: float = 5.0

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.margin <= 0:
            raise ConfigError("contrastive margin must be positive")


@dataclass(frozen=True, eq=False)
class PairLabels:
    """Same-class indicator per pair; ``y_false`` is its complement."""

    y_true: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y_true, dtype=np.float64).reshape(-1)
        if not np.all((y == 0) | (y == 1)):
            raise ConfigError("pair labels must be 0 or 1")
        object.__setattr__(self, "y_true", y)

    @property
    def y_false(self) -> np.ndarray:
        return 1.0 - self.y_true

    @classmethod
    def from_classes(cls, left, right) -> "PairLabels":
        return cls((np.asarray(left) == np.asarray(right)).astype(np.float64))

    def __len__(self):
        return self.y_true.size


def _same_shape(a, b, what):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")
    return a, b


def _mse(target, pred, what):
    target, pred = _same_shape(target, pred, what)
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def loss_rec(X, Xhat):
    """Mean squared error between real image features and generated ones."""
    return _mse(X, Xhat, "loss_rec")


def loss_reg(c, chat):
    """Mean squared error between sketch features and the regressor's reconstruction."""
    return _mse(c, chat, "loss_reg")


def _clamped(p):
    p = np.asarray(p, dtype=np.float64)
    inside = (p > PROB_EPS) & (p < 1.0 - PROB_EPS)
    return np.clip(p, PROB_EPS, 1.0 - PROB_EPS), inside


def loss_adv_discriminator(d_real, d_fake):
    """Binary cross-entropy of the discriminator: real -> 1, fake -> 0.

    Returns ``(value, (grad_real, grad_fake))``.  Probabilities are clamped
    to ``[1e-7, 1 - 1e-7]``; the gradient is zero where clamping is active.
    """
    pr, in_r = _clamped(d_real)
    pf, in_f = _clamped(d_fake)
    value = -np.mean(np.log(pr)) - np.mean(np.log1p(-pf))
    g_real = np.where(in_r, -1.0 / (pr * pr.size), 0.0)
    g_fake = np.where(in_f, 1.0 / ((1.0 - pf) * pf.size), 0.0)
    return float(value), (g_real, g_fake)


def loss_adv_generator(d_fake):
    """Non-saturating generator loss ``-mean(log D(fake))``."""
    pf, in_f = _clamped(d_fake)
    value = -np.mean(np.log(pf))
    return float(value), np.where(in_f, -1.0 / (pf * pf.size), 0.0)


def rbf_kernel(A, B, bank: KernelBank):
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[1]:
        raise ShapeError(f"rbf_kernel: incompatible shapes {A.shape}, {B.shape}")
    return kernels.rbf_bank(A, B, bank.sigmas, bank.etas)[0]


def loss_mmd(X, Xhat, bank: KernelBank | None = None, normalize: bool = True):
    """Biased multi-kernel MMD estimate between real ``X`` and generated ``Xhat``.

    With ``normalize`` each of the three double sums is divided by its number
    of terms; without it the raw sums are used.  Returns the value and the
    gradient with respect to ``Xhat``.
    """
    bank = bank or KernelBank()
    X = np.asarray(X, dtype=np.float64)
    Xhat = np.asarray(Xhat, dtype=np.float64)
    if X.ndim != 2 or Xhat.ndim != 2 or X.shape[1] != Xhat.shape[1]:
        raise ShapeError(f"loss_mmd: incompatible shapes {X.shape}, {Xhat.shape}")
    if X.shape[0] == 0 or Xhat.shape[0] == 0:
        raise ShapeError("loss_mmd needs non-empty sample sets")
    return kernels.mmd_and_grad(X, Xhat, bank.sigmas, bank.etas, normalize)


def pair_distances(O_g, O_r):
    O_g, O_r = _same_shape(O_g, O_r, "pair_distances")
    diff = O_g - O_r
    return np.sqrt(np.einsum("ij,ij->i", diff, diff)), diff


def loss_contrastive(O_g, O_r, labels: PairLabels, margin: float):
    """``mean(Y_t * d + Y_f * max(margin - d, 0)^2)`` over pairs.

    The same-class term is the plain distance, not its square.  Returns
    ``(value, (grad_g, grad_r))``; at ``d == 0`` the distance gradient is
    taken as 0.
    """
    if margin <= 0:
        raise ConfigError("margin must be positive")
    d, diff = pair_distances(O_g, O_r)
    if len(labels) != d.size:
        raise ShapeError(f"{len(labels)} labels for {d.size} pairs")
    yt, yf = labels.y_true, labels.y_false
    hinge = np.maximum(margin - d, 0.0)
    n = d.size
    value = float(np.mean(yt * d + yf * hinge * hinge))
    dl_dd = (yt - 2.0 * yf * hinge) / n
    safe = np.where(d > 0, d, 1.0)
    unit = np.where((d > 0)[:, None], diff / safe[:, None], 0.0)
    grad_g = dl_dd[:, None] * unit
    return value, (grad_g, -grad_g)


def combine_stage_loss(parts: Mapping[str, float], weights: LossWeights) -> float:
    """``rec + alpha * adv_g + beta * reg`` plus ``gamma * mmd`` when present."""
    for w in (weights.alpha, weights.beta, weights.gamma):
        if w < 0:
            raise ConfigError("loss weights must be non-negative")
    missing = {"rec", "adv_g", "reg"} - set(parts)
    if missing:
        raise ConfigError(f"missing loss components: {sorted(missing)}")
    total = parts["rec"] + weights.alpha * parts["adv_g"] + weights.beta * parts["reg"]
    if "mmd" in parts:
        total += weights.gamma * parts["mmd"]
    return float(total)
