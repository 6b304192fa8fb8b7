"""The seven networks and their stage-level compositions.

At ``feature_dim == 2048`` the layer widths are exactly the reference widths.
Smaller feature dimensions scale every hidden width by ``feature_dim / 2048``
(floor of 4) and the noise dimension likewise (floor of 2), which keeps the
shape of each network at toy sizes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .engine import DenseNet, forward, init_net, mlp_activations
from .errors import ConfigError, ShapeError

REFERENCE_FEATURE_DIM = 2048
REFERENCE_NOISE_DIM = 300

GENERATOR_WIDTHS = (1024, 512, 1024)
DISCRIMINATOR_WIDTHS = (1024, 512, 128)
REGRESSOR_WIDTHS = (1024, 512, 1024)
SIAMESE_WIDTHS = (1024,)
SIAMESE_OUT = 2


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def scaled_width(width: int, feature_dim: int) -> int:
    if feature_dim == REFERENCE_FEATURE_DIM:
        return width
    return max(4, _round_half_up(width * feature_dim / REFERENCE_FEATURE_DIM))


def scaled_noise_dim(feature_dim: int) -> int:
    if feature_dim == REFERENCE_FEATURE_DIM:
        return REFERENCE_NOISE_DIM
    return max(2, _round_half_up(REFERENCE_NOISE_DIM * feature_dim / REFERENCE_FEATURE_DIM))


@dataclass(frozen=True)
class NoiseSpec:
    dim: int = REFERENCE_NOISE_DIM
    seed: int = 0

    def __post_init__(self):
        if self.dim <= 0:
            raise ConfigError("noise dim must be positive")

    @classmethod
    def for_feature_dim(cls, feature_dim: int, seed: int = 0) -> "NoiseSpec":
        return cls(scaled_noise_dim(feature_dim), seed)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.standard_normal((n, self.dim))


@dataclass(eq=False)
class Stage1Nets:
    g1: DenseNet
    d1: DenseNet
    r1: DenseNet

    @property
    def feature_dim(self) -> int:
        return self.g1.out_dim

    @property
    def noise_dim(self) -> int:
        return self.g1.in_dim - self.g1.out_dim

    def named(self) -> dict[str, DenseNet]:
        return {"G1": self.g1, "D1": self.d1, "R1": self.r1}


@dataclass(eq=False)
class Stage2Nets:
    g2: DenseNet
    d2: DenseNet
    r2: DenseNet

    @property
    def feature_dim(self) -> int:
        return self.g2.out_dim

    def named(self) -> dict[str, DenseNet]:
        return {"G2": self.g2, "D2": self.d2, "R2": self.r2}


@dataclass(eq=False)
class SiameseNet:
    """One parameter set serving both twins."""

    net: DenseNet

    @property
    def feature_dim(self) -> int:
        return self.net.in_dim

    def named(self) -> dict[str, DenseNet]:
        return {"NN": self.net}


def _widths(widths, feature_dim):
    return [scaled_width(w, feature_dim) for w in widths]


def _generator(in_dim, feature_dim, seed):
    dims = [in_dim, *_widths(GENERATOR_WIDTHS, feature_dim), feature_dim]
    return init_net(dims, mlp_activations(len(dims) - 1), seed)


def _discriminator(feature_dim, seed):
    dims = [feature_dim, *_widths(DISCRIMINATOR_WIDTHS, feature_dim), 1]
    return init_net(dims, mlp_activations(len(dims) - 1, last="sigmoid"), seed)


def _regressor(feature_dim, seed):
    dims = [feature_dim, *_widths(REGRESSOR_WIDTHS, feature_dim), feature_dim]
    return init_net(dims, mlp_activations(len(dims) - 1), seed)


def _child_seeds(seed, n):
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(n)]


def _check_feature_dim(feature_dim):
    if int(feature_dim) <= 0:
        raise ConfigError(f"feature_dim must be positive, got {feature_dim}")


def build_stage1(feature_dim: int, noise: NoiseSpec | None = None, seed: int = 0) -> Stage1Nets:
    _check_feature_dim(feature_dim)
    noise = noise or NoiseSpec.for_feature_dim(feature_dim)
    sg, sd, sr = _child_seeds(seed, 3)
    return Stage1Nets(_generator(feature_dim + noise.dim, feature_dim, sg),
                      _discriminator(feature_dim, sd),
                      _regressor(feature_dim, sr))


def build_stage2(feature_dim: int, seed: int = 0) -> Stage2Nets:
    _check_feature_dim(feature_dim)
    sg, sd, sr = _child_seeds(seed, 3)
    return Stage2Nets(_generator(2 * feature_dim, feature_dim, sg),
                      _discriminator(feature_dim, sd),
                      _regressor(feature_dim, sr))


def build_siamese(feature_dim: int, seed: int = 0) -> SiameseNet:
    _check_feature_dim(feature_dim)
    dims = [feature_dim, *_widths(SIAMESE_WIDTHS, feature_dim), SIAMESE_OUT]
    return SiameseNet(init_net(dims, ["relu", "identity"], seed))


def _rows_match(a, b, what):
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ShapeError(f"{what}: row counts differ ({a.shape} vs {b.shape})")


def generator1_input(c, z):
    c = np.asarray(c, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    _rows_match(c, z, "stage1_generate")
    return np.concatenate([c, z], axis=1)


def generator2_input(c, x1):
    c = np.asarray(c, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    _rows_match(c, x1, "stage2_refine")
    if c.shape[1] != x1.shape[1]:
        raise ShapeError("stage2_refine: sketch and generated features differ in width")
    return np.concatenate([c, x1], axis=1)


def stage1_generate(nets: Stage1Nets, c, z) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if c.ndim != 2 or c.shape[1] != nets.feature_dim or z.ndim != 2 or z.shape[1] != nets.noise_dim:
        raise ShapeError(
            f"stage1_generate expects c (*, {nets.feature_dim}) and z (*, {nets.noise_dim})")
    return forward(nets.g1, generator1_input(c, z))[0]


def stage2_refine(nets: Stage2Nets, c, x1) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    if c.ndim != 2 or c.shape[1] != nets.feature_dim:
        raise ShapeError(f"stage2_refine expects features of width {nets.feature_dim}")
    return forward(nets.g2, generator2_input(c, x1))[0]


def siamese_project(net: SiameseNet, features) -> np.ndarray:
    return forward(net.net, features)[0]
