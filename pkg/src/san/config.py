"""Run configuration: a flat ``key=value`` document with dotted sections.

Example::

    data.features = toy.sanf
    out_dir = runs/toy
    seed = 1
    preset = toy
    split.num_unseen = 6
    stage1.epochs = 10

Every key is optional except ``data.features``; unset values fall back to
the preset (``reference`` by default).  Relative paths resolve against the
config file's directory.  ``SAN_SEED`` in the environment overrides
``seed``.
"""

from __future__ import annotations

import configparser
import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import FeatureStore, SplitSpec
from .errors import ConfigError
from .losses import KernelBank, LossWeights
from .training import StageConfig

_SECTION = "run"

# Desk-scale schedule for synthetic features.  The reference learning rate
# of 1e-5 barely moves networks this small within the reference epoch
# budgets.  Stage 1 uses 1e-3; the refinement stage starts from a generator
# that already sits near the noise floor, so it takes smaller steps, and the
# 16-unit projector trains longer at a gentler rate than the reference 0.01.
TOY_OVERRIDES = {
    1: {"learning_rate": 1e-3},
    2: {"learning_rate": 3e-4},
    3: {"learning_rate": 1e-3, "epochs": 60},
}

_STAGE_KEYS = {
    "lr": ("learning_rate", float), "learning_rate": ("learning_rate", float),
    "batch_size": ("batch_size", int), "epochs": ("epochs", int),
    "d_pretrain_epochs": ("d_pretrain_epochs", int),
    "alpha": ("alpha", float), "beta": ("beta", float), "gamma": ("gamma", float),
    "margin": ("margin", float),
    "adam_beta1": ("adam_beta1", float), "adam_beta2": ("adam_beta2", float),
    "adam_epsilon": ("adam_epsilon", float),
}

_KNOWN = {"data.features", "out_dir", "seed", "preset", "split.mode", "split.seen",
          "split.unseen", "split.num_unseen", "split.gzsl_fraction", "split.min_gallery_size",
          "split.seed", "pairs.per_class", "mmd.sigmas", "mmd.etas", "mmd.normalize",
          "retrieval.k", "retrieval.n_z", "retrieval.ap_denominator", "ablation.use_stage2",
          "ablation.use_mmd", "ablation.use_siamese"}


def derive_seed(seed: int, *path: int) -> int:
    return int(np.random.SeedSequence([seed, *path]).generate_state(1)[0])


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.replace(" ", "").split(",") if t)


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.replace(" ", "").split(",") if t)


@dataclass
class RunConfig:
    features: Path
    out_dir: Path
    seed: int = 0
    preset: str = "reference"
    split_mode: str = "zsl"
    seen: tuple[int, ...] | None = None
    unseen: tuple[int, ...] | None = None
    num_unseen: int | None = None
    gzsl_fraction: float = 0.10
    min_gallery_size: int = 0
    split_seed: int | None = None
    pairs_per_class: int = 1000
    stages: dict[int, StageConfig] = field(default_factory=dict)
    k: int = 200
    n_z: int = 1
    ap_min_denominator: bool = True
    use_stage2: bool = True
    use_mmd: bool = True
    use_siamese: bool = True

    def __post_init__(self):
        if self.use_mmd and not self.use_stage2:
            raise ConfigError("use_mmd requires use_stage2")
        if self.use_siamese and not self.use_mmd:
            raise ConfigError("use_siamese requires the MMD-trained refinement stage")
        if self.k < 1 or self.n_z < 1 or self.pairs_per_class < 1:
            raise ConfigError("retrieval.k, retrieval.n_z and pairs.per_class must be >= 1")

    def split_spec(self, store: FeatureStore) -> SplitSpec:
        classes = sorted(set(store.labels.tolist()))
        if self.unseen is not None:
            unseen = set(self.unseen)
        elif self.num_unseen is not None:
            if not 0 < self.num_unseen < len(classes):
                raise ConfigError(f"split.num_unseen must lie in [1, {len(classes) - 1}]")
            rng = np.random.default_rng(derive_seed(self.seed, 100))
            unseen = set(rng.choice(classes, self.num_unseen, replace=False).tolist())
        else:
            raise ConfigError("set split.unseen or split.num_unseen")
        seen = set(self.seen) if self.seen is not None else set(classes) - unseen
        split_seed = self.split_seed if self.split_seed is not None else derive_seed(self.seed, 101)
        return SplitSpec(seen, unseen, self.split_mode, self.gzsl_fraction, split_seed,
                         self.min_gallery_size)

    @property
    def pair_seed(self) -> int:
        return derive_seed(self.seed, 102)

    @property
    def eval_seed(self) -> int:
        return derive_seed(self.seed, 103)

    def canonical_text(self) -> str:
        lines = {
            "features": self.features.name, "seed": self.seed, "preset": self.preset,
            "split.mode": self.split_mode, "split.seen": self.seen, "split.unseen": self.unseen,
            "split.num_unseen": self.num_unseen, "split.gzsl_fraction": self.gzsl_fraction,
            "split.min_gallery_size": self.min_gallery_size, "split.seed": self.split_seed,
            "pairs.per_class": self.pairs_per_class, "retrieval.k": self.k,
            "retrieval.n_z": self.n_z, "retrieval.ap_min_denominator": self.ap_min_denominator,
        }
        text = "".join(f"{k}={lines[k]!r}\n" for k in sorted(lines))
        for stage in sorted(self.stages):
            text += "".join(f"stage{stage}.{line}\n"
                            for line in self.stages[stage].to_text().splitlines())
        return text

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()[:16]


def parse_config(text: str, base_dir: Path | str = ".", env=None) -> RunConfig:
    env = os.environ if env is None else env
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"),
                                       inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string(f"[{_SECTION}]\n{text}")
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None
    kv = dict(parser[_SECTION])
    base = Path(base_dir)

    unknown = [k for k in kv if k not in _KNOWN
               and not (k[:6] in ("stage1", "stage2", "stage3") and k[7:] in _STAGE_KEYS)]
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    if "data.features" not in kv:
        raise ConfigError("data.features is required")

    try:
        seed = int(env.get("SAN_SEED") or kv.get("seed", 0))
        preset = kv.get("preset", "reference").strip().lower()
        if preset not in ("reference", "toy"):
            raise ConfigError(f"preset must be 'reference' or 'toy', got {preset!r}")
        sigmas = _floats(kv["mmd.sigmas"]) if "mmd.sigmas" in kv else KernelBank().sigmas
        etas = _floats(kv["mmd.etas"]) if "mmd.etas" in kv else (1.0,) * len(sigmas)
        bank = KernelBank(sigmas, etas)
        normalize = _bool(kv.get("mmd.normalize", "true"))
        stages = {}
        for stage in (1, 2, 3):
            cfg = StageConfig.defaults(stage, derive_seed(seed, stage))
            changes = dict(TOY_OVERRIDES[stage]) if preset == "toy" else {}
            weights = {}
            for key, value in kv.items():
                if not key.startswith(f"stage{stage}."):
                    continue
                name, cast = _STAGE_KEYS[key[7:]]
                if name in ("alpha", "beta", "gamma", "margin"):
                    weights[name] = cast(value)
                else:
                    changes[name] = cast(value)
            w = cfg.weights
            changes["weights"] = LossWeights(weights.get("alpha", w.alpha),
                                             weights.get("beta", w.beta),
                                             weights.get("gamma", w.gamma),
                                             weights.get("margin", w.margin))
            changes["kernel_bank"] = bank
            changes["mmd_normalize"] = normalize
            stages[stage] = cfg.replace(**changes)
        ap_denom = kv.get("retrieval.ap_denominator", "min").strip().lower()
        if ap_denom not in ("min", "total"):
            raise ConfigError("retrieval.ap_denominator must be 'min' or 'total'")
        return RunConfig(
            features=(base / kv["data.features"].strip()),
            out_dir=(base / kv.get("out_dir", "san_out").strip()),
            seed=seed, preset=preset,
            split_mode=kv.get("split.mode", "zsl").strip().lower(),
            seen=_ints(kv["split.seen"]) if "split.seen" in kv else None,
            unseen=_ints(kv["split.unseen"]) if "split.unseen" in kv else None,
            num_unseen=int(kv["split.num_unseen"]) if "split.num_unseen" in kv else None,
            gzsl_fraction=float(kv.get("split.gzsl_fraction", 0.10)),
            min_gallery_size=int(kv.get("split.min_gallery_size", 0)),
            split_seed=int(kv["split.seed"]) if "split.seed" in kv else None,
            pairs_per_class=int(kv.get("pairs.per_class", 1000)),
            stages=stages,
            k=int(kv.get("retrieval.k", 200)),
            n_z=int(kv.get("retrieval.n_z", 1)),
            ap_min_denominator=ap_denom == "min",
            use_stage2=_bool(kv.get("ablation.use_stage2", "true")),
            use_mmd=_bool(kv.get("ablation.use_mmd", "true")),
            use_siamese=_bool(kv.get("ablation.use_siamese", "true")),
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad config value: {exc}") from None


def load_config(path, env=None) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, path.parent, env)
