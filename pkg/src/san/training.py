"""Stage-wise training loops and checkpoint persistence.

Stage 1 and stage 2 share one schedule: the discriminator is first trained
alone for ``d_pretrain_epochs`` with the generator fixed, then every batch
gets one discriminator update followed by one joint generator/regressor
update on the weighted composite loss.  Stage 3 trains the Siamese projector
on the contrastive loss with both generators frozen.

A checkpoint file is little-endian::

    "SANC" | version u16 | stage u8 | feature_dim u32 | seed u64
    | epochs_completed u32 | config length u32, config text (UTF-8)
    | network count u16, then per network:
        name length u16, name | layer count u16, then per layer:
        in u32, out u32, activation u8, weights f64[in*out], bias f64[out]
    | CRC32 of every preceding byte, u32
"""

from __future__ import annotations

import dataclasses
import logging
import math
import struct
import time
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import losses
from .dataset import (IMAGE, SKETCH, FeatureStore, PairSet, ResolvedSplit, _atomic_write,
                      sample_siamese_batch)
from .engine import ACTIVATIONS, AdamState, DenseLayer, DenseNet, adam_step, backward, forward
from .errors import (BadMagicError, ChecksumError, ConfigError, DataError, NumericError,
                     PrerequisiteError, StateError, TruncatedFileError, UnsupportedVersionError)
from .losses import KernelBank, LossWeights
from .models import (NoiseSpec, SiameseNet, Stage1Nets, Stage2Nets, build_siamese, build_stage1,
                     build_stage2, generator1_input, generator2_input)

log = logging.getLogger(__name__)

CKPT_MAGIC = b"SANC"
CKPT_VERSION = 1
PROBE_SIZE = 512


@dataclass(frozen=True)
class StageConfig:
    stage: int
    learning_rate: float
    batch_size: int
    epochs: int
    weights: LossWeights = LossWeights()
    d_pretrain_epochs: int = 2
    seed: int = 0
    kernel_bank: KernelBank = KernelBank()
    mmd_normalize: bool = True
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8

    def __post_init__(self):
        if self.stage not in (1, 2, 3):
            raise ConfigError(f"stage must be 1, 2 or 3, got {self.stage}")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 1 or self.epochs < 0 or self.d_pretrain_epochs < 0:
            raise ConfigError("batch_size must be >= 1, epoch counts >= 0")
        if self.stage == 3 and self.batch_size % 2:
            raise ConfigError("stage-3 batch size must be even")

    @classmethod
    def defaults(cls, stage: int, seed: int = 0) -> "StageConfig":
        if stage == 1:
            return cls(1, 1e-5, 50, 30, LossWeights(0.01, 1e-4, 0.0), 2, seed)
        if stage == 2:
            return cls(2, 1e-5, 50, 35, LossWeights(0.01, 1e-4, 0.01), 2, seed)
        if stage == 3:
            return cls(3, 0.01, 32, 20, LossWeights(margin=5.0), 0, seed)
        raise ConfigError(f"stage must be 1, 2 or 3, got {stage}")

    def replace(self, **changes) -> "StageConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        """Canonical ``key=value`` lines in sorted key order."""
        items = {
            "adam_beta1": self.adam_beta1, "adam_beta2": self.adam_beta2,
            "adam_epsilon": self.adam_epsilon, "alpha": self.weights.alpha,
            "batch_size": self.batch_size, "beta": self.weights.beta,
            "d_pretrain_epochs": self.d_pretrain_epochs, "epochs": self.epochs,
            "gamma": self.weights.gamma, "kernel_etas": ",".join(map(repr, self.kernel_bank.etas)),
            "kernel_sigmas": ",".join(map(repr, self.kernel_bank.sigmas)),
            "learning_rate": self.learning_rate, "margin": self.weights.margin,
            "mmd_normalize": int(self.mmd_normalize), "seed": self.seed, "stage": self.stage,
        }
        return "".join(f"{k}={items[k]!r}\n" if isinstance(items[k], float) else f"{k}={items[k]}\n"
                       for k in sorted(items))

    @classmethod
    def from_text(cls, text: str) -> "StageConfig":
        kv = {}
        for line in text.splitlines():
            if line.strip():
                key, _, value = line.partition("=")
                kv[key.strip()] = value.strip()
        try:
            return cls(
                stage=int(kv["stage"]), learning_rate=float(kv["learning_rate"]),
                batch_size=int(kv["batch_size"]), epochs=int(kv["epochs"]),
                weights=LossWeights(float(kv["alpha"]), float(kv["beta"]), float(kv["gamma"]),
                                    float(kv["margin"])),
                d_pretrain_epochs=int(kv["d_pretrain_epochs"]), seed=int(kv["seed"]),
                kernel_bank=KernelBank(tuple(float(s) for s in kv["kernel_sigmas"].split(",")),
                                       tuple(float(e) for e in kv["kernel_etas"].split(","))),
                mmd_normalize=bool(int(kv["mmd_normalize"])),
                adam_beta1=float(kv["adam_beta1"]), adam_beta2=float(kv["adam_beta2"]),
                adam_epsilon=float(kv["adam_epsilon"]))
        except (KeyError, ValueError) as exc:
            raise DataError(f"malformed stage config block: {exc}") from None


@dataclass(eq=False)
class StageCheckpoint:
    stage: int
    feature_dim: int
    config: StageConfig
    nets: dict[str, DenseNet]
    epochs_completed: int = 0
    version: int = CKPT_VERSION

    @property
    def seed(self) -> int:
        return self.config.seed

    def stage1(self) -> Stage1Nets:
        self._expect(1)
        return Stage1Nets(self.nets["G1"], self.nets["D1"], self.nets["R1"])

    def stage2(self) -> Stage2Nets:
        self._expect(2)
        return Stage2Nets(self.nets["G2"], self.nets["D2"], self.nets["R2"])

    def siamese(self) -> SiameseNet:
        self._expect(3)
        return SiameseNet(self.nets["NN"])

    def _expect(self, stage):
        if self.stage != stage:
            raise StateError(f"expected a stage-{stage} checkpoint, got stage {self.stage}")

    def equals(self, other: "StageCheckpoint") -> bool:
        return encode_checkpoint(self) == encode_checkpoint(other)


@dataclass
class TrainLog:
    """Per-epoch loss records plus probe losses measured before training."""

    stage: int
    initial: dict[str, float] = field(default_factory=dict)
    records: list[dict[str, float | int | str]] = field(default_factory=list)

    def series(self, key: str) -> list[float]:
        return [r[key] for r in self.records if key in r]

    def to_tsv(self) -> str:
        keys = sorted({k for r in self.records for k in r} - {"epoch", "phase"})
        lines = ["\t".join(["epoch", "phase", *keys])]
        if self.initial:
            lines.append("\t".join(["0", "init", *(_fmt(self.initial.get(k)) for k in keys)]))
        for r in self.records:
            lines.append("\t".join([str(r["epoch"]), str(r["phase"]),
                                    *(_fmt(r.get(k)) for k in keys)]))
        return "\n".join(lines) + "\n"


def _fmt(v):
    return "" if v is None else repr(float(v))


# ---------------------------------------------------------------------------
# checkpoint files


def encode_checkpoint(ckpt: StageCheckpoint) -> bytes:
    cfg = ckpt.config.to_text().encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<HBIQI", ckpt.version, ckpt.stage, ckpt.feature_dim,
                                     ckpt.config.seed, ckpt.epochs_completed),
             struct.pack("<I", len(cfg)), cfg, struct.pack("<H", len(ckpt.nets))]
    for name, net in ckpt.nets.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<H", len(net.layers)))
        for layer in net.layers:
            if not (np.all(np.isfinite(layer.weight)) and np.all(np.isfinite(layer.bias))):
                raise NumericError(f"network {name} has non-finite parameters")
            parts.append(struct.pack("<IIB", layer.in_dim, layer.out_dim,
                                     ACTIVATIONS.index(layer.activation)))
            parts.append(layer.weight.astype("<f8").tobytes())
            parts.append(layer.bias.astype("<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise TruncatedFileError("checkpoint ends unexpectedly")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def decode_checkpoint(data: bytes) -> StageCheckpoint:
    if data[:4] != CKPT_MAGIC:
        if len(data) < 4 and CKPT_MAGIC.startswith(data):
            raise TruncatedFileError("checkpoint ends inside the magic number")
        raise BadMagicError("not a SANC checkpoint")
    r = _Reader(data)
    r.take(4)
    (version,) = r.unpack("<H")
    if version != CKPT_VERSION:
        raise UnsupportedVersionError(f"checkpoint version {version} is not supported")
    stage, feature_dim, seed, epochs_completed = r.unpack("<BIQI")
    (cfg_len,) = r.unpack("<I")
    cfg_text = r.take(cfg_len).decode("utf-8")
    (n_nets,) = r.unpack("<H")
    nets = {}
    for _ in range(n_nets):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (n_layers,) = r.unpack("<H")
        layers = []
        for _ in range(n_layers):
            d_in, d_out, act = r.unpack("<IIB")
            if act >= len(ACTIVATIONS):
                raise DataError(f"unknown activation tag {act}")
            w = np.frombuffer(r.take(8 * d_in * d_out), dtype="<f8").reshape(d_in, d_out)
            b = np.frombuffer(r.take(8 * d_out), dtype="<f8")
            layers.append(DenseLayer(w.astype(np.float64), b.astype(np.float64),
                                     ACTIVATIONS[act]))
        nets[name] = DenseNet(layers)
    (crc,) = r.unpack("<I")
    if r.pos != len(data):
        raise DataError(f"{len(data) - r.pos} trailing bytes after checkpoint")
    if zlib.crc32(data[:r.pos - 4]) != crc:
        raise ChecksumError("checkpoint CRC32 mismatch")
    config = StageConfig.from_text(cfg_text)
    if config.seed != seed or config.stage != stage:
        raise DataError("checkpoint header disagrees with its config block")
    return StageCheckpoint(stage, feature_dim, config, nets, epochs_completed, version)


def save_checkpoint(ckpt: StageCheckpoint, path) -> None:
    _atomic_write(path, encode_checkpoint(ckpt))


def load_checkpoint(path) -> StageCheckpoint:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())


# ---------------------------------------------------------------------------
# training loops


def _check_loss(value, stage, epoch, batch):
    if not math.isfinite(value):
        raise NumericError(f"stage {stage}: non-finite loss at epoch {epoch}, batch {batch}")


def _batches(n, size, rng):
    order = rng.permutation(n)
    return [order[i:i + size] for i in range(0, n, size)]


def _probe_rows(n, rng):
    return np.sort(rng.permutation(n)[:min(n, PROBE_SIZE)])


class _GanStage:
    """Shared machinery for the two adversarial stages.

    ``make_input(c, rng)`` returns the generator input for a batch of sketch
    features; stage 1 appends fresh noise, stage 2 runs the frozen first
    generator on fresh noise and appends its output.
    """

    def __init__(self, cfg, gen, disc, reg, make_input, use_mmd):
        self.cfg = cfg
        self.gen, self.disc, self.reg = gen, disc, reg
        self.make_input = make_input
        self.use_mmd = use_mmd
        opt = dict(beta1=cfg.adam_beta1, beta2=cfg.adam_beta2, epsilon=cfg.adam_epsilon)
        self.opt_g = AdamState.for_params(gen.params(), **opt)
        self.opt_d = AdamState.for_params(disc.params(), **opt)
        self.opt_r = AdamState.for_params(reg.params(), **opt)
        self.d_updates = 0
        self.g_updates = 0

    def discriminator_step(self, x_real, x_fake):
        d_real, tr_real = forward(self.disc, x_real)
        d_fake, tr_fake = forward(self.disc, x_fake)
        value, (g_real, g_fake) = losses.loss_adv_discriminator(d_real, d_fake)
        grads_real, _ = backward(self.disc, tr_real, g_real)
        grads_fake, _ = backward(self.disc, tr_fake, g_fake)
        adam_step(self.opt_d, self.disc.params(),
                  [a + b for a, b in zip(grads_real, grads_fake)], self.cfg.learning_rate)
        self.d_updates += 1
        return value

    def composite(self, c, x_real, gen_in):
        """Composite loss parts and gradients for generator and regressor."""
        w = self.cfg.weights
        x_fake, tr_g = forward(self.gen, gen_in)
        parts = {}
        parts["rec"], g_out = losses.loss_rec(x_real, x_fake)
        d_fake, tr_d = forward(self.disc, x_fake)
        parts["adv_g"], g_d = losses.loss_adv_generator(d_fake)
        _, g_adv = backward(self.disc, tr_d, g_d)
        c_hat, tr_r = forward(self.reg, x_fake)
        parts["reg"], g_c = losses.loss_reg(c, c_hat)
        grads_r, g_reg = backward(self.reg, tr_r, g_c)
        g_out = g_out + w.alpha * g_adv + w.beta * g_reg
        if self.use_mmd:
            parts["mmd"], g_mmd = losses.loss_mmd(x_real, x_fake, self.cfg.kernel_bank,
                                                  self.cfg.mmd_normalize)
            g_out = g_out + w.gamma * g_mmd
        parts["total"] = losses.combine_stage_loss(parts, w)
        grads_g, _ = backward(self.gen, tr_g, g_out)
        grads_r = [w.beta * g for g in grads_r]
        return parts, grads_g, grads_r, x_fake

    def generator_step(self, c, x_real, gen_in):
        parts, grads_g, grads_r, _ = self.composite(c, x_real, gen_in)
        adam_step(self.opt_g, self.gen.params(), grads_g, self.cfg.learning_rate)
        adam_step(self.opt_r, self.reg.params(), grads_r, self.cfg.learning_rate)
        self.g_updates += 1
        return parts

    def probe(self, c, x_real, gen_in):
        parts, _, _, x_fake = self.composite(c, x_real, gen_in)
        d_real = forward(self.disc, x_real)[0]
        d_fake = forward(self.disc, x_fake)[0]
        parts["d_loss"] = losses.loss_adv_discriminator(d_real, d_fake)[0]
        return parts

    def run(self, C, X, log_: TrainLog):
        cfg = self.cfg
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, cfg.stage, 1]))
        probe_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, cfg.stage, 2]))
        probe = _probe_rows(C.shape[0], probe_rng)
        probe_in = self.make_input(C[probe], probe_rng)
        log_.initial = {f"probe_{k}": v for k, v in self.probe(C[probe], X[probe], probe_in).items()}
        if cfg.epochs == 0:
            return 0
        epoch = 0
        for _ in range(cfg.d_pretrain_epochs):
            epoch += 1
            t0 = time.perf_counter()
            d_sum = 0.0
            batches = _batches(C.shape[0], cfg.batch_size, rng)
            for b, idx in enumerate(batches):
                x_fake = forward(self.gen, self.make_input(C[idx], rng))[0]
                value = self.discriminator_step(X[idx], x_fake)
                _check_loss(value, cfg.stage, epoch, b)
                d_sum += value
            log_.records.append({"epoch": epoch, "phase": "pretrain",
                                 "d_loss": d_sum / len(batches),
                                 "wall_time": time.perf_counter() - t0})
        for _ in range(cfg.epochs):
            epoch += 1
            t0 = time.perf_counter()
            sums: dict[str, float] = {}
            batches = _batches(C.shape[0], cfg.batch_size, rng)
            for b, idx in enumerate(batches):
                c, x = C[idx], X[idx]
                gen_in = self.make_input(c, rng)
                x_fake = forward(self.gen, gen_in)[0]
                d_value = self.discriminator_step(x, x_fake)
                parts = self.generator_step(c, x, gen_in)
                parts["d_loss"] = d_value
                for k, v in parts.items():
                    _check_loss(v, cfg.stage, epoch, b)
                    sums[k] = sums.get(k, 0.0) + v
            rec: dict[str, float | int | str] = {"epoch": epoch, "phase": "joint"}
            rec.update({k: v / len(batches) for k, v in sums.items()})
            rec.update({f"probe_{k}": v for k, v in
                        self.probe(C[probe], X[probe], probe_in).items()})
            rec["wall_time"] = time.perf_counter() - t0
            log_.records.append(rec)
            log.info("stage %d epoch %d: %s", cfg.stage, epoch,
                     {k: round(float(v), 6) for k, v in rec.items() if k.startswith("probe_")})
        return cfg.epochs


def _pair_features(pairs: PairSet, store: FeatureStore):
    if len(pairs) == 0:
        raise DataError("no training pairs")
    C = store.vectors_of(pairs.sketch_ids)
    X = store.vectors_of(pairs.image_ids)
    if not np.all(store.domains[store.rows(pairs.sketch_ids)] == SKETCH) or \
            not np.all(store.domains[store.rows(pairs.image_ids)] == IMAGE):
        raise DataError("pair members have the wrong domain")
    return C, X


def train_stage1(cfg: StageConfig, pairs: PairSet, store: FeatureStore):
    """Train G1/D1/R1.  Returns ``(StageCheckpoint, TrainLog)``."""
    if cfg.stage != 1:
        raise ConfigError("train_stage1 needs a stage-1 config")
    nets = build_stage1(store.feature_dim, NoiseSpec.for_feature_dim(store.feature_dim),
                        cfg.seed)
    noise_dim = nets.noise_dim
    C, X = _pair_features(pairs, store)

    def make_input(c, rng):
        return generator1_input(c, rng.standard_normal((c.shape[0], noise_dim)))

    runner = _GanStage(cfg, nets.g1, nets.d1, nets.r1, make_input, use_mmd=False)
    train_log = TrainLog(1)
    done = runner.run(C, X, train_log)
    return StageCheckpoint(1, store.feature_dim, cfg, nets.named(), done), train_log


def _require(ckpt, stage, feature_dim):
    if ckpt is None:
        raise PrerequisiteError(f"stage-{stage} checkpoint is required")
    if ckpt.stage != stage:
        raise PrerequisiteError(f"expected a stage-{stage} checkpoint, got stage {ckpt.stage}")
    if ckpt.feature_dim != feature_dim:
        raise PrerequisiteError(
            f"stage-{stage} checkpoint has feature_dim {ckpt.feature_dim}, data has {feature_dim}")


def train_stage2(cfg: StageConfig, pairs: PairSet, store: FeatureStore,
                 stage1: StageCheckpoint, use_mmd: bool = True):
    """Train G2/D2/R2 on top of a frozen G1.

    ``use_mmd=False`` drops the MMD term entirely (the "G1+G2" ablation).
    """
    if cfg.stage != 2:
        raise ConfigError("train_stage2 needs a stage-2 config")
    _require(stage1, 1, store.feature_dim)
    g1 = stage1.stage1().g1
    noise_dim = g1.in_dim - store.feature_dim
    nets = build_stage2(store.feature_dim, cfg.seed)
    C, X = _pair_features(pairs, store)

    def make_input(c, rng):
        z = rng.standard_normal((c.shape[0], noise_dim))
        x1 = forward(g1, generator1_input(c, z))[0]
        return generator2_input(c, x1)

    runner = _GanStage(cfg, nets.g2, nets.d2, nets.r2, make_input, use_mmd=use_mmd)
    train_log = TrainLog(2)
    done = runner.run(C, X, train_log)
    return StageCheckpoint(2, store.feature_dim, cfg, nets.named(), done), train_log


def generate_refined(stage1: StageCheckpoint, stage2: StageCheckpoint | None, C, rng):
    """Run sketch features through G1 (and G2 when given) with fresh noise."""
    g1 = stage1.stage1().g1
    z = rng.standard_normal((C.shape[0], g1.in_dim - stage1.feature_dim))
    x1 = forward(g1, generator1_input(C, z))[0]
    if stage2 is None:
        return x1
    return forward(stage2.stage2().g2, generator2_input(C, x1))[0]


def _pair_stats(O_g, O_r, labels):
    d, _ = losses.pair_distances(O_g, O_r)
    pos = labels.y_true == 1
    return (float(d[pos].mean()) if pos.any() else float("nan"),
            float(d[~pos].mean()) if (~pos).any() else float("nan"))


def train_stage3(cfg: StageConfig, store: FeatureStore, split: ResolvedSplit,
                 stage1: StageCheckpoint, stage2: StageCheckpoint):
    """Train the shared-weight Siamese projector on contrastive loss."""
    if cfg.stage != 3:
        raise ConfigError("train_stage3 needs a stage-3 config")
    _require(stage1, 1, store.feature_dim)
    _require(stage2, 2, store.feature_dim)
    siamese = build_siamese(store.feature_dim, cfg.seed)
    net = siamese.net
    rows = np.sort(store.rows(split.train))
    sk_rows = rows[store.domains[rows] == SKETCH]
    if np.unique(store.labels[rows]).size < 2:
        raise DataError("stage 3 needs at least two training classes")
    if sk_rows.size == 0:
        raise DataError("no training sketches")
    C = store.vectors[sk_rows]
    gen_labels = store.labels[sk_rows]
    margin = cfg.weights.margin

    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 3, 1]))
    probe_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 3, 2]))
    probe_gen = generate_refined(stage1, stage2, C, probe_rng)
    probe_l, probe_r, probe_lab = sample_siamese_batch(probe_gen, gen_labels, store, split,
                                                       min(PROBE_SIZE, 2 * C.shape[0]), probe_rng)

    def probe():
        O_g, O_r = net(probe_l), net(probe_r)
        value = losses.loss_contrastive(O_g, O_r, probe_lab, margin)[0]
        pos, neg = _pair_stats(O_g, O_r, probe_lab)
        return {"probe_loss": value, "probe_pos_dist": pos, "probe_neg_dist": neg}

    train_log = TrainLog(3, initial=probe())
    opt = AdamState.for_params(net.params(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon)
    n_batches = max(1, math.ceil(2 * C.shape[0] / cfg.batch_size))
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        gen = generate_refined(stage1, stage2, C, rng)
        sums = {"loss": 0.0, "pos_dist": 0.0, "neg_dist": 0.0}
        for b in range(n_batches):
            left, right, labels = sample_siamese_batch(gen, gen_labels, store, split,
                                                       cfg.batch_size, rng)
            O_g, tr_g = forward(net, left)
            O_r, tr_r = forward(net, right)
            value, (g_g, g_r) = losses.loss_contrastive(O_g, O_r, labels, margin)
            _check_loss(value, 3, epoch, b)
            grads_g, _ = backward(net, tr_g, g_g)
            grads_r, _ = backward(net, tr_r, g_r)
            adam_step(opt, net.params(), [a + c for a, c in zip(grads_g, grads_r)],
                      cfg.learning_rate)
            pos, neg = _pair_stats(O_g, O_r, labels)
            sums["loss"] += value
            sums["pos_dist"] += pos
            sums["neg_dist"] += neg
        rec: dict[str, float | int | str] = {"epoch": epoch, "phase": "joint"}
        rec.update({k: v / n_batches for k, v in sums.items()})
        rec.update(probe())
        rec["wall_time"] = time.perf_counter() - t0
        train_log.records.append(rec)
        log.info("stage 3 epoch %d: loss %.6f", epoch, rec["loss"])
    return StageCheckpoint(3, store.feature_dim, cfg, siamese.named(), cfg.epochs), train_log
