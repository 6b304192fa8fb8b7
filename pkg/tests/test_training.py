import math
import struct

import numpy as np
import pytest

from san.dataset import SplitSpec, SynthConfig, make_split, sample_training_pairs, synth_generate
from san.errors import (BadMagicError, ChecksumError, ConfigError, DataError, PrerequisiteError,
                        StateError, TruncatedFileError, UnsupportedVersionError)
from san.losses import LossWeights
from san.models import build_siamese, build_stage1, build_stage2
from san.training import (StageCheckpoint, StageConfig, decode_checkpoint, encode_checkpoint,
                          load_checkpoint, save_checkpoint, train_stage1, train_stage2,
                          train_stage3)


@pytest.fixture(scope="module")
def data():
    store = synth_generate(SynthConfig(classes=6, per_class_sketches=10, per_class_images=20,
                                       feature_dim=16, seed=2, latent_rank=2))
    split = make_split(store, SplitSpec(range(4), range(4, 6), seed=2))
    pairs = sample_training_pairs(store, split, 250, seed=2)
    return store, split, pairs


def _cfg(stage, **kw):
    base = StageConfig.defaults(stage, seed=5)
    if stage in (1, 2):
        base = base.replace(learning_rate=1e-3)
    return base.replace(**kw)


@pytest.fixture(scope="module")
def trained(data):
    store, split, pairs = data
    s1, log1 = train_stage1(_cfg(1, epochs=8), pairs, store)
    s2, log2 = train_stage2(_cfg(2, epochs=8), pairs, store, s1)
    s3, log3 = train_stage3(_cfg(3), store, split, s1, s2)
    return (s1, log1), (s2, log2), (s3, log3)


def test_rec_decreases_on_eight_pairs():
    store = synth_generate(SynthConfig(classes=2, per_class_sketches=4, per_class_images=4,
                                       feature_dim=16, seed=0))
    split = make_split(store, SplitSpec({0, 1}, set()))
    pairs = sample_training_pairs(store, split, 4, seed=0)
    assert len(pairs) == 8
    _, log = train_stage1(StageConfig.defaults(1, seed=0).replace(epochs=2), pairs, store)
    assert log.series("probe_rec")[-1] < log.initial["probe_rec"]


def test_logged_losses_finite(trained):
    for _, log in trained:
        for rec in log.records:
            for key, value in rec.items():
                if key not in ("epoch", "phase"):
                    assert math.isfinite(value), (log.stage, key)


def test_epoch_phases(trained):
    (_, log1), _, _ = trained
    assert [r["phase"] for r in log1.records] == ["pretrain"] * 2 + ["joint"] * 8
    assert [r["epoch"] for r in log1.records] == list(range(1, 11))


def test_mmd_decreases(trained):
    _, (_, log2), _ = trained
    mmd = log2.series("probe_mmd")
    assert len(mmd) >= 3
    assert mmd[-1] < mmd[0]


def test_stage3_separates_pairs(trained):
    _, _, (_, log3) = trained
    init_pos, init_neg = log3.initial["probe_pos_dist"], log3.initial["probe_neg_dist"]
    pos, neg = log3.series("probe_pos_dist")[-1], log3.series("probe_neg_dist")[-1]
    assert neg > init_neg
    assert pos / neg < init_pos / init_neg


@pytest.mark.xfail(strict=True, reason="unit-scale features start far inside the margin; the "
                   "embedding must expand, so absolute positive distances grow")
def test_stage3_positive_distance_shrinks(trained):
    _, _, (_, log3) = trained
    assert log3.series("probe_pos_dist")[-1] < log3.initial["probe_pos_dist"]


def test_frozen_stages_untouched(data):
    store, split, pairs = data
    s1, _ = train_stage1(_cfg(1, epochs=1), pairs, store)
    before = encode_checkpoint(s1)
    s2, _ = train_stage2(_cfg(2, epochs=1), pairs, store, s1)
    assert encode_checkpoint(s1) == before
    before2 = encode_checkpoint(s2)
    train_stage3(_cfg(3, epochs=1), store, split, s1, s2)
    assert encode_checkpoint(s1) == before and encode_checkpoint(s2) == before2


def test_training_deterministic(data):
    store, split, pairs = data
    a, log_a = train_stage1(_cfg(1, epochs=2), pairs, store)
    b, log_b = train_stage1(_cfg(1, epochs=2), pairs, store)
    assert encode_checkpoint(a) == encode_checkpoint(b)
    strip = [{k: v for k, v in r.items() if k != "wall_time"} for r in log_a.records]
    assert strip == [{k: v for k, v in r.items() if k != "wall_time"} for r in log_b.records]
    c, _ = train_stage1(_cfg(1, epochs=2, seed=6), pairs, store)
    assert encode_checkpoint(a) != encode_checkpoint(c)


def test_zero_epochs_returns_initialisation(data):
    store, _, pairs = data
    ckpt, log = train_stage1(_cfg(1, epochs=0), pairs, store)
    fresh = build_stage1(16, seed=5)
    for name, net in fresh.named().items():
        assert ckpt.nets[name].equals(net)
    assert ckpt.epochs_completed == 0 and log.records == [] and log.initial


def test_gamma_zero_matches_no_mmd(data):
    store, _, pairs = data
    s1, _ = train_stage1(_cfg(1, epochs=1), pairs, store)
    w = LossWeights(0.01, 1e-4, 0.0)
    a, log_a = train_stage2(_cfg(2, epochs=2, weights=w), pairs, store, s1, use_mmd=True)
    b, log_b = train_stage2(_cfg(2, epochs=2, weights=w), pairs, store, s1, use_mmd=False)
    for name in ("G2", "D2", "R2"):
        assert a.nets[name].equals(b.nets[name])
    assert log_a.series("total") == log_b.series("total")


def test_prerequisites(data):
    store, split, pairs = data
    with pytest.raises(PrerequisiteError):
        train_stage2(_cfg(2), pairs, store, None)
    s1, _ = train_stage1(_cfg(1, epochs=0), pairs, store)
    with pytest.raises(PrerequisiteError):
        train_stage2(_cfg(2), pairs, store, StageCheckpoint(
            3, 16, _cfg(3), build_siamese(16).named()))
    with pytest.raises(PrerequisiteError):
        train_stage3(_cfg(3), store, split, s1, None)
    with pytest.raises(ConfigError):
        train_stage1(_cfg(2), pairs, store)


def test_stage3_single_class(data):
    store, _, pairs = data
    split = make_split(store, SplitSpec({0}, {4}))
    pairs = sample_training_pairs(store, split, 4, seed=0)
    s1, _ = train_stage1(_cfg(1, epochs=0), pairs, store)
    s2, _ = train_stage2(_cfg(2, epochs=0), pairs, store, s1)
    with pytest.raises(DataError):
        train_stage3(_cfg(3, epochs=1), store, split, s1, s2)


def test_checkpoint_accessors():
    ckpt = StageCheckpoint(2, 8, _cfg(2), build_stage2(8).named())
    assert ckpt.stage2().g2.in_dim == 16
    with pytest.raises(StateError):
        ckpt.stage1()


def test_stage_config_text_round_trip():
    cfg = _cfg(2, epochs=3)
    assert StageConfig.from_text(cfg.to_text()) == cfg
    assert cfg.to_text().splitlines() == sorted(cfg.to_text().splitlines())
    with pytest.raises(ConfigError):
        StageConfig.defaults(3).replace(batch_size=7)


def test_checkpoint_round_trip_bit_exact(trained, tmp_path):
    for ckpt, _ in trained:
        path = tmp_path / f"s{ckpt.stage}.ckpt"
        save_checkpoint(ckpt, path)
        back = load_checkpoint(path)
        assert back.config == ckpt.config and back.epochs_completed == ckpt.epochs_completed
        save_checkpoint(back, tmp_path / "again.ckpt")
        assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()
        for name, net in ckpt.nets.items():
            assert back.nets[name].equals(net)


def test_checkpoint_corruption(trained):
    data = encode_checkpoint(trained[0][0])
    with pytest.raises(TruncatedFileError):
        decode_checkpoint(data[:len(data) // 2])
    with pytest.raises(TruncatedFileError):
        decode_checkpoint(data[:2])
    with pytest.raises(UnsupportedVersionError):
        decode_checkpoint(data[:4] + struct.pack("<H", 99) + data[6:])
    with pytest.raises(BadMagicError):
        decode_checkpoint(b"SANF" + data[4:])
    flipped = bytearray(data)
    flipped[len(data) // 2] ^= 0x01
    with pytest.raises(ChecksumError):
        decode_checkpoint(bytes(flipped))


def test_non_finite_params_refuse_to_save():
    nets = build_stage1(8).named()
    nets["G1"].layers[0].weight[0, 0] = np.nan
    from san.errors import NumericError
    with pytest.raises(NumericError):
        encode_checkpoint(StageCheckpoint(1, 8, _cfg(1), nets))
