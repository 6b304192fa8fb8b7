import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from san import dataset
from san.dataset import (GZSL, IMAGE, SKETCH, ZSL, FeatureRecord, FeatureStore, SplitSpec,
                         SynthConfig, decode_feature_store, encode_feature_store,
                         load_feature_csv, load_feature_file, make_split, sample_siamese_batch,
                         sample_training_pairs, synth_generate, write_feature_csv,
                         write_feature_file)
from san.errors import (BadMagicError, ChecksumError, ConfigError, DataError, DimensionError,
                        FormatError, SamplingError, SplitError, TruncatedFileError,
                        UnsupportedVersionError)


@pytest.fixture(scope="module")
def toy():
    return synth_generate(SynthConfig(seed=1))


def _small_store():
    recs = [FeatureRecord(10, 0, SKETCH, [0.5, -1.0, 2.0]),
            FeatureRecord(11, 0, IMAGE, [0.25, 0.0, 1.0]),
            FeatureRecord(20, 3, SKETCH, [1.0, 1.0, 1.0]),
            FeatureRecord(21, 3, IMAGE, [-2.0, 0.125, 8.0])]
    return FeatureStore.from_records(recs, 3, {0: "cat", 3: "éclair"})


def test_store_validation():
    with pytest.raises(DataError):
        FeatureStore(2, [1, 1], [0, 0], [0, 1], np.zeros((2, 2)))
    with pytest.raises(DataError):
        FeatureStore(2, [1], [0], [2], np.zeros((1, 2)))
    with pytest.raises(DataError):
        FeatureStore(2, [1], [0], [0], [[np.nan, 0.0]])
    with pytest.raises(DataError):
        _small_store().rows([99])


def test_sanf_round_trip_bit_exact(tmp_path):
    store = _small_store()
    path = tmp_path / "s.sanf"
    write_feature_file(store, path)
    back = load_feature_file(path)
    assert back == store
    assert encode_feature_store(back) == path.read_bytes()


def test_sanf_layout():
    store = _small_store()
    data = encode_feature_store(store)
    magic, version, dim, count = struct.unpack_from("<4sHIQ", data)
    assert (magic, version, dim, count) == (b"SANF", 1, 3, 4)
    assert struct.unpack("<I", data[-4:])[0] == zlib.crc32(data[:-4])
    # class table: count, then (label u32, name len u16, utf-8 name)
    off = 18
    assert struct.unpack_from("<I", data, off)[0] == 2
    record = 8 + 4 + 1 + 3 * 4
    assert len(data) == off + 4 + (4 + 2 + 3) + (4 + 2 + len("éclair".encode())) + 4 * record + 4


def test_sanf_corruption_errors():
    data = encode_feature_store(_small_store())
    with pytest.raises(BadMagicError):
        decode_feature_store(b"XXXX" + data[4:])
    with pytest.raises(UnsupportedVersionError):
        decode_feature_store(data[:4] + struct.pack("<H", 99) + data[6:])
    with pytest.raises(TruncatedFileError):
        decode_feature_store(data[:-9])
    with pytest.raises(TruncatedFileError):
        decode_feature_store(data[:2])
    flipped = bytearray(data)
    flipped[-10] ^= 0xFF
    with pytest.raises(ChecksumError):
        decode_feature_store(bytes(flipped))
    with pytest.raises(DimensionError):
        decode_feature_store(data[:-4] + b"\0" * 8 + data[-4:])
    for exc in (BadMagicError, ChecksumError, TruncatedFileError, UnsupportedVersionError):
        assert issubclass(exc, FormatError)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(0, 12), dim=st.integers(1, 6), seed=st.integers(0, 10_000))
def test_sanf_round_trip_property(n, dim, seed):
    rng = np.random.default_rng(seed)
    vec = rng.normal(size=(n, dim)).astype(np.float32).astype(np.float64)
    store = FeatureStore(dim, rng.permutation(10 * n + 1)[:n] + 1, rng.integers(0, 4, n),
                         rng.integers(0, 2, n), vec, {0: "a", 1: "b"})
    data = encode_feature_store(store)
    assert decode_feature_store(data) == store
    assert encode_feature_store(decode_feature_store(data)) == data


def test_csv_round_trip(tmp_path):
    store = _small_store()
    path = tmp_path / "s.csv"
    write_feature_csv(store, path)
    back = load_feature_csv(path, store.class_names)
    assert back == store


def test_csv_bad_rows(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("1,0,sketch,1.0,2.0\n2,0,image,1.0\n")
    with pytest.raises(DimensionError):
        load_feature_csv(path)
    path.write_text("1,0,photo,1.0\n")
    with pytest.raises(DataError):
        load_feature_csv(path)


def test_synth_counts_and_determinism(toy):
    assert len(toy) == 20 * (25 + 50)
    assert toy.classes() == list(range(20))
    assert np.count_nonzero(toy.domains == SKETCH) == 500
    assert synth_generate(SynthConfig(seed=1)) == toy
    assert not synth_generate(SynthConfig(seed=2)) == toy


def test_synth_noise_free_identity_limit():
    store = synth_generate(SynthConfig(classes=4, per_class_sketches=3, per_class_images=3,
                                       domain_gap_noise=0.0, image_noise=0.0, identity_map=True))
    for c in range(4):
        sk = store.vectors[(store.labels == c) & (store.domains == SKETCH)]
        im = store.vectors[(store.labels == c) & (store.domains == IMAGE)]
        np.testing.assert_array_equal(sk, im)
        np.testing.assert_allclose(np.linalg.norm(sk, axis=1), 1.0, atol=1e-6)


def test_synth_rejects_bad_counts():
    with pytest.raises(ConfigError):
        SynthConfig(classes=0)
    with pytest.raises(ConfigError):
        SynthConfig(latent_rank=40)


def _centroid_accuracy(store, domain):
    mask = store.domains == domain
    x, y = store.vectors[mask], store.labels[mask]
    classes = np.unique(y)
    cent = np.stack([x[y == c].mean(axis=0) for c in classes])
    hits = 0
    for v, label in zip(x, y):
        best = min(range(len(classes)), key=lambda j: float(np.sum((v - cent[j]) ** 2)))
        hits += classes[best] == label
    return hits / len(y)


@pytest.mark.parametrize("seed", range(4))
def test_synth_nearest_centroid_accuracy(seed):
    store = synth_generate(SynthConfig(seed=seed))
    assert _centroid_accuracy(store, IMAGE) >= 0.95


def test_zsl_split(toy):
    spec = SplitSpec(range(14), range(14, 20), ZSL)
    split = make_split(toy, spec)
    assert set(toy.labels_of(split.train).tolist()) == set(range(14))
    assert set(toy.labels_of(split.test_query_sketches).tolist()) == set(range(14, 20))
    assert np.all(toy.vectors_of(split.test_query_sketches) is not None)
    assert np.all(toy.domains[toy.rows(split.test_query_sketches)] == SKETCH)
    assert np.all(toy.domains[toy.rows(split.test_gallery_images)] == IMAGE)
    assert split.summary() == {"mode": "zsl", "seen_classes": 14, "unseen_classes": 6,
                               "train": 14 * 75, "queries": 6 * 25, "gallery": 6 * 50}


def test_gzsl_injection_counts(toy):
    split = make_split(toy, SplitSpec(range(14), range(14, 20), GZSL, seed=5))
    q_labels = toy.labels_of(split.test_query_sketches)
    g_labels = toy.labels_of(split.test_gallery_images)
    for c in range(14):
        assert np.count_nonzero(q_labels == c) == 2   # floor(0.1 * 25)
        assert np.count_nonzero(g_labels == c) == 5   # floor(0.1 * 50)
    train = set(split.train.tolist())
    assert not train & set(split.test_query_sketches.tolist())
    assert not train & set(split.test_gallery_images.tolist())
    assert len(train) == 14 * (75 - 7)


def test_split_errors(toy):
    with pytest.raises(SplitError):
        SplitSpec({1, 2}, {2, 3})
    with pytest.raises(SplitError):
        make_split(toy, SplitSpec({0}, {99}))
    with pytest.raises(ConfigError):
        SplitSpec({0}, {1}, mode="fsl")


def test_min_gallery_size_filter():
    store = synth_generate(SynthConfig(classes=4, per_class_images=10, seed=0))
    split = make_split(store, SplitSpec({0, 1}, {2, 3}, min_gallery_size=10))
    assert split.unseen_classes == ()
    split = make_split(store, SplitSpec({0, 1}, {2, 3}, min_gallery_size=9))
    assert split.unseen_classes == (2, 3)


@settings(max_examples=25, deadline=None)
@given(n_classes=st.integers(2, 6), n_sk=st.integers(1, 12), n_im=st.integers(1, 12),
       frac=st.floats(0.05, 0.9), seed=st.integers(0, 1000), gzsl=st.booleans())
def test_split_properties(n_classes, n_sk, n_im, frac, seed, gzsl):
    store = synth_generate(SynthConfig(classes=n_classes, per_class_sketches=n_sk,
                                       per_class_images=n_im, feature_dim=4, seed=seed))
    n_unseen = 1 + seed % (n_classes - 1)
    unseen = set(range(n_unseen))
    spec = SplitSpec(set(range(n_classes)) - unseen, unseen, GZSL if gzsl else ZSL, frac, seed)
    split = make_split(store, spec)
    train = set(split.train.tolist())
    test = set(split.test_query_sketches.tolist()) | set(split.test_gallery_images.tolist())
    assert not train & test
    assert len(train) + len(test) == len(store)
    if not gzsl:
        assert set(store.labels_of(list(test)).tolist()) <= unseen
    else:
        q = store.labels_of(split.test_query_sketches)
        for c in spec.seen_classes:
            assert np.count_nonzero(q == c) == int(np.floor(frac * n_sk))


def test_training_pairs(toy):
    split = make_split(toy, SplitSpec(range(14), range(14, 20)))
    pairs = sample_training_pairs(toy, split, 30, seed=4)
    assert len(pairs) == 14 * 30
    np.testing.assert_array_equal(toy.labels_of(pairs.sketch_ids), pairs.labels)
    np.testing.assert_array_equal(toy.labels_of(pairs.image_ids), pairs.labels)
    assert np.all(toy.domains[toy.rows(pairs.sketch_ids)] == SKETCH)
    assert np.all(toy.domains[toy.rows(pairs.image_ids)] == IMAGE)
    assert pairs == sample_training_pairs(toy, split, 30, seed=4)
    assert not pairs == sample_training_pairs(toy, split, 30, seed=5)
    assert set(pairs.sketch_ids.tolist()) <= set(split.train.tolist())


def test_pairs_forced_unique_pairing():
    recs = [FeatureRecord(1, 0, SKETCH, [0.0]), FeatureRecord(2, 0, IMAGE, [1.0]),
            FeatureRecord(3, 1, SKETCH, [2.0]), FeatureRecord(4, 1, IMAGE, [3.0])]
    store = FeatureStore.from_records(recs, 1)
    split = make_split(store, SplitSpec({0, 1}, set()))
    pairs = sample_training_pairs(store, split, 1, seed=0)
    assert list(pairs) == [(1, 2, 0), (3, 4, 1)]
    with pytest.raises(ConfigError):
        sample_training_pairs(store, split, 0, seed=0)


def test_siamese_batch_balance(toy):
    split = make_split(toy, SplitSpec(range(14), range(14, 20)))
    rows = toy.rows(split.train)
    rows = rows[toy.domains[rows] == SKETCH]
    gen, labels = toy.vectors[rows], toy.labels[rows]
    left, right, pl = sample_siamese_batch(gen, labels, toy, split, 32, seed=0)
    assert left.shape == right.shape == (32, 32)
    np.testing.assert_array_equal(pl.y_true, [1] * 16 + [0] * 16)
    np.testing.assert_array_equal(pl.y_false, 1 - pl.y_true)
    a, b, c = sample_siamese_batch(gen, labels, toy, split, 32, seed=0)
    np.testing.assert_array_equal(a, left)
    np.testing.assert_array_equal(b, right)
    with pytest.raises(ConfigError):
        sample_siamese_batch(gen, labels, toy, split, 7, seed=0)


def test_siamese_batch_single_class():
    store = synth_generate(SynthConfig(classes=2, per_class_sketches=2, per_class_images=2))
    split = make_split(store, SplitSpec({0}, {1}))
    with pytest.raises(SamplingError):
        sample_siamese_batch(np.zeros((1, 32)), [0], store, split, 4, seed=0)
