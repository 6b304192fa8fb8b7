"""Feature stores, the SANF file format, zero-shot splits and samplers.

A SANF file is little-endian::

    "SANF" | version u16 | feature_dim u32 | record_count u64
    | class count u32, then per class: label u32, name length u16, UTF-8 name
    | per record: id u64, label u32, domain u8, feature_dim x f32
    | CRC32 of every preceding byte, u32

Vectors are stored as float32 and promoted to float64 on load.
"""

from __future__ import annotations

import csv
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping

import numpy as np

from .errors import (BadMagicError, ChecksumError, ConfigError, DataError, DimensionError,
                     SamplingError, ShapeError, SplitError, TruncatedFileError,
                     UnsupportedVersionError)
from .losses import PairLabels

SKETCH = 0
IMAGE = 1
DOMAIN_NAMES = {SKETCH: "sketch", IMAGE: "image"}

SANF_MAGIC = b"SANF"
SANF_VERSION = 1
_HEADER = struct.Struct("<4sHIQ")
_CRC = struct.Struct("<I")


@dataclass(frozen=True)
class FeatureRecord:
    id: int
    class_label: int
    domain: int
    vector: np.ndarray


@dataclass(eq=False)
class FeatureStore:
    """Column-oriented collection of feature records."""

    feature_dim: int
    ids: np.ndarray
    labels: np.ndarray
    domains: np.ndarray
    vectors: np.ndarray
    class_names: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        self.feature_dim = int(self.feature_dim)
        self.ids = np.asarray(self.ids, dtype=np.uint64).reshape(-1)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.domains = np.asarray(self.domains, dtype=np.uint8).reshape(-1)
        self.vectors = np.asarray(self.vectors, dtype=np.float64).reshape(-1, self.feature_dim)
        n = self.ids.size
        if not (self.labels.size == self.domains.size == self.vectors.shape[0] == n):
            raise ShapeError("record columns differ in length")
        if np.unique(self.ids).size != n:
            raise DataError("record ids are not unique")
        if n and self.labels.min() < 0:
            raise DataError("class labels must be non-negative")
        if n and self.domains.max() > IMAGE:
            raise DataError("domain must be 0 (sketch) or 1 (image)")
        if not np.all(np.isfinite(self.vectors)):
            raise DataError("feature vectors contain non-finite values")
        self.class_names = {int(k): str(v) for k, v in self.class_names.items()}
        self._row_of = {int(i): r for r, i in enumerate(self.ids)}

    @classmethod
    def from_records(cls, records: Iterable[FeatureRecord], feature_dim: int,
                     class_names: Mapping[int, str] | None = None) -> "FeatureStore":
        records = list(records)
        vectors = np.zeros((len(records), feature_dim))
        for r, rec in enumerate(records):
            v = np.asarray(rec.vector, dtype=np.float64)
            if v.shape != (feature_dim,):
                raise ShapeError(f"record {rec.id} has {v.size} values, expected {feature_dim}")
            vectors[r] = v
        return cls(feature_dim, [r.id for r in records], [r.class_label for r in records],
                   [r.domain for r in records], vectors, dict(class_names or {}))

    def __len__(self):
        return int(self.ids.size)

    def __iter__(self) -> Iterator[FeatureRecord]:
        for r in range(len(self)):
            yield FeatureRecord(int(self.ids[r]), int(self.labels[r]), int(self.domains[r]),
                                self.vectors[r])

    def __eq__(self, other):
        if not isinstance(other, FeatureStore):
            return NotImplemented
        return (self.feature_dim == other.feature_dim
                and self.class_names == other.class_names
                and np.array_equal(self.ids, other.ids)
                and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.domains, other.domains)
                and np.array_equal(self.vectors, other.vectors))

    def classes(self) -> list[int]:
        return sorted(set(self.labels.tolist()) | set(self.class_names))

    def rows(self, ids) -> np.ndarray:
        """Row indices of the given record ids."""
        try:
            return np.fromiter((self._row_of[int(i)] for i in np.asarray(ids).reshape(-1)),
                               dtype=np.intp)
        except KeyError as exc:
            raise DataError(f"unknown record id {exc.args[0]}") from None

    def vectors_of(self, ids) -> np.ndarray:
        return self.vectors[self.rows(ids)]

    def labels_of(self, ids) -> np.ndarray:
        return self.labels[self.rows(ids)]

    def select(self, mask) -> np.ndarray:
        """Record ids where ``mask`` holds."""
        return self.ids[np.asarray(mask, dtype=bool)]


def _atomic_write(path, data: bytes):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _record_dtype(feature_dim):
    return np.dtype([("id", "<u8"), ("label", "<u4"), ("domain", "u1"),
                     ("vector", "<f4", (feature_dim,))])


def encode_feature_store(store: FeatureStore) -> bytes:
    parts = [_HEADER.pack(SANF_MAGIC, SANF_VERSION, store.feature_dim, len(store))]
    parts.append(struct.pack("<I", len(store.class_names)))
    for label in sorted(store.class_names):
        name = store.class_names[label].encode("utf-8")
        parts.append(struct.pack("<IH", label, len(name)) + name)
    recs = np.zeros(len(store), dtype=_record_dtype(store.feature_dim))
    recs["id"] = store.ids
    recs["label"] = store.labels
    recs["domain"] = store.domains
    recs["vector"] = store.vectors.astype(np.float32)
    parts.append(recs.tobytes())
    body = b"".join(parts)
    return body + _CRC.pack(zlib.crc32(body))


def write_feature_file(store: FeatureStore, path) -> None:
    _atomic_write(path, encode_feature_store(store))


def decode_feature_store(data: bytes) -> FeatureStore:
    if len(data) < 4 or data[:4] != SANF_MAGIC:
        if len(data) < 4 and SANF_MAGIC.startswith(data):
            raise TruncatedFileError("file ends inside the magic number")
        raise BadMagicError("not a SANF feature file")
    if len(data) < _HEADER.size:
        raise TruncatedFileError("file ends inside the header")
    _, version, feature_dim, count = _HEADER.unpack_from(data)
    if version != SANF_VERSION:
        raise UnsupportedVersionError(f"SANF version {version} is not supported")
    pos = _HEADER.size
    if len(data) < pos + 4:
        raise TruncatedFileError("file ends before the class table")
    (n_classes,) = struct.unpack_from("<I", data, pos)
    pos += 4
    class_names = {}
    for _ in range(n_classes):
        if len(data) < pos + 6:
            raise TruncatedFileError("file ends inside the class table")
        label, length = struct.unpack_from("<IH", data, pos)
        pos += 6
        if len(data) < pos + length:
            raise TruncatedFileError("file ends inside a class name")
        class_names[label] = data[pos:pos + length].decode("utf-8")
        pos += length
    if feature_dim == 0 and count:
        raise DimensionError("records present but feature_dim is 0")
    dtype = _record_dtype(feature_dim)
    need = pos + count * dtype.itemsize + _CRC.size
    if len(data) < need:
        raise TruncatedFileError(f"expected {need} bytes, found {len(data)}")
    if len(data) > need:
        raise DimensionError(
            f"{len(data) - need} trailing bytes: record size disagrees with feature_dim {feature_dim}")
    (crc,) = _CRC.unpack_from(data, need - _CRC.size)
    if zlib.crc32(data[:need - _CRC.size]) != crc:
        raise ChecksumError("CRC32 mismatch")
    recs = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
    return FeatureStore(feature_dim, recs["id"].copy(), recs["label"].astype(np.int64),
                        recs["domain"].copy(), recs["vector"].astype(np.float64), class_names)


def load_feature_file(path) -> FeatureStore:
    with open(path, "rb") as fh:
        return decode_feature_store(fh.read())


def _parse_domain(text):
    text = text.strip().lower()
    if text in ("0", "sketch", "s"):
        return SKETCH
    if text in ("1", "image", "im", "i"):
        return IMAGE
    raise DataError(f"unknown domain {text!r}")


def load_feature_csv(path, class_names: Mapping[int, str] | None = None) -> FeatureStore:
    """Read ``id,label,domain,v0,...,v{d-1}`` rows; a header line is optional."""
    ids, labels, domains, vectors = [], [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or not "".join(row).strip():
                continue
            if lineno == 1 and row[0].strip().lower() == "id":
                continue
            if len(row) < 4:
                raise DataError(f"line {lineno}: expected id,label,domain and a vector")
            try:
                ids.append(int(row[0]))
                labels.append(int(row[1]))
                domains.append(_parse_domain(row[2]))
                vectors.append([float(v) for v in row[3:]])
            except ValueError as exc:
                raise DataError(f"line {lineno}: {exc}") from None
    dims = {len(v) for v in vectors}
    if len(dims) > 1:
        raise DimensionError(f"rows have differing vector lengths {sorted(dims)}")
    dim = dims.pop() if dims else 0
    vec = np.asarray(vectors, dtype=np.float32).astype(np.float64).reshape(len(ids), dim)
    return FeatureStore(dim, ids, labels, domains, vec, dict(class_names or {}))


def write_feature_csv(store: FeatureStore, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "label", "domain"] + [f"v{i}" for i in range(store.feature_dim)])
        for rec in store:
            w.writerow([rec.id, rec.class_label, DOMAIN_NAMES[rec.domain]]
                       + [repr(float(np.float32(v))) for v in rec.vector])


# ---------------------------------------------------------------------------
# splits

ZSL = "zsl"
GZSL = "gzsl"


@dataclass(frozen=True)
class SplitSpec:
    seen_classes: frozenset
    unseen_classes: frozenset
    mode: str = ZSL
    gzsl_seen_fraction: float = 0.10
    seed: int = 0
    min_gallery_size: int = 0

    def __post_init__(self):
        object.__setattr__(self, "seen_classes", frozenset(int(c) for c in self.seen_classes))
        object.__setattr__(self, "unseen_classes", frozenset(int(c) for c in self.unseen_classes))
        object.__setattr__(self, "mode", str(self.mode).lower())
        overlap = self.seen_classes & self.unseen_classes
        if overlap:
            raise SplitError(f"classes both seen and unseen: {sorted(overlap)}")
        if self.mode not in (ZSL, GZSL):
            raise ConfigError(f"split mode must be 'zsl' or 'gzsl', got {self.mode!r}")
        if not 0.0 < self.gzsl_seen_fraction < 1.0:
            raise ConfigError("gzsl_seen_fraction must lie in (0, 1)")
        if self.min_gallery_size < 0:
            raise ConfigError("min_gallery_size must be non-negative")


@dataclass(eq=False)
class ResolvedSplit:
    mode: str
    seen_classes: tuple[int, ...]
    unseen_classes: tuple[int, ...]
    train: np.ndarray
    test_query_sketches: np.ndarray
    test_gallery_images: np.ndarray

    def summary(self) -> dict[str, int | str]:
        return {"mode": self.mode, "seen_classes": len(self.seen_classes),
                "unseen_classes": len(self.unseen_classes), "train": int(self.train.size),
                "queries": int(self.test_query_sketches.size),
                "gallery": int(self.test_gallery_images.size)}


def make_split(store: FeatureStore, spec: SplitSpec) -> ResolvedSplit:
    """Materialize train and test record sets for a seen/unseen partition.

    Standard mode tests on unseen classes only.  Generalized mode also moves
    ``floor(fraction * n)`` sketches and ``floor(fraction * n)`` images of
    every seen class (``n`` counted per domain) out of training and into the
    query and gallery sets respectively.
    """
    present = set(store.labels.tolist())
    missing = (spec.seen_classes | spec.unseen_classes) - present
    if missing:
        raise SplitError(f"classes not present in the store: {sorted(missing)}")
    is_sketch = store.domains == SKETCH
    is_image = store.domains == IMAGE

    unseen = sorted(spec.unseen_classes)
    if spec.min_gallery_size:
        unseen = [c for c in unseen
                  if np.count_nonzero(is_image & (store.labels == c)) > spec.min_gallery_size]
    for c in unseen:
        if not np.any(is_image & (store.labels == c)):
            raise SplitError(f"unseen class {c} has no images")
    seen = sorted(spec.seen_classes)

    in_unseen = np.isin(store.labels, unseen)
    train_mask = np.isin(store.labels, seen)
    query_mask = in_unseen & is_sketch
    gallery_mask = in_unseen & is_image

    if spec.mode == GZSL:
        rng = np.random.default_rng(spec.seed)
        for c in seen:
            for domain_mask, target in ((is_sketch, query_mask), (is_image, gallery_mask)):
                rows = np.flatnonzero(domain_mask & (store.labels == c))
                take = int(np.floor(spec.gzsl_seen_fraction * rows.size))
                if take:
                    picked = rng.choice(rows, size=take, replace=False)
                    target[picked] = True
                    train_mask[picked] = False

    return ResolvedSplit(spec.mode, tuple(seen), tuple(unseen), store.ids[train_mask],
                         store.ids[query_mask], store.ids[gallery_mask])


# ---------------------------------------------------------------------------
# samplers


@dataclass(eq=False)
class PairSet:
    sketch_ids: np.ndarray
    image_ids: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return int(self.labels.size)

    def __iter__(self):
        return zip(self.sketch_ids.tolist(), self.image_ids.tolist(), self.labels.tolist())

    def __eq__(self, other):
        if not isinstance(other, PairSet):
            return NotImplemented
        return (np.array_equal(self.sketch_ids, other.sketch_ids)
                and np.array_equal(self.image_ids, other.image_ids)
                and np.array_equal(self.labels, other.labels))


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def _train_rows(store: FeatureStore, split: ResolvedSplit) -> np.ndarray:
    return np.sort(store.rows(split.train))


def sample_training_pairs(store: FeatureStore, split: ResolvedSplit, pairs_per_class: int,
                          seed) -> PairSet:
    """Same-class sketch/image pairs, drawn with replacement from training records."""
    if pairs_per_class < 1:
        raise ConfigError("pairs_per_class must be at least 1")
    rng = _rng(seed)
    rows = _train_rows(store, split)
    labels = store.labels[rows]
    domains = store.domains[rows]
    sk_ids, im_ids, lab = [], [], []
    for c in split.seen_classes:
        sketches = rows[(labels == c) & (domains == SKETCH)]
        images = rows[(labels == c) & (domains == IMAGE)]
        if sketches.size == 0 or images.size == 0:
            raise SamplingError(f"seen class {c} lacks training sketches or images")
        sk_ids.append(store.ids[sketches[rng.integers(0, sketches.size, pairs_per_class)]])
        im_ids.append(store.ids[images[rng.integers(0, images.size, pairs_per_class)]])
        lab.append(np.full(pairs_per_class, c, dtype=np.int64))
    if not lab:
        raise SamplingError("split has no seen classes")
    return PairSet(np.concatenate(sk_ids), np.concatenate(im_ids), np.concatenate(lab))


def sample_siamese_batch(generated_features, generated_labels, real_store: FeatureStore,
                         split: ResolvedSplit, batch: int, seed):
    """Balanced batch of (generated, real) feature pairs for the Siamese stage.

    The first half pairs each drawn generated feature with a real training
    image of the same class, the second half with a real image of a class
    chosen uniformly among the other classes.  Returns
    ``(generated, real, PairLabels)``.
    """
    if batch < 2 or batch % 2:
        raise ConfigError("siamese batch size must be even and at least 2")
    rng = _rng(seed)
    gen = np.asarray(generated_features, dtype=np.float64)
    gen_labels = np.asarray(generated_labels, dtype=np.int64)
    rows = _train_rows(real_store, split)
    rows = rows[real_store.domains[rows] == IMAGE]
    real_labels = real_store.labels[rows]
    classes = np.unique(real_labels)
    if classes.size < 2:
        raise SamplingError("need at least two classes to form negative pairs")
    by_class = {int(c): rows[real_labels == c] for c in classes}
    half = batch // 2
    anchors = rng.integers(0, gen.shape[0], batch)
    partners = np.empty(batch, dtype=np.intp)
    for k in range(batch):
        c = int(gen_labels[anchors[k]])
        if k < half:
            if c not in by_class:
                raise SamplingError(f"no real training image for class {c}")
            target = c
        else:
            others = classes[classes != c]
            target = int(others[rng.integers(0, others.size)])
        pool = by_class[target]
        partners[k] = pool[rng.integers(0, pool.size)]
    labels = PairLabels.from_classes(gen_labels[anchors], real_store.labels[partners])
    return gen[anchors], real_store.vectors[partners], labels


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SynthConfig:
    """Synthetic cross-domain features.

    Class means lie on the unit sphere, restricted to a random subspace of
    dimension ``latent_rank`` (``None`` uses the whole space), and are picked
    by farthest-point selection from a random pool so no two classes nearly
    coincide.  Images are
    the mean plus isotropic Gaussian noise of expected norm ``image_noise``;
    sketches are a fixed random orthogonal map of the mean plus noise of
    expected norm ``domain_gap_noise``.

    The default rank of 2 matches the width of the Siamese output.  With
    full-rank means the 8-unit generator bottleneck at dim 32 cannot carry a
    mapping that transfers to unseen classes.
    """

    classes: int = 20
    per_class_sketches: int = 25
    per_class_images: int = 50
    feature_dim: int = 32
    domain_gap_noise: float = 0.5
    image_noise: float = 0.3
    seed: int = 0
    identity_map: bool = False
    latent_rank: int | None = 2

    def __post_init__(self):
        for name in ("classes", "per_class_sketches", "per_class_images", "feature_dim"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if self.latent_rank is not None and not 1 <= self.latent_rank <= self.feature_dim:
            raise ConfigError("latent_rank must lie in [1, feature_dim]")
        if self.domain_gap_noise < 0 or self.image_noise < 0:
            raise ConfigError("noise levels must be non-negative")


def synth_domain_map(feature_dim: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((feature_dim, feature_dim)))
    return q * np.sign(np.diag(r))


def _spread_directions(rng: np.random.Generator, n: int, dim: int, pool: int = 64) -> np.ndarray:
    # greedy farthest-point pick of n unit vectors out of pool * n random ones
    cand = rng.standard_normal((pool * n, dim))
    cand /= np.linalg.norm(cand, axis=1, keepdims=True)
    picked = [0]
    nearest = np.sum((cand - cand[0]) ** 2, axis=1)
    for _ in range(n - 1):
        j = int(np.argmax(nearest))
        picked.append(j)
        nearest = np.minimum(nearest, np.sum((cand - cand[j]) ** 2, axis=1))
    return cand[picked]


def synth_generate(cfg: SynthConfig) -> FeatureStore:
    rng = np.random.default_rng(cfg.seed)
    d = cfg.feature_dim
    transform = np.eye(d) if cfg.identity_map else synth_domain_map(d, rng)
    if cfg.latent_rank is None or cfg.latent_rank == d:
        means = _spread_directions(rng, cfg.classes, d)
    else:
        basis = synth_domain_map(d, rng)[:, :cfg.latent_rank]
        means = _spread_directions(rng, cfg.classes, cfg.latent_rank) @ basis.T
    sketch_scale = cfg.domain_gap_noise / np.sqrt(d)
    image_scale = cfg.image_noise / np.sqrt(d)
    ids, labels, domains, vectors = [], [], [], []
    next_id = 1
    for c in range(cfg.classes):
        sk = means[c] @ transform.T + sketch_scale * rng.standard_normal((cfg.per_class_sketches, d))
        im = means[c] + image_scale * rng.standard_normal((cfg.per_class_images, d))
        for block, domain in ((sk, SKETCH), (im, IMAGE)):
            n = block.shape[0]
            ids.extend(range(next_id, next_id + n))
            next_id += n
            labels.extend([c] * n)
            domains.extend([domain] * n)
            vectors.append(block)
    vec = np.concatenate(vectors).astype(np.float32).astype(np.float64)
    names = {c: f"class_{c:03d}" for c in range(cfg.classes)}
    return FeatureStore(d, ids, labels, domains, vec, names)
