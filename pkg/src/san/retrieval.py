"""Query embedding, gallery ranking and Precision@K / mAP@K evaluation.

A query sketch is turned into synthetic image features by the generator
stack, projected with the Siamese network, and every gallery image is
ranked by Euclidean distance to it in the projected space.  Ablated
pipelines skip the refinement stage and/or the projection; without the
projection, generated features are compared with raw gallery features.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .dataset import FeatureStore, ResolvedSplit
from .engine import forward
from .errors import ConfigError, ModeError, PrerequisiteError, ShapeError, StateError
from .training import StageCheckpoint, generate_refined


@dataclass(eq=False)
class ProjectedGallery:
    ids: np.ndarray
    labels: np.ndarray
    embeddings: np.ndarray

    def __len__(self):
        return int(self.ids.size)


@dataclass(eq=False)
class QueryEmbedding:
    sketch_id: int
    label: int
    vector: np.ndarray
    n_noise: int


@dataclass(eq=False)
class Pipeline:
    """The checkpoints making up one retrieval variant.

    ``stage2`` and ``stage3`` may be ``None`` for ablations.
    """

    stage1: StageCheckpoint
    stage2: StageCheckpoint | None = None
    stage3: StageCheckpoint | None = None
    name: str = ""

    def __post_init__(self):
        for ckpt, stage in ((self.stage1, 1), (self.stage2, 2), (self.stage3, 3)):
            if ckpt is None:
                if stage == 1:
                    raise PrerequisiteError("a stage-1 checkpoint is required")
                continue
            if ckpt.stage != stage:
                raise StateError(f"slot {stage} holds a stage-{ckpt.stage} checkpoint")
            if ckpt.feature_dim != self.stage1.feature_dim:
                raise ShapeError("checkpoints disagree on feature_dim")
        if self.stage3 is not None and self.stage2 is None:
            raise ConfigError("the Siamese projection needs the refinement stage")
        if not self.name:
            self.name = variant_name(self.stage2 is not None,
                                     self.stage2 is not None and self.stage2.config.weights.gamma > 0,
                                     self.stage3 is not None)

    @property
    def feature_dim(self) -> int:
        return self.stage1.feature_dim

    def digest(self) -> str:
        h = hashlib.sha256()
        for ckpt in (self.stage1, self.stage2, self.stage3):
            if ckpt is not None:
                h.update(ckpt.config.to_text().encode())
        return h.hexdigest()[:16]


def variant_name(use_stage2: bool, use_mmd: bool, use_siamese: bool) -> str:
    name = "G1"
    if use_stage2:
        name += "+G2"
    if use_mmd:
        name += "+MMD"
    if use_siamese:
        name += "+P"
    return name


def _project(pipeline: Pipeline, features):
    if pipeline.stage3 is None:
        return np.asarray(features, dtype=np.float64)
    return forward(pipeline.stage3.siamese().net, features)[0]


def embed_gallery(pipeline: Pipeline, features, ids, labels) -> ProjectedGallery:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] == 0:
        raise ShapeError("gallery is empty")
    if features.shape[1] != pipeline.feature_dim:
        raise ShapeError(f"gallery features have width {features.shape[1]}, "
                         f"expected {pipeline.feature_dim}")
    return ProjectedGallery(np.asarray(ids, dtype=np.uint64), np.asarray(labels, dtype=np.int64),
                            _project(pipeline, features))


def embed_queries(pipeline: Pipeline, sketches, n_z: int = 1, seed: int = 0) -> np.ndarray:
    """Embeddings of a batch of sketch features, averaged over ``n_z`` noise draws."""
    if n_z < 1:
        raise ConfigError("n_z must be at least 1")
    C = np.asarray(sketches, dtype=np.float64)
    if C.ndim != 2 or C.shape[1] != pipeline.feature_dim:
        raise ShapeError(f"sketch features must have width {pipeline.feature_dim}")
    rng = np.random.default_rng(seed)
    total = None
    for _ in range(n_z):
        emb = _project(pipeline, generate_refined(pipeline.stage1, pipeline.stage2, C, rng))
        total = emb if total is None else total + emb
    return total / n_z


def embed_query(pipeline: Pipeline, c, n_z: int = 1, seed: int = 0, sketch_id: int = 0,
                label: int = -1) -> QueryEmbedding:
    c = np.asarray(c, dtype=np.float64).reshape(1, -1)
    return QueryEmbedding(sketch_id, label, embed_queries(pipeline, c, n_z, seed)[0], n_z)


def rank(query: QueryEmbedding | np.ndarray, gallery: ProjectedGallery) -> np.ndarray:
    """Gallery ids by ascending distance, ties by ascending id."""
    q = query.vector if isinstance(query, QueryEmbedding) else np.asarray(query, dtype=np.float64)
    if len(gallery) == 0:
        raise ShapeError("gallery is empty")
    diff = gallery.embeddings - q
    d = np.einsum("ij,ij->i", diff, diff)
    return gallery.ids[kernels.rank_order(d, gallery.ids)]


def _check_ranking(ranked_labels, k):
    if k < 1:
        raise ConfigError("K must be at least 1")
    ranked = np.asarray(ranked_labels)
    if ranked.size == 0:
        raise ShapeError("ranking is empty")
    return ranked


def precision_at_k(ranked_labels, query_label, k: int) -> float:
    ranked = _check_ranking(ranked_labels, k)
    top = ranked[:min(k, ranked.size)]
    return float(np.count_nonzero(top == query_label)) / top.size


def average_precision_at_k(ranked_labels, query_label, k: int, n_relevant: int | None = None,
                           min_denominator: bool = True) -> float:
    """AP truncated at rank ``k``.

    The sum of Precision@r over relevant ranks r <= k is divided by
    ``min(R, k)`` (or by ``R`` with ``min_denominator=False``), where ``R`` is
    the number of relevant gallery items; it defaults to the count within
    ``ranked_labels``.
    """
    ranked = _check_ranking(ranked_labels, k)
    rel = (ranked == query_label)
    if n_relevant is None:
        n_relevant = int(np.count_nonzero(rel))
    top = rel[:min(k, ranked.size)].astype(np.float64)
    denom = min(n_relevant, k) if min_denominator else n_relevant
    if denom == 0:
        return 0.0
    hits = np.cumsum(top)
    return float(np.cumsum(top * hits / np.arange(1, top.size + 1))[-1]) / denom


@dataclass(eq=False)
class MetricsReport:
    k: int
    mode: str
    variant: str
    seed: int
    n_z: int
    config_digest: str
    query_ids: np.ndarray
    query_labels: np.ndarray
    precision: np.ndarray
    average_precision: np.ndarray
    gallery_size: int
    per_class: dict[int, tuple[int, float, float]] = field(default_factory=dict)

    @property
    def query_count(self) -> int:
        return int(self.query_ids.size)

    @property
    def mean_precision(self) -> float:
        return float(self.precision.mean())

    @property
    def mean_ap(self) -> float:
        return float(self.average_precision.mean())

    @property
    def class_mean_precision(self) -> float:
        return float(np.mean([p for _, p, _ in self.per_class.values()]))

    @property
    def class_mean_ap(self) -> float:
        return float(np.mean([a for _, _, a in self.per_class.values()]))

    def summary(self) -> dict[str, str]:
        """Ordered key/value view used by both text renderings."""
        k = self.k
        return {
            "variant": self.variant,
            "mode": self.mode,
            "k": str(k),
            f"precision@{k}": f"{self.mean_precision:.6f}",
            f"map@{k}": f"{self.mean_ap:.6f}",
            f"class_mean_precision@{k}": f"{self.class_mean_precision:.6f}",
            f"class_mean_map@{k}": f"{self.class_mean_ap:.6f}",
            "query_count": str(self.query_count),
            "gallery_size": str(self.gallery_size),
            "n_z": str(self.n_z),
            "seed": str(self.seed),
            "config_digest": self.config_digest,
        }

    def to_text(self) -> str:
        lines = [f"{key}: {value}" for key, value in self.summary().items()]
        for label, (count, p, ap) in sorted(self.per_class.items()):
            lines.append(f"class.{label}: queries={count} precision={p:.6f} map={ap:.6f}")
        return "\n".join(lines) + "\n"

    def to_tsv(self) -> str:
        k = self.k
        lines = ["scope\tlabel\tqueries\tprecision@%d\tmap@%d" % (k, k),
                 f"overall\t*\t{self.query_count}\t{self.mean_precision:.6f}\t{self.mean_ap:.6f}",
                 f"class_mean\t*\t{self.query_count}\t{self.class_mean_precision:.6f}"
                 f"\t{self.class_mean_ap:.6f}"]
        for label, (count, p, ap) in sorted(self.per_class.items()):
            lines.append(f"class\t{label}\t{count}\t{p:.6f}\t{ap:.6f}")
        for qid, lab, p, ap in zip(self.query_ids, self.query_labels, self.precision,
                                   self.average_precision):
            lines.append(f"query\t{lab}\t{qid}\t{p:.6f}\t{ap:.6f}")
        return "\n".join(lines) + "\n"


def evaluate(pipeline: Pipeline, split: ResolvedSplit, store: FeatureStore, k: int = 200,
             n_z: int = 1, seed: int = 0, mode: str | None = None,
             config_digest: str | None = None, min_denominator: bool = True,
             shuffle_gallery_labels: bool = False) -> MetricsReport:
    """Precision@K and mAP@K of every test sketch against the test gallery.

    ``mode`` must match the split's mode when given.  Metrics are averaged
    per query; per-class means are reported alongside.
    ``shuffle_gallery_labels`` permutes gallery labels (a permutation null).
    """
    if mode is not None and mode.lower() != split.mode:
        raise ModeError(f"requested {mode} evaluation on a {split.mode}-resolved split")
    if k < 1:
        raise ConfigError("K must be at least 1")
    if store.feature_dim != pipeline.feature_dim:
        raise ShapeError("store and checkpoints disagree on feature_dim")
    if split.test_query_sketches.size == 0 or split.test_gallery_images.size == 0:
        raise ShapeError("split has no test queries or no gallery images")
    g_ids = split.test_gallery_images
    g_labels = store.labels_of(g_ids)
    if shuffle_gallery_labels:
        g_labels = np.random.default_rng(seed).permutation(g_labels)
    gallery = embed_gallery(pipeline, store.vectors_of(g_ids), g_ids, g_labels)
    q_ids = split.test_query_sketches
    q_labels = store.labels_of(q_ids)
    queries = embed_queries(pipeline, store.vectors_of(q_ids), n_z, seed)
    precision, ap = kernels.topk_metrics(queries, q_labels, gallery.embeddings, gallery.labels,
                                         gallery.ids, k, min_denominator)
    per_class = {}
    for label in np.unique(q_labels).tolist():
        sel = q_labels == label
        per_class[int(label)] = (int(sel.sum()), float(precision[sel].mean()),
                                 float(ap[sel].mean()))
    return MetricsReport(k, split.mode, pipeline.name, seed, n_z,
                         config_digest or pipeline.digest(), np.asarray(q_ids), q_labels,
                         precision, ap, len(gallery), per_class)


def embedding_dump(pipeline: Pipeline, split: ResolvedSplit, store: FeatureStore, n_z: int = 1,
                   seed: int = 0) -> str:
    """TSV of query and gallery embeddings with labels, for external plotting."""
    g_ids = split.test_gallery_images
    gallery = embed_gallery(pipeline, store.vectors_of(g_ids), g_ids, store.labels_of(g_ids))
    q_ids = split.test_query_sketches
    queries = embed_queries(pipeline, store.vectors_of(q_ids), n_z, seed)
    dim = gallery.embeddings.shape[1]
    lines = ["kind\tid\tlabel\t" + "\t".join(f"e{i}" for i in range(dim))]
    for kind, ids, labels, emb in (("query", q_ids, store.labels_of(q_ids), queries),
                                   ("gallery", gallery.ids, gallery.labels, gallery.embeddings)):
        for i, lab, row in zip(ids, labels, emb):
            lines.append(f"{kind}\t{i}\t{lab}\t" + "\t".join(repr(float(v)) for v in row))
    return "\n".join(lines) + "\n"
