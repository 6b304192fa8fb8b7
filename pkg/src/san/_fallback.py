"""Pure numpy implementations of the numerical kernels.

These mirror the compiled routines in ``_core.pyx`` one for one and are
used whenever the extension is unavailable or ``SAN_PURE_PYTHON`` is set.
"""

import numpy as np

_CHUNK_ELEMENTS = 1 << 22


def pairwise_sq_dists(a, b):
    """Squared Euclidean distances between rows of ``a`` and rows of ``b``.

    Differences are formed explicitly rather than through the
    ``|a|^2 + |b|^2 - 2ab`` expansion so that identical rows give exactly 0.
    """
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    n, m = a.shape[0], b.shape[0]
    out = np.empty((n, m), dtype=np.float64)
    step = max(1, _CHUNK_ELEMENTS // max(1, m * a.shape[1]))
    for start in range(0, n, step):
        diff = a[start:start + step, None, :] - b[None, :, :]
        out[start:start + step] = np.einsum("ijk,ijk->ij", diff, diff)
    return out


def rbf_bank(a, b, sigmas, etas):
    """Kernel matrix and its derivative with respect to the squared distance."""
    d2 = pairwise_sq_dists(a, b)
    k = np.zeros_like(d2)
    slope = np.zeros_like(d2)
    for sigma, eta in zip(sigmas, etas):
        e = eta * np.exp(-d2 / (2.0 * sigma))
        k += e
        slope -= e / (2.0 * sigma)
    return k, slope


def mmd_and_grad(x, y, sigmas, etas, normalize=True):
    """Biased multi-kernel MMD between ``x`` and ``y`` and its gradient wrt ``y``."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    n, m = x.shape[0], y.shape[0]
    kxx, _ = rbf_bank(x, x, sigmas, etas)
    kxy, sxy = rbf_bank(x, y, sigmas, etas)
    kyy, syy = rbf_bank(y, y, sigmas, etas)
    if normalize:
        cxx, cxy, cyy = 1.0 / (n * n), 1.0 / (n * m), 1.0 / (m * m)
    else:
        cxx = cxy = cyy = 1.0
    value = cxx * kxx.sum() - 2.0 * cxy * kxy.sum() + cyy * kyy.sum()
    grad = 4.0 * cyy * (syy.sum(axis=1)[:, None] * y - syy @ y)
    grad -= 4.0 * cxy * (sxy.sum(axis=0)[:, None] * y - sxy.T @ x)
    return float(value), grad


def rank_order(dists, ids):
    """Indices sorting ``dists`` ascending, ties broken by ascending ``ids``."""
    return np.lexsort((np.asarray(ids), np.asarray(dists)))


def topk_metrics(queries, query_labels, gallery, gallery_labels, gallery_ids,
                 k, ap_min_denominator=True):
    """Precision@k and AP@k of every query against a shared gallery.

    Returns two float arrays of length ``len(queries)``.
    """
    queries = np.ascontiguousarray(queries, dtype=np.float64)
    gallery = np.ascontiguousarray(gallery, dtype=np.float64)
    gallery_labels = np.asarray(gallery_labels)
    gallery_ids = np.asarray(gallery_ids)
    nq = queries.shape[0]
    cutoff = min(k, gallery.shape[0])
    precision = np.empty(nq)
    ap = np.empty(nq)
    classes, counts = np.unique(gallery_labels, return_counts=True)
    n_rel_by_class = dict(zip(classes.tolist(), counts.tolist()))
    ranks = np.arange(1, cutoff + 1, dtype=np.float64)
    for i in range(nq):
        diff = gallery - queries[i]
        d = np.einsum("ij,ij->i", diff, diff)
        order = np.lexsort((gallery_ids, d))[:cutoff]
        rel = (gallery_labels[order] == query_labels[i]).astype(np.float64)
        hits = np.cumsum(rel)
        precision[i] = hits[-1] / cutoff
        n_rel = n_rel_by_class.get(int(query_labels[i]), 0)
        denom = min(n_rel, cutoff) if ap_min_denominator else n_rel
        # running sum, in rank order, so results match the compiled loop bit for bit
        ap[i] = 0.0 if denom == 0 else float(np.cumsum(hits / ranks * rel)[-1]) / denom
    return precision, ap
