"""Metric losses and the label-free embedding divergence, with exact gradients.

Three objectives live here:

* a triplet loss over all valid in-batch (anchor, positive, negative)
  triples, with Euclidean distances;
* a proxy-anchor loss over cosine similarities between embeddings and one
  learnable proxy per training class;
* an embedding divergence between a batch of embeddings and a frozen
  reference, used as the objective inside attacks and as a regularizer.

All gradients are derived by hand and checked against central finite
differences in the tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError, ResampleBatch, ShapeError
from .rng import Rng

COSINE = "cosine"
SQEUCLIDEAN = "sqeuclidean"


@dataclass(frozen=True)
class TripletConfig:
    margin: float = 0.5


@dataclass
class ProxySet:
    """One learnable proxy row per training class, plus the loss constants.

    Proxies are trained by the same optimizer updates as model weights.
    """

    proxies: np.ndarray   # [n_classes, embed_dim]
    class_ids: np.ndarray  # [n_classes]
    scale: float = 32.0
    margin: float = 0.1

    def copy(self) -> "ProxySet":
        return ProxySet(self.proxies.copy(), self.class_ids.copy(), self.scale, self.margin)


def init_proxies(class_ids, dim: int, rng: Rng, scale: float = 32.0, margin: float = 0.1) -> ProxySet:
    ids = np.unique(np.asarray(class_ids, dtype=int))
    p = rng.normal(size=(len(ids), dim)) / np.sqrt(dim)
    return ProxySet(proxies=p, class_ids=ids, scale=scale, margin=margin)


def _softplus(x):
    # log(1 + e^x), overflow-safe for |x| up to ~1e3 * any margin products
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def _sigmoid(x):
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _unit_rows(a, what: str):
    norms = np.linalg.norm(a, axis=1)
    if np.any(norms == 0.0):
        rows = np.where(norms == 0.0)[0].tolist()
        raise NumericError(f"zero-norm {what} row(s) {rows}: cosine undefined")
    return a / norms[:, None], norms


def triplet_loss(embeds: np.ndarray, labels, cfg: TripletConfig):
    """Mean over all valid in-batch triples of d(a,p) + max(0, margin - d(a,n)).

    Returns (loss, d_embeds). Inactive hinge branches and coincident points
    contribute zero gradient.
    """
    e = np.asarray(embeds, dtype=float)
    y = np.asarray(labels, dtype=int)
    n = e.shape[0]
    if y.shape[0] != n:
        raise ShapeError("labels", (n,), y.shape)
    same = y[:, None] == y[None, :]
    pos_mask = same & ~np.eye(n, dtype=bool)
    neg_mask = ~same
    n_pos = pos_mask.sum(axis=1)
    n_neg = neg_mask.sum(axis=1)
    n_triples = int((n_pos * n_neg).sum())
    if n_triples == 0:
        raise ResampleBatch("batch holds no valid (anchor, positive, negative) triple")

    diff = e[:, None, :] - e[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=2))
    hinge = np.maximum(0.0, cfg.margin - dist)
    loss = (
        (n_neg[:, None] * dist * pos_mask).sum()
        + (n_pos[:, None] * hinge * neg_mask).sum()
    ) / n_triples

    # coefficient of each ordered pair distance inside the summed loss
    coef = (
        pos_mask * n_neg[:, None].astype(float)
        - neg_mask * n_pos[:, None] * (hinge > 0.0)
    ) / n_triples
    inv = np.zeros_like(dist)
    nz = dist > 0.0
    inv[nz] = 1.0 / dist[nz]
    w = (coef + coef.T) * inv
    d_embeds = (w[:, :, None] * diff).sum(axis=1)
    return float(loss), d_embeds


def pal_loss(embeds: np.ndarray, labels, proxy_set: ProxySet):
    """Proxy-anchor loss over cosine similarities.

    Positive proxies (those with at least one same-class sample in the
    batch) pull their samples in; every proxy pushes its non-class samples
    away. Log-sum-exp terms are max-shifted so scale * margin products up
    to about 1e3 stay finite. Returns (loss, d_embeds, d_proxies).
    """
    e = np.asarray(embeds, dtype=float)
    y = np.asarray(labels, dtype=int)
    if e.shape[0] == 0:
        raise ConfigError("empty batch")
    if e.shape[0] != y.shape[0]:
        raise ShapeError("labels", (e.shape[0],), y.shape)
    missing = np.setdiff1d(y, proxy_set.class_ids)
    if missing.size:
        raise ConfigError(f"no proxy for class id(s) {missing.tolist()}")

    alpha = proxy_set.scale
    m = proxy_set.margin
    u, e_norms = _unit_rows(e, "embedding")
    v, p_norms = _unit_rows(proxy_set.proxies, "proxy")
    sim = u @ v.T  # [batch, n_classes]
    pos = y[:, None] == proxy_set.class_ids[None, :]
    neg = ~pos
    n_classes = len(proxy_set.class_ids)

    d_sim = np.zeros_like(sim)
    loss = 0.0

    pos_cols = np.where(pos.any(axis=0))[0]
    for c in pos_cols:
        rows = pos[:, c]
        a = -alpha * (sim[rows, c] - m)
        shift = a.max()
        w = np.exp(a - shift)
        lse = shift + np.log(w.sum())
        loss += _softplus(np.array(lse)) / len(pos_cols)
        outer = _sigmoid(np.array(lse)) / len(pos_cols)
        d_sim[rows, c] += outer * (w / w.sum()) * (-alpha)

    for c in range(n_classes):
        rows = neg[:, c]
        if not rows.any():
            continue  # no non-class samples for this proxy in the batch
        b = alpha * (sim[rows, c] + m)
        shift = b.max()
        w = np.exp(b - shift)
        lse = shift + np.log(w.sum())
        loss += _softplus(np.array(lse)) / n_classes
        outer = _sigmoid(np.array(lse)) / n_classes
        d_sim[rows, c] += outer * (w / w.sum()) * alpha

    # back through sim = u @ v.T, then through each row normalization
    d_u = d_sim @ v
    d_v = d_sim.T @ u
    d_embeds = (d_u - u * np.sum(u * d_u, axis=1, keepdims=True)) / e_norms[:, None]
    d_proxies = (d_v - v * np.sum(v * d_v, axis=1, keepdims=True)) / p_norms[:, None]
    return float(loss), d_embeds, d_proxies


def embed_divergence(embeds: np.ndarray, ref: np.ndarray, kind: str = COSINE):
    """Divergence between embeddings and a constant reference.

    `cosine` gives mean(1 - cos(e, ref)); `sqeuclidean` gives the mean
    squared Euclidean row distance. No gradient flows into `ref`.
    Returns (loss, d_embeds).
    """
    e = np.asarray(embeds, dtype=float)
    r = np.asarray(ref, dtype=float)
    if e.shape != r.shape:
        raise ShapeError("ref", e.shape, r.shape)
    n = e.shape[0]
    if kind == SQEUCLIDEAN:
        delta = e - r
        return float((delta * delta).sum() / n), 2.0 * delta / n
    if kind != COSINE:
        raise ConfigError(f"unknown divergence kind {kind!r}")
    u, e_norms = _unit_rows(e, "embedding")
    v, _ = _unit_rows(r, "reference")
    cos = np.sum(u * v, axis=1)
    loss = float(np.mean(1.0 - cos))
    d_embeds = -(v - cos[:, None] * u) / e_norms[:, None] / n
    return loss, d_embeds


def divergence_rows(embeds: np.ndarray, ref: np.ndarray, kind: str = COSINE) -> np.ndarray:
    """Per-row divergence values (no gradients), for attack reporting."""
    e = np.asarray(embeds, dtype=float)
    r = np.asarray(ref, dtype=float)
    if kind == SQEUCLIDEAN:
        return ((e - r) ** 2).sum(axis=1)
    u, _ = _unit_rows(e, "embedding")
    v, _ = _unit_rows(r, "reference")
    return 1.0 - np.sum(u * v, axis=1)
