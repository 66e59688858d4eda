"""Clustering-based inference and evaluation metrics.

Ensembles predict labels by majority vote over each member's own nearest
neighbor, and cluster on the row-wise concatenation of the members'
embeddings. Clustering quality is scored with NMI and pairwise F1;
retrieval with Recall@k.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attacks import AttackConfig, pgd_ensemble
from .errors import ConfigError, NumericError, ShapeError
from .model import forward
from .rng import Rng

EUCLIDEAN = "euclidean"
COSINE = "cosine"


@dataclass
class ClusterAssignment:
    ids: np.ndarray
    k: int
    inertia: float


@dataclass
class MetricsReport:
    mode: str  # "clean" | "attacked"
    nmi: float
    f1: float
    recall_at: dict
    attack: dict | None = None
    extra: dict = field(default_factory=dict)

    def validate(self) -> None:
        for v in [self.nmi, self.f1, *self.recall_at.values()]:
            if not (0.0 <= v <= 1.0):
                raise NumericError(f"metric out of [0, 1]: {v}")
        ks = sorted(self.recall_at)
        vals = [self.recall_at[k] for k in ks]
        if any(b < a for a, b in zip(vals, vals[1:])):
            raise NumericError(f"recall_at must be non-decreasing in k: {self.recall_at}")

    def to_dict(self) -> dict:
        doc = {
            "mode": self.mode,
            "nmi": self.nmi,
            "f1": self.f1,
            "recall_at": {str(k): v for k, v in sorted(self.recall_at.items())},
            "attack": self.attack,
        }
        doc.update(self.extra)
        return doc


def kmeans(points: np.ndarray, k: int, rng: Rng, tol: float = 1e-6, max_iter: int = 100) -> ClusterAssignment:
    """Lloyd's algorithm with k-means++ seeding.

    Deterministic given the rng; an emptied cluster is reseeded to the
    point farthest from its assigned centroid.
    """
    x = np.asarray(points, dtype=float)
    n = x.shape[0]
    if k < 1 or k > n:
        raise ConfigError(f"k must be in [1, {n}], got {k}")
    centers = _kmeanspp(x, k, rng)
    ids = np.zeros(n, dtype=int)
    for _ in range(max_iter):
        d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        ids = np.argmin(d2, axis=1)
        new_centers = centers.copy()
        for j in range(k):
            members = ids == j
            if members.any():
                new_centers[j] = x[members].mean(axis=0)
        # reseed empty clusters, farthest point first
        best = d2[np.arange(n), ids].copy()
        for j in range(k):
            if not (ids == j).any():
                far = int(np.argmax(best))
                new_centers[j] = x[far]
                ids[far] = j
                best[far] = 0.0
        shift = np.sqrt(((new_centers - centers) ** 2).sum(axis=1)).max()
        centers = new_centers
        if shift < tol:
            break
    d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    ids = np.argmin(d2, axis=1)
    inertia = float(d2[np.arange(n), ids].sum())
    return ClusterAssignment(ids=ids, k=k, inertia=inertia)


def _kmeanspp(x: np.ndarray, k: int, rng: Rng) -> np.ndarray:
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[int(rng.integers(0, n))]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total > 0.0:
            target = rng.uniform(0.0, total)
            pick = int(np.searchsorted(np.cumsum(d2), target, side="right"))
            pick = min(pick, n - 1)
        else:
            pick = int(rng.integers(0, n))
        centers[j] = x[pick]
        d2 = np.minimum(d2, ((x - centers[j]) ** 2).sum(axis=1))
    return centers


def _as_ids(assignment) -> np.ndarray:
    ids = getattr(assignment, "ids", assignment)
    return np.asarray(ids, dtype=int)


def nmi(assignment, labels) -> float:
    """Normalized mutual information 2*I / (H_clusters + H_labels), natural log.

    Defined as 1.0 when both partitions are single-cluster (the 0/0 case).
    """
    a = _as_ids(assignment)
    b = np.asarray(labels, dtype=int)
    if a.shape != b.shape:
        raise ShapeError("labels", a.shape, b.shape)
    if a.size == 0:
        raise ConfigError("need at least one sample")
    n = a.size
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(table, (ai, bi), 1.0)
    pij = table / n
    pi = pij.sum(axis=1)
    pj = pij.sum(axis=0)
    ha = float(-np.sum(pi[pi > 0] * np.log(pi[pi > 0])))
    hb = float(-np.sum(pj[pj > 0] * np.log(pj[pj > 0])))
    if ha == 0.0 and hb == 0.0:
        return 1.0
    nz = pij > 0
    rows, cols = np.nonzero(nz)
    info = float(
        np.sum(pij[nz] * (np.log(pij[nz]) - np.log(pi[rows]) - np.log(pj[cols])))
    )
    info = max(info, 0.0)
    return 2.0 * info / (ha + hb)


def pairwise_f1(assignment, labels) -> float:
    """Pair-counting F1 = 2TP / (2TP + FN + FP) over unordered sample pairs.

    A pair is TP when it shares both cluster and class. Returns 1.0 when
    there are no same-class pairs and no false positives.
    """
    a = _as_ids(assignment)
    b = np.asarray(labels, dtype=int)
    if a.shape != b.shape:
        raise ShapeError("labels", a.shape, b.shape)
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)

    def pairs(counts):
        return int((counts.astype(object) * (counts.astype(object) - 1) // 2).sum())

    tp = pairs(table.ravel())
    same_cluster = pairs(table.sum(axis=1))
    same_class = pairs(table.sum(axis=0))
    fp = same_cluster - tp
    fn = same_class - tp
    denom = 2 * tp + fn + fp
    if denom == 0:
        return 1.0
    return 2 * tp / denom


def _distance_matrix(e: np.ndarray, metric: str) -> np.ndarray:
    if metric == COSINE:
        norms = np.linalg.norm(e, axis=1)
        if np.any(norms == 0.0):
            raise NumericError("zero embedding row: cosine distance undefined")
        u = e / norms[:, None]
        return 1.0 - u @ u.T
    if metric == EUCLIDEAN:
        sq = ((e[:, None, :] - e[None, :, :]) ** 2).sum(axis=2)
        return np.sqrt(np.maximum(sq, 0.0))
    raise ConfigError(f"unknown metric {metric!r}")


def recall_at_k(embeds: np.ndarray, labels, k: int, metric: str = COSINE) -> float:
    """Fraction of queries with a same-class sample among their k nearest
    neighbors (self excluded; distance ties broken by sample index)."""
    e = np.asarray(embeds, dtype=float)
    y = np.asarray(labels, dtype=int)
    n = e.shape[0]
    if n < 2:
        raise ConfigError("need at least 2 samples")
    if k < 1 or k >= n:
        raise ConfigError(f"k must be in [1, {n - 1}], got {k}")
    d = _distance_matrix(e, metric)
    np.fill_diagonal(d, np.inf)
    order = np.argsort(d, axis=1, kind="stable")[:, :k]
    hits = (y[order] == y[:, None]).any(axis=1)
    return float(hits.mean())


def vote_predict(models, embeds_per_model, labels, k: int):
    """Majority-vote label prediction plus fused top-k hit flags.

    Each model votes the class of its own nearest neighbor inside its own
    embedding space. Vote ties go to the label seen earliest in any
    model's neighbor ranking, then to the smaller label id. For the fused
    top-k, candidate neighbors are ranked by how many models place them in
    their top-k, then by their mean rank among those models, then by
    sample index.
    """
    mats = [np.asarray(e, dtype=float) for e in embeds_per_model]
    y = np.asarray(labels, dtype=int)
    n = y.size
    if not mats:
        raise ConfigError("need at least one embedding matrix")
    if any(m.shape[0] != n for m in mats):
        raise ShapeError("embeds_per_model", (n, None), [m.shape for m in mats])
    if n < 2 or k < 1 or k >= n:
        raise ConfigError(f"k must be in [1, {n - 1}], got {k}")
    metrics = [COSINE if getattr(m, "normalize", True) else EUCLIDEAN for m in models]
    if len(metrics) != len(mats):
        raise ShapeError("models", (len(mats),), (len(metrics),))
    orders = []
    for e, metric in zip(mats, metrics):
        d = _distance_matrix(e, metric)
        np.fill_diagonal(d, np.inf)
        orders.append(np.argsort(d, axis=1, kind="stable"))

    preds = np.empty(n, dtype=int)
    hits = np.zeros(n, dtype=bool)
    for q in range(n):
        votes = [y[order[q, 0]] for order in orders]
        counts = {}
        for lab in votes:
            counts[lab] = counts.get(lab, 0) + 1
        top = max(counts.values())
        tied = sorted(lab for lab, c in counts.items() if c == top)
        if len(tied) == 1:
            preds[q] = tied[0]
        else:
            preds[q] = min(tied, key=lambda lab: (_first_rank(orders, y, q, lab), lab))

        # fused candidate ranking for the top-k hit
        cand = {}
        for order in orders:
            for rank, idx in enumerate(order[q, :k], start=1):
                cnt, ranks = cand.get(idx, (0, 0))
                cand[idx] = (cnt + 1, ranks + rank)
        ranked = sorted(
            cand.items(), key=lambda item: (-item[1][0], item[1][1] / item[1][0], item[0])
        )
        fused = [idx for idx, _ in ranked[:k]]
        hits[q] = bool(np.any(y[np.array(fused)] == y[q]))
    return preds, hits


def _first_rank(orders, y, q: int, lab: int) -> int:
    best = np.inf
    for order in orders:
        pos = np.nonzero(y[order[q]] == lab)[0]
        if pos.size:
            best = min(best, int(pos[0]))
    return best


def evaluate(ensemble, test_ds, attack: AttackConfig | None, ks, rng: Rng) -> MetricsReport:
    """Clean or attacked evaluation of an ensemble on a class-disjoint test set.

    Under attack, the entire test set is perturbed with the ensemble
    attack before any embedding is computed: in the clustering threat
    model both sides of every pairwise distance are attackable. Clustering
    runs on the concatenated per-model embeddings with k equal to the
    number of test classes; Recall@k uses vote fusion. Hit flags
    accumulate across the requested k values so recall is non-decreasing.
    """
    test_classes = set(test_ds.classes.tolist())
    overlap = test_classes & set(int(c) for c in ensemble.train_classes)
    if overlap:
        raise ConfigError(f"test classes overlap training classes: {sorted(overlap)}")
    x = test_ds.x
    mode = "clean"
    if attack is not None:
        adv = pgd_ensemble(x, ensemble.models, attack, rng.split("attack"))
        x = adv.x_adv
        mode = "attacked"
    embeds = [forward(m, x)[0] for m in ensemble.models]
    concat = np.hstack(embeds)
    n_classes = len(test_classes)
    assignment = kmeans(concat, n_classes, rng.split("kmeans"))
    recall = {}
    accumulated = np.zeros(len(test_ds.labels), dtype=bool)
    for k in sorted(int(k) for k in ks):
        _, hit = vote_predict(ensemble.models, embeds, test_ds.labels, k)
        accumulated |= hit
        recall[k] = float(accumulated.mean())
    report = MetricsReport(
        mode=mode,
        nmi=nmi(assignment, test_ds.labels),
        f1=pairwise_f1(assignment, test_ds.labels),
        recall_at=recall,
        attack=attack.to_dict() if attack is not None else None,
    )
    report.validate()
    return report
