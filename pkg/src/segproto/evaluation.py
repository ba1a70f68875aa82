"""Evaluation of a trained state: grouping metrics, activation maps, linear probe."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, PreconditionError
from .grouping import GroupingResult, compute_assignments, extract_groups, pool_segments, row_entropy
from .networks import EncoderConfig, ModelState, as_tensors, encode, init_state
from .pointcloud import PointCloud, estimate_normals, knn_graph
from .segmentation import SegmentMap, graph_cut_segments


@dataclass(frozen=True)
class GroupingMetrics:
    purity: float
    nmi: float
    usage_entropy: float
    cluster_count: int


def _entropy_of_counts(counts: np.ndarray) -> float:
    counts = counts[counts > 0].astype(np.float64)
    if counts.sum() == 0:
        return 0.0
    p = counts / counts.sum()
    return float(-(p * np.log(p)).sum())


def usage_entropy(labels) -> float:
    """Entropy (nats) of the histogram of assigned prototypes."""
    return _entropy_of_counts(np.unique(np.asarray(labels), return_counts=True)[1])


def _align(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(pred, dict) or isinstance(truth, dict):
        if not (isinstance(pred, dict) and isinstance(truth, dict)):
            raise ConfigError("grouping_metrics: pass two arrays or two id->label mappings")
        extra = sorted(set(pred) ^ set(truth))
        if extra:
            raise PreconditionError(f"id sets differ in {len(extra)} ids, e.g. {extra[:10]}")
        keys = sorted(pred)
        return np.array([pred[k] for k in keys]), np.array([truth[k] for k in keys])
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise PreconditionError(f"label arrays differ in length: {pred.shape} vs {truth.shape}")
    return pred, truth


def grouping_metrics(pred, truth) -> GroupingMetrics:
    """Purity, NMI (arithmetic-mean normalization), usage entropy and nonempty group count.

    Inputs are aligned label arrays or two ``id -> label`` mappings over the
    same ids.
    """
    pred, truth = _align(pred, truth)
    if pred.size == 0:
        raise PreconditionError("grouping_metrics: no labels")
    _, pi = np.unique(pred, return_inverse=True)
    _, ti = np.unique(truth, return_inverse=True)
    table = np.zeros((pi.max() + 1, ti.max() + 1))
    np.add.at(table, (pi.ravel(), ti.ravel()), 1.0)
    n = table.sum()
    purity = table.max(axis=1).sum() / n
    h_pred = _entropy_of_counts(table.sum(axis=1))
    h_true = _entropy_of_counts(table.sum(axis=0))
    joint = table[table > 0] / n
    outer = np.outer(table.sum(axis=1), table.sum(axis=0))[table > 0] / n ** 2
    mi = float((joint * np.log(joint / outer)).sum())
    denom = 0.5 * (h_pred + h_true)
    if denom == 0:
        nmi = 1.0
    else:
        nmi = float(np.clip(mi / denom, 0.0, 1.0))
    return GroupingMetrics(float(purity), nmi, h_pred, int(table.shape[0]))


def _ensure_normals(cloud: PointCloud, k: int = 16) -> PointCloud:
    if cloud.normals is not None:
        return cloud
    return estimate_normals(cloud, knn_graph(cloud, k))


def teacher_features(state: ModelState, cfg: EncoderConfig, cloud: PointCloud, branches=("g", "h")):
    return encode(cloud, as_tensors(state.teacher, trainable=False), cfg, branches=branches)


def group_cloud(state: ModelState, train_cfg, cloud: PointCloud,
                segmap: SegmentMap | None = None) -> tuple[GroupingResult, SegmentMap]:
    """Teacher grouping of a whole cloud (segments, pooled g features, centred assignments)."""
    cloud = _ensure_normals(cloud, train_cfg.segmentation.k)
    scfg, gcfg = train_cfg.segmentation, train_cfg.grouping
    if segmap is None:
        segmap = graph_cut_segments(cloud, threshold=scfg.threshold,
                                    min_segment_size=scfg.min_segment_size, k=scfg.k)
    feats = teacher_features(state, train_cfg.network, cloud, branches=("g",))["g"]
    rows = cloud.index_of(segmap.ids)
    z = pool_segments(ad.gather_rows(feats, rows), segmap.labels, segmap.num_segments).data
    scores = compute_assignments(ad.tensor(z), z, ad.tensor(state.teacher["prototypes"]),
                                 state.teacher["prototypes"],
                                 state.center if gcfg.centering else None,
                                 gcfg.tau_s, gcfg.teacher_temp, sharpen=gcfg.sharpening)
    return extract_groups(scores.K, segmap), segmap


@dataclass(frozen=True)
class ActivationMap:
    query_id: int
    ids: np.ndarray
    similarities: np.ndarray
    degenerate: bool


def activation_map(state: ModelState, cfg: EncoderConfig, cloud: PointCloud, query_id: int,
                   branch: str = "g") -> ActivationMap:
    """Cosine similarity of every point's teacher feature to the query point's."""
    if branch not in ("g", "h", "trunk"):
        raise ConfigError(f"unknown branch {branch!r}")
    hit = np.flatnonzero(cloud.ids == query_id)
    if len(hit) == 0:
        raise KeyError(f"query id {query_id} not in cloud")
    out = teacher_features(state, cfg, cloud, branches=(branch,) if branch != "trunk" else ())
    unit = ad.l2_normalize_rows(out[branch])
    sims = unit.data @ unit.data[hit[0]]
    degenerate = len(unit.flags["zero_rows"]) == len(cloud)
    return ActivationMap(int(query_id), cloud.ids.copy(), np.clip(sims, -1.0, 1.0), bool(degenerate))


# --------------------------------------------------------------------------
# Linear probe
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ProbeResult:
    per_class: dict[int, float]
    mean_accuracy: float
    overall_accuracy: float
    missing_classes: tuple[int, ...]


def trunk_features(state: ModelState, cfg: EncoderConfig, cloud: PointCloud) -> np.ndarray:
    return teacher_features(state, cfg, _ensure_normals(cloud), branches=())["trunk"].data


def fit_softmax_regression(x: np.ndarray, y: np.ndarray, num_classes: int, iters: int = 500,
                           lr: float = 0.5, l2: float = 1e-4) -> tuple[np.ndarray, np.ndarray]:
    """Multinomial logistic regression by full-batch gradient descent from zero weights."""
    w = np.zeros((x.shape[1], num_classes))
    b = np.zeros(num_classes)
    onehot = np.eye(num_classes)[y]
    n = len(x)
    for _ in range(iters):
        logits = x @ w + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - onehot) / n
        w -= lr * (x.T @ g + l2 * w)
        b -= lr * g.sum(axis=0)
    return w, b


def probe_features(features: np.ndarray, labels: np.ndarray, test_features: np.ndarray,
                   test_labels: np.ndarray, iters: int = 500, lr: float = 0.5) -> ProbeResult:
    mu = features.mean(axis=0)
    sd = features.std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    xtr, xte = (features - mu) / sd, (test_features - mu) / sd
    classes = np.unique(np.concatenate([labels, test_labels]))
    num_classes = int(classes.max()) + 1
    w, b = fit_softmax_regression(xtr, labels, num_classes, iters, lr)
    pred = np.argmax(xte @ w + b, axis=1)
    present = set(np.unique(labels).tolist())
    per_class, missing = {}, []
    for c in np.unique(test_labels).tolist():
        if c not in present:
            missing.append(c)
            continue
        mask = test_labels == c
        per_class[c] = float((pred[mask] == c).mean())
    mean_acc = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return ProbeResult(per_class, mean_acc, float((pred == test_labels).mean()), tuple(missing))


def linear_probe(state: ModelState, cfg: EncoderConfig, train_scenes: list[PointCloud],
                 test_scenes: list[PointCloud], iters: int = 500, lr: float = 0.5) -> ProbeResult:
    """Frozen teacher-trunk features, softmax regression, per-class test accuracy."""
    for c in (*train_scenes, *test_scenes):
        if c.labels is None:
            raise PreconditionError(f"linear_probe: scene {c.name!r} has no labels")
    xtr = np.concatenate([trunk_features(state, cfg, c) for c in train_scenes])
    ytr = np.concatenate([c.labels for c in train_scenes])
    xte = np.concatenate([trunk_features(state, cfg, c) for c in test_scenes])
    yte = np.concatenate([c.labels for c in test_scenes])
    return probe_features(xtr, ytr, xte, yte, iters, lr)


def random_init_state(cfg: EncoderConfig, seed) -> ModelState:
    return init_state(cfg, seed)


def collapse_summary(results: list[GroupingResult], num_prototypes: int) -> dict[str, float]:
    """Prototype usage over a set of grouped scenes plus mean assignment entropy."""
    labels = np.concatenate([r.point_labels for r in results])
    counts = np.bincount(labels, minlength=num_prototypes)
    ent = np.concatenate([r.entropy for r in results])
    return {
        "usage_entropy": _entropy_of_counts(counts),
        "max_usage_entropy": float(np.log(num_prototypes)),
        "active_prototypes": int((counts > 0).sum()),
        "mean_assignment_entropy": float(ent.mean()),
        "mean_confidence": float(np.concatenate([r.confidence for r in results]).mean()),
    }
