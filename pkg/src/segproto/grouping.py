"""Segment grouping: pooled segment features softly assigned to prototypes.

The teacher's centred, sharpened assignment scores are distilled into the
student's, optionally weighting each segment by the entropy of its teacher
row; the teacher's row-argmax gives the group label of every segment.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError
from .segmentation import SegmentMap

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


@dataclass
class AssignmentScores:
    Q: ad.Tensor          # (P, n) student scores, differentiable
    K: np.ndarray         # (P, n) teacher scores, constant
    teacher_logits: np.ndarray  # (P, n) z_k S_teacher^T before centring
    tau_s: float
    tau_t: float


@dataclass
class GroupingResult:
    ids: np.ndarray             # original ids, ascending
    point_labels: np.ndarray    # prototype index per id
    segment_labels: np.ndarray  # prototype index per segment
    confidence: np.ndarray      # K[segment, label] per id
    entropy: np.ndarray         # per-segment entropy of K

    def label_of(self, ids) -> np.ndarray:
        pos = np.searchsorted(self.ids, np.asarray(ids, dtype=np.int64))
        return self.point_labels[pos]


def pool_segments(point_feats: ad.Tensor, segment_ids, num_segments: int) -> ad.Tensor:
    """Normalize points, average per segment, normalize again.

    Segments whose mean vanishes stay exact zero rows (listed in
    ``out.flags["zero_rows"]``).
    """
    segment_ids = np.asarray(segment_ids, dtype=np.int64)
    counts = np.bincount(segment_ids, minlength=num_segments)
    assert np.all(counts > 0), "every segment must contain at least one pooled point"
    unit = ad.l2_normalize_rows(point_feats)
    return ad.l2_normalize_rows(ad.segment_mean(unit, segment_ids, num_segments))


def normalize_rows(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=1, keepdims=True)
    return np.where(n > 0, x / np.where(n > 0, n, 1.0), 0.0)


def check_temperatures(tau_s: float, tau_t: float, sharpen: bool = True) -> None:
    if tau_s <= 0 or tau_t <= 0:
        raise ConfigError(f"temperatures must be > 0, got tau_s={tau_s}, tau_t={tau_t}")
    if sharpen and not tau_t < tau_s:
        raise ConfigError(f"sharpening requires tau_t < tau_s, got tau_t={tau_t}, tau_s={tau_s}")


def compute_assignments(z_q: ad.Tensor, z_k: np.ndarray, student_protos: ad.Tensor,
                        teacher_protos: np.ndarray, center: np.ndarray | None,
                        tau_s: float = 0.1, tau_t: float = 0.07, sharpen: bool = True) -> AssignmentScores:
    """Q = softmax(z_q S_s^T / tau_s); K = softmax((z_k S_t^T - c) / tau_t).

    Both prototype sets are row-normalized first.  ``center=None`` disables
    centring.  With ``sharpen=False`` the two temperatures may be equal.
    """
    check_temperatures(tau_s, tau_t, sharpen)
    if not sharpen and tau_t > tau_s:
        raise ConfigError(f"tau_t={tau_t} exceeds tau_s={tau_s}")
    s_student = ad.l2_normalize_rows(student_protos)
    Q = ad.softmax_rows(ad.matmul(z_q, ad.transpose(s_student)), tau_s)
    logits = np.asarray(z_k) @ normalize_rows(teacher_protos).T
    centred = logits if center is None else logits - center[None, :]
    K = ad.softmax_rows(ad.tensor(centred), tau_t).data
    return AssignmentScores(Q, K, logits, tau_s, tau_t)


def update_center(center: np.ndarray, z_k: np.ndarray, teacher_protos: np.ndarray, momentum: float) -> np.ndarray:
    """c <- m c + (1 - m) * mean over segments of z_k S_t^T."""
    if not 0.0 <= momentum < 1.0:
        raise ConfigError(f"center momentum must be in [0, 1), got {momentum}")
    batch_mean = (np.asarray(z_k) @ normalize_rows(teacher_protos).T).mean(axis=0)
    return momentum * center + (1.0 - momentum) * batch_mean


def row_entropy(K: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(K > 0, K * np.log(np.where(K > 0, K, 1.0)), 0.0)
    return -terms.sum(axis=1)


def grouping_loss(scores: AssignmentScores, informative_aware: bool = True) -> ad.Tensor:
    """Cross-entropy from teacher rows to student rows, averaged over segments.

    With ``informative_aware`` each segment is weighted by the entropy of its
    teacher row (weights normalized to sum to one).  If every teacher row is
    one-hot the plain average is used and ``flags["fallback"]`` is set.
    """
    K = scores.K
    P = K.shape[0]
    log_q = ad.log(ad.clamp_min(scores.Q, PROB_FLOOR))
    H = row_entropy(K)
    fallback = False
    weights = K / P
    if informative_aware:
        top = H.max()
        if top > 0:
            rel = H / top
            weights = (rel[:, None] * K) / rel.sum()
        else:
            fallback = True
            log.warning("grouping_loss: all teacher rows one-hot, using unweighted average")
    loss = ad.scalar_mul(ad.weighted_sum(log_q, weights), -1.0)
    loss.flags["entropy"] = H
    loss.flags["fallback"] = fallback
    return loss


def extract_groups(K: np.ndarray, segmap: SegmentMap) -> GroupingResult:
    """Row-argmax of K (first index on ties), projected onto every point."""
    seg_labels = np.argmax(K, axis=1)
    point_labels = seg_labels[segmap.labels]
    conf = K[segmap.labels, point_labels]
    return GroupingResult(segmap.ids.copy(), point_labels, seg_labels, conf, row_entropy(K))


def write_grouping(path, result: GroupingResult) -> None:
    with open(path, "w") as f:
        for i, lab, c in zip(result.ids.tolist(), result.point_labels.tolist(), result.confidence.tolist()):
            f.write(f"{i} {lab} {c!r}\n")


def read_grouping(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rows = [line.split() for line in open(path) if line.strip() and not line.startswith("#")]
    ids = np.array([int(r[0]) for r in rows], dtype=np.int64)
    labels = np.array([int(r[1]) for r in rows], dtype=np.int64)
    conf = np.array([float(r[2]) for r in rows])
    return ids, labels, conf
