"""Point sampling, positive-pair strategies and the confidence-weighted InfoNCE loss."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .augment import ViewPair
from .errors import ConfigError, PreconditionError
from .grouping import GroupingResult
from .pointcloud import PointCloud
from .segmentation import SegmentMap

log = logging.getLogger(__name__)

STRATEGIES = ("matched_points", "spatial_grid", "geometry_segment", "segment_grouping")


@dataclass(frozen=True)
class Samples:
    """Sampled rows of each view (``idx_*``) and their original ids."""

    idx_q: np.ndarray
    idx_k: np.ndarray
    ids_q: np.ndarray
    ids_k: np.ndarray
    with_replacement: bool = False


@dataclass(frozen=True)
class PairSet:
    strategy: str
    samples: Samples
    positive: np.ndarray    # (N, N) bool, [i, j]: q-sample i with k-sample j
    confidence: np.ndarray  # (N, N) float, zero off the positive set

    @property
    def positives(self) -> list[tuple[int, int]]:
        return list(zip(*(a.tolist() for a in np.nonzero(self.positive))))

    @property
    def num_positives(self) -> int:
        return int(self.positive.sum())

    def mean_confidence(self) -> float:
        n = self.num_positives
        return float(self.confidence[self.positive].mean()) if n else 0.0


def sample_points(pair: ViewPair, n: int, seed, strategy: str = "segment_grouping") -> Samples:
    """Draw ``n`` overlap points per view; sampling falls back to replacement when the overlap is short.

    ``matched_points`` draws ``n`` correspondence pairs jointly; the other
    strategies draw the two views independently.
    """
    corr = pair.correspondence
    if len(corr) == 0:
        raise PreconditionError("sample_points: empty overlap")
    if n < 1:
        raise ConfigError(f"sample_points: n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    replace = len(corr) < n
    if replace:
        log.info("sample_points: overlap %d < %d, sampling with replacement", len(corr), n)
    if strategy == "matched_points":
        sel = rng.choice(len(corr), size=n, replace=replace)
        iq, ik = corr[sel, 0], corr[sel, 1]
    else:
        iq = rng.choice(pair.overlap_q, size=n, replace=replace)
        ik = rng.choice(pair.overlap_k, size=n, replace=replace)
    return Samples(iq, ik, pair.view_q.ids[iq], pair.view_k.ids[ik], replace)


def grid_cells(coords: np.ndarray, grid_size: float) -> np.ndarray:
    cells = np.floor(coords[:, :2] / grid_size).astype(np.int64)
    return cells[:, 0] * 1_000_003 + cells[:, 1]


def build_pairs(strategy: str, samples: Samples, *, grouping: GroupingResult | None = None,
                segmap: SegmentMap | None = None, K: np.ndarray | None = None,
                grid_size: float = 1.0, reference: PointCloud | None = None,
                use_confidence: bool = True) -> PairSet:
    """Positive pairs between the q and k samples under one strategy.

    ``spatial_grid`` bins xy of the untransformed ``reference`` cloud into
    ``grid_size`` cells.  Only ``segment_grouping`` produces confidences
    below one: the product of both endpoints' teacher scores for the shared
    group.
    """
    ids_q, ids_k = samples.ids_q, samples.ids_k
    conf = None
    if strategy == "matched_points":
        pos = ids_q[:, None] == ids_k[None, :]
    elif strategy == "spatial_grid":
        if reference is None or grid_size <= 0:
            raise ConfigError("spatial_grid needs a reference cloud and grid_size > 0")
        cq = grid_cells(reference.coords[reference.index_of(ids_q)], grid_size)
        ck = grid_cells(reference.coords[reference.index_of(ids_k)], grid_size)
        pos = cq[:, None] == ck[None, :]
    elif strategy == "geometry_segment":
        if segmap is None:
            raise ConfigError("geometry_segment needs a segment map")
        pos = segmap.segment_of(ids_q)[:, None] == segmap.segment_of(ids_k)[None, :]
    elif strategy == "segment_grouping":
        if grouping is None or segmap is None or K is None:
            raise ConfigError("segment_grouping needs grouping, segment map and teacher scores")
        lq, lk = grouping.label_of(ids_q), grouping.label_of(ids_k)
        pos = lq[:, None] == lk[None, :]
        if use_confidence:
            kq = K[segmap.segment_of(ids_q), lq]       # K[s_i, label_i]
            kk = K[segmap.segment_of(ids_k)][:, lq]    # K[s_j, label_i], (N_k, N_q)
            conf = np.where(pos, kq[:, None] * kk.T, 0.0)
    else:
        raise ConfigError(f"unknown positive-pair strategy {strategy!r}; choose from {STRATEGIES}")
    if conf is None:
        conf = pos.astype(np.float64)
    return PairSet(strategy, samples, pos, conf)


def contrastive_loss(v_q: ad.Tensor, v_k, pairs: PairSet, tau: float = 0.4) -> ad.Tensor:
    """Confidence-weighted InfoNCE averaged over the positive set.

    For a positive (i, j) the denominator holds exp(s_ij) plus every k-sample
    that is not positive with anchor i.  Logits are shifted by a constant row
    max; ``v_k`` is treated as a constant.
    """
    if tau <= 0:
        raise ConfigError(f"contrastive temperature must be > 0, got {tau}")
    v_k = v_k.data if isinstance(v_k, ad.Tensor) else np.asarray(v_k, dtype=np.float64)
    n_pos = pairs.num_positives
    if n_pos == 0:
        log.warning("contrastive_loss: no positive pairs in batch, loss set to zero")
        out = ad.tensor(0.0)
        out.flags["degenerate"] = True
        return out
    logits = ad.scalar_mul(ad.matmul(v_q, ad.tensor(v_k.T)), 1.0 / tau)
    shift = logits.data.max(axis=1, keepdims=True)
    shifted = ad.sub(logits, ad.tensor(np.broadcast_to(shift, logits.shape).copy()))
    e = ad.exp(shifted)
    neg_mask = (~pairs.positive).astype(np.float64)
    neg_sum = ad.sum(ad.mul(e, ad.tensor(neg_mask)), axis=1)                    # (N, 1)
    neg_full = ad.matmul(neg_sum, ad.tensor(np.ones((1, logits.shape[1]))))    # broadcast across columns
    log_ratio = ad.sub(shifted, ad.log(ad.add(e, neg_full)))
    weights = np.where(pairs.positive, pairs.confidence, 0.0) / n_pos
    out = ad.scalar_mul(ad.weighted_sum(log_ratio, weights), -1.0)
    out.flags["degenerate"] = False
    return out
