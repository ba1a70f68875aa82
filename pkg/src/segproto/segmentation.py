"""Over-segmentation of the overlap region.

The default path is Felzenszwalb-Huttenlocher on a kNN graph with
normal-difference edge weights; external masks (for instance from a 2D/3D
foundation model) can be loaded in place of it.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EmptyInputError, ParseError, PreconditionError
from .pointcloud import KnnGraph, PointCloud, knn_graph, pairwise_sqdist


@dataclass(frozen=True)
class SegmentMap:
    """Assignment of original ids to segments ``0..P-1``; ``ids`` sorted ascending."""

    ids: np.ndarray
    labels: np.ndarray
    num_segments: int

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_segments)

    def segment_of(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        pos = np.clip(np.searchsorted(self.ids, ids), 0, len(self.ids) - 1)
        bad = self.ids[pos] != ids
        if np.any(bad):
            raise KeyError(f"ids without a segment: {ids[bad][:10].tolist()}")
        return self.labels[pos]

    def as_dict(self) -> dict[int, int]:
        return dict(zip(self.ids.tolist(), self.labels.tolist()))

    def members(self) -> list[frozenset]:
        return [frozenset(self.ids[self.labels == s].tolist()) for s in range(self.num_segments)]


def edge_weights(normals: np.ndarray, graph: KnnGraph) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Directed graph edges (src, dst, w) with w = 1 - n_src . n_dst, clamped at 0."""
    m, ke = graph.neighbors.shape
    src = np.repeat(np.arange(m, dtype=np.int64), ke)
    dst = graph.neighbors.ravel()
    w = 1.0 - np.einsum("ij,ij->i", normals[src], normals[dst])
    return src, dst, np.maximum(w, 0.0)


def felzenszwalb(num_points: int, src, dst, w, threshold: float, min_size: int,
                 coords: np.ndarray | None = None) -> np.ndarray:
    """Component label (root index) per point.

    Edges are processed by ascending weight, ties by (src, dst).  After the
    main pass, components below ``min_size`` merge along their cheapest edge;
    any that remain (graph-disconnected) merge into the component holding the
    nearest outside point when ``coords`` is given.
    """
    order = np.lexsort((dst, src, w))
    src_l, dst_l, w_l = src[order].tolist(), dst[order].tolist(), w[order].tolist()
    parent = list(range(num_points))
    size = [1] * num_points
    internal = [0.0] * num_points

    def find(x):
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    def union(a, b, wt):
        if size[a] < size[b]:
            a, b = b, a
        parent[b] = a
        size[a] += size[b]
        internal[a] = wt

    for i, j, wt in zip(src_l, dst_l, w_l):
        a, b = find(i), find(j)
        if a == b:
            continue
        if wt <= min(internal[a] + threshold / size[a], internal[b] + threshold / size[b]):
            union(a, b, wt)

    for i, j, wt in zip(src_l, dst_l, w_l):
        a, b = find(i), find(j)
        if a != b and (size[a] < min_size or size[b] < min_size):
            union(a, b, max(internal[a], internal[b], wt))

    roots = np.array([find(i) for i in range(num_points)], dtype=np.int64)
    if coords is not None:
        while True:
            uniq, counts = np.unique(roots, return_counts=True)
            small = uniq[counts < min_size]
            if len(uniq) < 2 or len(small) == 0:
                break
            # smallest component first, ties toward the one holding the smaller index
            firsts = np.array([np.flatnonzero(roots == r)[0] for r in small])
            sizes = counts[counts < min_size]
            r = small[np.lexsort((firsts, sizes))[0]]
            inside = np.flatnonzero(roots == r)
            outside = np.flatnonzero(roots != r)
            d = pairwise_sqdist(coords[inside], coords[outside])
            target = roots[outside[np.unravel_index(np.argmin(d), d.shape)[1]]]
            roots[roots == r] = target
    return roots


def _relabel_by_first(roots: np.ndarray) -> np.ndarray:
    """Map arbitrary component keys to 0..P-1 in order of first occurrence."""
    _, first, inverse = np.unique(roots, return_index=True, return_inverse=True)
    rank = np.empty(len(first), dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(len(first))
    return rank[inverse.ravel()]


def graph_cut_segments(cloud: PointCloud, overlap_ids=None, graph: KnnGraph | None = None,
                       threshold: float = 0.1, min_segment_size: int = 20, k: int = 16) -> SegmentMap:
    """Segment the points of ``cloud`` whose ids are in ``overlap_ids`` (all points if None).

    A supplied ``graph`` must be built over the overlap points ordered by
    ascending original id; otherwise a kNN graph with ``k`` neighbours is
    built here.  Segments are numbered by their smallest original id.
    """
    if cloud.normals is None:
        raise PreconditionError("graph_cut_segments: cloud has no normals")
    ids = np.unique(cloud.ids if overlap_ids is None else np.asarray(overlap_ids, dtype=np.int64))
    if len(ids) == 0:
        raise EmptyInputError("graph_cut_segments: empty overlap")
    sub = cloud.subset(cloud.index_of(ids))
    if len(ids) == 1:
        return SegmentMap(ids, np.zeros(1, dtype=np.int64), 1)
    if graph is None:
        graph = knn_graph(sub, k)
    elif graph.num_points != len(ids):
        raise PreconditionError("graph_cut_segments: graph not restricted to the overlap points")
    src, dst, w = edge_weights(sub.normals, graph)
    roots = felzenszwalb(len(ids), src, dst, w, threshold, min_segment_size, coords=sub.coords)
    labels = _relabel_by_first(roots)
    return SegmentMap(ids, labels, int(labels.max()) + 1)


def load_external_segments(path, overlap_ids) -> SegmentMap:
    """Read ``original_id mask_id`` lines; mask ids are renumbered by first appearance."""
    path = Path(path)
    ids_l, masks_l = [], []
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) < 2:
            raise ParseError(f"{path}: line {lineno}: expected 'original_id mask_id', got {raw!r}")
        try:
            ids_l.append(int(parts[0]))
            masks_l.append(int(parts[1]))
        except ValueError:
            raise ParseError(f"{path}: line {lineno}: non-integer field in {raw!r}") from None
    if not ids_l:
        raise EmptyInputError(f"{path}: no segment assignments")
    file_ids = np.array(ids_l, dtype=np.int64)
    masks = np.array(masks_l, dtype=np.int64)
    want = np.unique(np.asarray(overlap_ids, dtype=np.int64))
    if len(want) == 0:
        raise EmptyInputError("load_external_segments: empty overlap")
    missing = np.setdiff1d(want, file_ids)
    if len(missing):
        raise PreconditionError(f"{path}: {len(missing)} overlap ids missing, e.g. {missing[:10].tolist()}")
    uniq, first = np.unique(file_ids, return_index=True)
    if len(uniq) != len(file_ids):
        raise ParseError(f"{path}: duplicate original ids")
    keep = np.isin(file_ids, want)
    seg = _relabel_by_first(masks[keep])
    kept_ids = file_ids[keep]
    order = np.argsort(kept_ids)
    return SegmentMap(kept_ids[order], seg[order], int(seg.max()) + 1)


def write_segments(path, segmap: SegmentMap) -> None:
    with open(path, "w") as f:
        for i, s in zip(segmap.ids.tolist(), segmap.labels.tolist()):
            f.write(f"{i} {s}\n")


def segment_purity(segmap: SegmentMap, cloud: PointCloud) -> float:
    """Fraction of points whose label is the majority label of their segment."""
    labels = cloud.labels[cloud.index_of(segmap.ids)]
    total = 0
    for s in range(segmap.num_segments):
        total += np.bincount(labels[segmap.labels == s]).max()
    return total / len(segmap.ids)
