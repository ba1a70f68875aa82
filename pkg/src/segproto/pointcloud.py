"""Point clouds: PLY I/O, synthetic labeled rooms, kNN graphs and PCA normals."""

from __future__ import annotations

import dataclasses
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import EmptyInputError, ParseError, PreconditionError


@dataclass(frozen=True)
class PointCloud:
    """Per-point arrays of one scene.

    ``coords`` (M, 3) in meters, ``colors`` (M, 3) in [0, 1], ``ids`` (M,)
    unique non-negative original-point identifiers.  ``normals`` and
    ``labels`` are optional.
    """

    coords: np.ndarray
    colors: np.ndarray
    ids: np.ndarray
    normals: np.ndarray | None = None
    labels: np.ndarray | None = None
    name: str = field(default="", compare=False)

    def __post_init__(self):
        m = len(self.coords)
        if m < 1:
            raise EmptyInputError("point cloud has no points")
        for nm in ("coords", "colors"):
            arr = getattr(self, nm)
            if arr.shape != (m, 3):
                raise ValueError(f"{nm} has shape {arr.shape}, expected ({m}, 3)")
        if self.ids.shape != (m,):
            raise ValueError(f"ids has shape {self.ids.shape}, expected ({m},)")
        if m > 1 and len(np.unique(self.ids)) != m:
            raise ValueError("ids are not unique")
        if self.normals is not None and self.normals.shape != (m, 3):
            raise ValueError(f"normals has shape {self.normals.shape}, expected ({m}, 3)")
        if self.labels is not None and self.labels.shape != (m,):
            raise ValueError(f"labels has shape {self.labels.shape}, expected ({m},)")

    def __len__(self) -> int:
        return len(self.coords)

    def subset(self, index) -> "PointCloud":
        index = np.asarray(index)
        return PointCloud(
            coords=self.coords[index],
            colors=self.colors[index],
            ids=self.ids[index],
            normals=None if self.normals is None else self.normals[index],
            labels=None if self.labels is None else self.labels[index],
            name=self.name,
        )

    def replace(self, **changes) -> "PointCloud":
        return dataclasses.replace(self, **changes)

    def index_of(self, ids) -> np.ndarray:
        """Row positions of the given original ids (all must be present)."""
        order = np.argsort(self.ids, kind="stable")
        ids = np.asarray(ids, dtype=np.int64)
        pos = np.searchsorted(self.ids[order], ids)
        pos = np.clip(pos, 0, len(order) - 1)
        found = order[pos]
        missing = self.ids[found] != ids
        if np.any(missing):
            raise KeyError(f"ids not in cloud: {ids[missing][:10].tolist()}")
        return found


def make_cloud(coords, colors=None, normals=None, labels=None, ids=None, name="") -> PointCloud:
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    m = len(coords)
    colors = np.full((m, 3), 0.5) if colors is None else np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    ids = np.arange(m, dtype=np.int64) if ids is None else np.asarray(ids, dtype=np.int64)
    if normals is not None:
        normals = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
    if labels is not None:
        labels = np.asarray(labels, dtype=np.int64)
    return PointCloud(coords, colors, ids, normals, labels, name)


# --------------------------------------------------------------------------
# PLY
# --------------------------------------------------------------------------

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


@dataclass
class _Element:
    name: str
    count: int
    props: list = field(default_factory=list)  # (name, dtype) or (name, ("list", count_t, item_t))


def _parse_header(f, path) -> tuple[str, list[_Element]]:
    first = f.readline()
    if first.strip() != b"ply":
        raise ParseError(f"{path}: line 1: expected 'ply', got {first.strip()[:40]!r}")
    fmt = None
    elements: list[_Element] = []
    lineno = 1
    while True:
        raw = f.readline()
        lineno += 1
        if not raw:
            raise ParseError(f"{path}: line {lineno}: unexpected end of header")
        line = raw.decode("ascii", errors="replace").strip()
        parts = line.split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        key = parts[0]
        if key == "end_header":
            break
        if key == "format" and len(parts) == 3:
            if parts[1] not in ("ascii", "binary_little_endian"):
                raise ParseError(f"{path}: line {lineno}: unsupported format {parts[1]!r}")
            fmt = parts[1]
        elif key == "element" and len(parts) == 3 and parts[2].isdigit():
            elements.append(_Element(parts[1], int(parts[2])))
        elif key == "property" and elements:
            if len(parts) == 3 and parts[1] in _PLY_TYPES:
                elements[-1].props.append((parts[2], _PLY_TYPES[parts[1]]))
            elif (len(parts) == 5 and parts[1] == "list"
                  and parts[2] in _PLY_TYPES and parts[3] in _PLY_TYPES):
                elements[-1].props.append((parts[4], ("list", _PLY_TYPES[parts[2]], _PLY_TYPES[parts[3]])))
            else:
                raise ParseError(f"{path}: line {lineno}: malformed property {line!r}")
        else:
            raise ParseError(f"{path}: line {lineno}: malformed header line {line!r}")
    if fmt is None:
        raise ParseError(f"{path}: line {lineno}: missing format line")
    return fmt, elements


def _skip_element_binary(f, el: _Element) -> None:
    if all(not isinstance(t, tuple) for _, t in el.props):
        f.seek(el.count * sum(np.dtype(t).itemsize for _, t in el.props), 1)
        return
    for _ in range(el.count):
        for _, t in el.props:
            if isinstance(t, tuple):
                n = int(np.frombuffer(f.read(np.dtype(t[1]).itemsize), "<" + t[1])[0])
                f.seek(n * np.dtype(t[2]).itemsize, 1)
            else:
                f.seek(np.dtype(t).itemsize, 1)


def read_ply(path) -> dict[str, np.ndarray]:
    """Read the vertex element of a PLY file as a name -> array mapping.

    Arrays keep the dtype declared in the header.
    """
    path = Path(path)
    with open(path, "rb") as f:
        fmt, elements = _parse_header(f, path)
        for el in elements:
            if el.name != "vertex":
                if fmt == "ascii":
                    for _ in range(el.count):
                        f.readline()
                else:
                    _skip_element_binary(f, el)
                continue
            if any(isinstance(t, tuple) for _, t in el.props):
                raise ParseError(f"{path}: list properties on vertex element are not supported")
            if el.count == 0:
                raise EmptyInputError(f"{path}: zero vertices")
            if fmt == "ascii":
                rows = []
                for i in range(el.count):
                    vals = f.readline().split()
                    if len(vals) < len(el.props):
                        raise ParseError(f"{path}: vertex {i}: expected {len(el.props)} values, got {len(vals)}")
                    rows.append(vals[: len(el.props)])
                table = np.array(rows, dtype=np.float64)
                return {name: table[:, j].astype(t) for j, (name, t) in enumerate(el.props)}
            dtype = np.dtype([(name, "<" + t) for name, t in el.props])
            buf = f.read(dtype.itemsize * el.count)
            if len(buf) != dtype.itemsize * el.count:
                raise ParseError(f"{path}: truncated vertex data")
            rec = np.frombuffer(buf, dtype=dtype)
            return {name: rec[name].copy() for name, _ in el.props}
    raise EmptyInputError(f"{path}: no vertex element")


def load_ply(path) -> PointCloud:
    props = read_ply(path)
    for axis in "xyz":
        if axis not in props:
            raise ParseError(f"{path}: vertex element lacks property {axis!r}")
    coords = np.stack([props["x"], props["y"], props["z"]], axis=1).astype(np.float64)
    m = len(coords)
    if all(c in props for c in ("red", "green", "blue")):
        colors = np.stack([props["red"], props["green"], props["blue"]], axis=1).astype(np.float64)
        if props["red"].dtype.kind in "iu":
            colors = colors / 255.0
    else:
        colors = np.full((m, 3), 0.5)
    normals = None
    if all(c in props for c in ("nx", "ny", "nz")):
        normals = np.stack([props["nx"], props["ny"], props["nz"]], axis=1).astype(np.float64)
        norms = np.linalg.norm(normals, axis=1, keepdims=True)
        normals = np.where(norms > 0, normals / np.where(norms > 0, norms, 1.0), np.array([0.0, 0.0, 1.0]))
    labels = props["label"].astype(np.int64) if "label" in props else None
    return PointCloud(coords, colors, np.arange(m, dtype=np.int64), normals, labels, Path(path).stem)


def write_ply(path, cloud: PointCloud, extra: dict[str, np.ndarray] | None = None,
              binary: bool = True) -> None:
    """Write a cloud as PLY; ``extra`` adds per-vertex double properties."""
    m = len(cloud)
    cols: list[tuple[str, str, np.ndarray]] = [
        ("x", "double", cloud.coords[:, 0]),
        ("y", "double", cloud.coords[:, 1]),
        ("z", "double", cloud.coords[:, 2]),
    ]
    rgb = np.clip(np.rint(cloud.colors * 255.0), 0, 255)
    cols += [(c, "uchar", rgb[:, j]) for j, c in enumerate(("red", "green", "blue"))]
    if cloud.normals is not None:
        cols += [(c, "double", cloud.normals[:, j]) for j, c in enumerate(("nx", "ny", "nz"))]
    if cloud.labels is not None:
        cols.append(("label", "int", cloud.labels))
    for name, values in (extra or {}).items():
        cols.append((name, "double", np.asarray(values, dtype=np.float64)))
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
              f"element vertex {m}"]
    header += [f"property {t} {n}" for n, t, _ in cols]
    header.append("end_header")
    rev = {"double": "f8", "uchar": "u1", "int": "i4"}
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            rec = np.empty(m, dtype=np.dtype([(n, "<" + rev[t]) for n, t, _ in cols]))
            for n, _, v in cols:
                rec[n] = v
            f.write(rec.tobytes())
        else:
            for i in range(m):
                vals = [repr(float(v[i])) if t == "double" else str(int(v[i])) for _, t, v in cols]
                f.write((" ".join(vals) + "\n").encode("ascii"))


# --------------------------------------------------------------------------
# Synthetic scenes
# --------------------------------------------------------------------------

PRIMITIVE_TYPES = ("floor", "wall", "box", "sphere")


@dataclass(frozen=True)
class Primitive:
    kind: str
    cls: int
    center: tuple[float, float, float]
    size: tuple[float, ...] = ()
    radius: float = 0.0
    normal: tuple[float, float, float] = (0.0, 0.0, 1.0)
    density: float = 100.0
    color: tuple[float, float, float] = (0.5, 0.5, 0.5)

    def faces(self) -> list[tuple[np.ndarray, np.ndarray, np.ndarray, float]]:
        """Planar faces as (origin corner, edge u, edge v, area); outward normal = u x v."""
        c = np.asarray(self.center, dtype=np.float64)
        if self.kind == "floor":
            sx, sy = self.size
            return [(c - [sx / 2, sy / 2, 0.0], np.array([sx, 0, 0.0]), np.array([0, sy, 0.0]), sx * sy)]
        if self.kind == "wall":
            w, h = self.size
            n = np.asarray(self.normal, dtype=np.float64)
            up = np.array([0.0, 0.0, h])
            along = np.cross(up, n)
            along = along / np.linalg.norm(along) * w
            return [(c - along / 2 - up / 2, along, up, w * h)]
        if self.kind == "box":
            sx, sy, sz = self.size
            lo = c - np.array([sx, sy, sz]) / 2
            ex, ey, ez = np.array([sx, 0, 0.0]), np.array([0, sy, 0.0]), np.array([0, 0, sz])
            return [
                (lo + ez, ex, ey, sx * sy),            # top, +z
                (lo, ez, ey, sy * sz),                 # -x side
                (lo + ex, ey, ez, sy * sz),            # +x side
                (lo, ex, ez, sx * sz),                 # -y side
                (lo + ey, ez, ex, sx * sz),            # +y side
            ]
        raise ValueError(f"{self.kind} has no planar faces")

    def area(self) -> float:
        if self.kind == "sphere":
            return 4.0 * math.pi * self.radius ** 2
        return float(sum(face[3] for face in self.faces()))


@dataclass(frozen=True)
class SceneRecipe:
    primitives: tuple[Primitive, ...]
    place_jitter: float = 0.0       # uniform xy offset for boxes/spheres, meters
    color_jitter: float = 0.0       # scene-level brightness factor range
    point_color_noise: float = 0.0  # per-point gaussian color noise
    coord_noise: float = 0.002
    random_colors: float = 0.0      # > 0: every primitive gets a uniform random colour per scene
    yaw: float = 0.0                # > 0: whole scene rotated about z by a uniform angle in [-yaw, yaw] * pi


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(","))


def parse_recipe(text: str, source: str = "<recipe>") -> SceneRecipe:
    """Parse the line-oriented recipe format.

    One primitive per line: ``<kind> key=value ...`` with kind in
    floor/wall/box/sphere; a ``set key=value ...`` line adjusts scene-level
    options.  ``#`` starts a comment.
    """
    prims: list[Primitive] = []
    opts: dict[str, float] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        kind, *pairs = line.split()
        try:
            kv = dict(p.split("=", 1) for p in pairs)
        except ValueError:
            raise ParseError(f"{source}: line {lineno}: expected key=value pairs: {raw!r}") from None
        try:
            if kind == "set":
                opts.update({k: float(v) for k, v in kv.items()})
                continue
            if kind not in PRIMITIVE_TYPES:
                raise ParseError(f"{source}: line {lineno}: unknown primitive {kind!r}")
            args = dict(kind=kind, cls=int(kv.pop("class")), center=_floats(kv.pop("center", "0,0,0")))
            if "size" in kv:
                args["size"] = _floats(kv.pop("size"))
            if "radius" in kv:
                args["radius"] = float(kv.pop("radius"))
            if "normal" in kv:
                args["normal"] = _floats(kv.pop("normal"))
            if "density" in kv:
                args["density"] = float(kv.pop("density"))
            if "color" in kv:
                args["color"] = _floats(kv.pop("color"))
            if kv:
                raise ParseError(f"{source}: line {lineno}: unknown keys {sorted(kv)}")
        except (KeyError, ValueError) as exc:
            if isinstance(exc, ParseError):
                raise
            raise ParseError(f"{source}: line {lineno}: {exc}") from None
        prims.append(Primitive(**args))
    known = {"place_jitter", "color_jitter", "point_color_noise", "coord_noise", "random_colors", "yaw"}
    if set(opts) - known:
        raise ParseError(f"{source}: unknown scene options {sorted(set(opts) - known)}")
    return SceneRecipe(tuple(prims), **opts)


def load_recipe(path) -> SceneRecipe:
    return parse_recipe(Path(path).read_text(), str(path))


DEFAULT_ROOM_RECIPE = """\
# class 0 floor, 1 wall, 2 box, 3 sphere
floor  class=0 size=3,3 center=0,0,0 density=40 color=0.62,0.52,0.40
wall   class=1 size=3,1.6 center=0,1.5,0.8 normal=0,-1,0 density=40 color=0.78,0.76,0.70
box    class=2 size=0.9,0.6,0.5 center=0.4,-0.2,0.25 density=110 color=0.35,0.22,0.12
sphere class=3 radius=0.25 center=-0.7,-0.6,0.25 density=180 color=0.20,0.45,0.75
set place_jitter=0.3 color_jitter=0.15 point_color_noise=0.03
"""


def default_room_recipe() -> SceneRecipe:
    return parse_recipe(DEFAULT_ROOM_RECIPE, "<default room>")


def generate_synthetic_scene(seed: int, recipe: SceneRecipe) -> PointCloud:
    """Sample a labeled cloud on the recipe's primitive surfaces.

    Each primitive contributes ``round(area * density)`` points (per face for
    boxes), uniform on its surface, with analytic outward normals.
    """
    if not recipe.primitives:
        raise EmptyInputError("scene recipe has no primitives")
    rng = np.random.default_rng(seed)
    brightness = 1.0 + (rng.uniform(-recipe.color_jitter, recipe.color_jitter) if recipe.color_jitter else 0.0)
    coords, normals, colors, labels = [], [], [], []
    for prim in recipe.primitives:
        if recipe.place_jitter and prim.kind in ("box", "sphere"):
            dx, dy = rng.uniform(-recipe.place_jitter, recipe.place_jitter, size=2)
            prim = dataclasses.replace(prim, center=(prim.center[0] + dx, prim.center[1] + dy, prim.center[2]))
        if prim.kind == "sphere":
            n = int(round(prim.area() * prim.density))
            d = rng.standard_normal((n, 3))
            d /= np.linalg.norm(d, axis=1, keepdims=True)
            pts, nrm = np.asarray(prim.center) + prim.radius * d, d
        else:
            pts_l, nrm_l = [], []
            for origin, u, v, area in prim.faces():
                n = int(round(area * prim.density))
                st = rng.random((n, 2))
                pts_l.append(origin + st[:, :1] * u + st[:, 1:] * v)
                nv = np.cross(u, v)
                nrm_l.append(np.tile(nv / np.linalg.norm(nv), (n, 1)))
            pts, nrm = np.concatenate(pts_l), np.concatenate(nrm_l)
        coords.append(pts)
        normals.append(nrm)
        color = rng.uniform(0.1, 0.9, size=3) if recipe.random_colors else np.asarray(prim.color)
        base = np.clip(color * brightness, 0.0, 1.0)
        colors.append(np.tile(base, (len(pts), 1)))
        labels.append(np.full(len(pts), prim.cls, dtype=np.int64))
    coords = np.concatenate(coords)
    m = len(coords)
    if m == 0:
        raise EmptyInputError("scene recipe produced no points")
    coords = coords + rng.normal(0.0, recipe.coord_noise, size=coords.shape)
    normals = np.concatenate(normals)
    if recipe.yaw:
        a = rng.uniform(-recipe.yaw, recipe.yaw) * math.pi
        rot = np.array([[math.cos(a), -math.sin(a), 0.0], [math.sin(a), math.cos(a), 0.0], [0.0, 0.0, 1.0]])
        coords, normals = coords @ rot.T, normals @ rot.T
    colors = np.concatenate(colors)
    if recipe.point_color_noise:
        colors = np.clip(colors + rng.normal(0.0, recipe.point_color_noise, size=colors.shape), 0.0, 1.0)
    return PointCloud(coords, colors, np.arange(m, dtype=np.int64), normals,
                      np.concatenate(labels), f"scene_{seed}")


# --------------------------------------------------------------------------
# kNN graph and normals
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class KnnGraph:
    """Exact kNN graph; row i of ``neighbors``/``sqdist`` lists i's targets nearest first."""

    k: int
    neighbors: np.ndarray  # (M, k_eff) int64
    sqdist: np.ndarray     # (M, k_eff) float64

    @property
    def num_points(self) -> int:
        return len(self.neighbors)

    @property
    def edges(self) -> list[tuple[int, int, float]]:
        m, ke = self.neighbors.shape
        src = np.repeat(np.arange(m), ke)
        return list(zip(src.tolist(), self.neighbors.ravel().tolist(), self.sqdist.ravel().tolist()))


def pairwise_sqdist(a: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    b = a if b is None else b
    d = np.zeros((len(a), len(b)))
    for j in range(a.shape[1]):
        diff = a[:, j, None] - b[None, :, j]
        d += diff * diff
    return d


def knn_graph(cloud: PointCloud | np.ndarray, k: int) -> KnnGraph:
    """Brute-force kNN; ties broken toward the smaller point index."""
    coords = cloud.coords if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    m = len(coords)
    if m < 2:
        raise EmptyInputError(f"knn_graph needs at least 2 points, got {m}")
    if k < 1:
        raise PreconditionError(f"knn_graph: k must be >= 1, got {k}")
    ke = min(k, m - 1)
    d = pairwise_sqdist(coords)
    np.fill_diagonal(d, np.inf)
    if ke == m - 1:
        nbr = np.argsort(d, axis=1, kind="stable")[:, :ke]
    else:
        kth = np.partition(d, ke - 1, axis=1)[:, ke - 1]
        mask = d <= kth[:, None]
        counts = mask.sum(axis=1)
        nbr = np.empty((m, ke), dtype=np.int64)
        clean = counts == ke
        if np.any(clean):
            rows, cols = np.nonzero(mask[clean])
            cand = cols.reshape(-1, ke)  # ascending index within each row
            dc = np.take_along_axis(d[clean], cand, axis=1)
            nbr[clean] = np.take_along_axis(cand, np.argsort(dc, axis=1, kind="stable"), axis=1)
        for i in np.flatnonzero(~clean):
            nbr[i] = np.argsort(d[i], kind="stable")[:ke]
    nbr = nbr.astype(np.int64)
    return KnnGraph(k, nbr, np.take_along_axis(d, nbr, axis=1))


def _sign_convention(n: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Flip rows so z >= 0 (ties on z: y >= 0, then x >= 0)."""
    n = n.copy()
    flip = np.zeros(len(n), dtype=bool)
    undecided = np.ones(len(n), dtype=bool)
    for axis in (2, 1, 0):
        comp = n[:, axis]
        decided = undecided & (np.abs(comp) > tol)
        flip |= decided & (comp < 0)
        undecided &= ~decided
    n[flip] *= -1.0
    return n


def estimate_normals(cloud: PointCloud, graph: KnnGraph, return_flags: bool = False):
    """PCA normals over each point and its graph neighbors.

    Degenerate neighborhoods (covariance rank < 2) get (0, 0, 1) and are
    flagged; with ``return_flags`` the flag array is returned alongside.
    """
    if graph.num_points != len(cloud):
        raise PreconditionError("estimate_normals: graph built over a different cloud")
    if graph.neighbors.shape[1] < 2 and len(cloud) > 2:
        raise PreconditionError("estimate_normals: need k >= 3")
    idx = np.concatenate([np.arange(len(cloud))[:, None], graph.neighbors], axis=1)
    nb = cloud.coords[idx]
    nb = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("mki,mkj->mij", nb, nb) / idx.shape[1]
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0]
    scale = np.maximum(evals[:, 2], sys.float_info.min)
    degenerate = (evals[:, 2] <= 0) | (evals[:, 1] <= 1e-10 * scale)
    normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    normals = _sign_convention(normals)
    normals[degenerate] = (0.0, 0.0, 1.0)
    out = cloud.replace(normals=normals)
    return (out, degenerate) if return_flags else out


def iter_ply_files(directory) -> Iterable[Path]:
    return sorted(Path(directory).glob("*.ply"))
