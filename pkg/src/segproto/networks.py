"""Student/teacher networks: point encoder, projectors, predictor, prototypes.

The encoder is a small point MLP that mixes each point's hidden state with
the mean of its k nearest neighbours between layers.  Parameters live in
plain ``name -> ndarray`` dicts; :func:`encode` lifts them into autodiff
tensors on demand, so the same code serves the trainable student and the
gradient-free EMA teacher.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DimensionError, EmptyInputError, ParseError
from .pointcloud import KnnGraph, PointCloud, knn_graph

INPUT_DIM = 9  # centred xyz, rgb, normal


@dataclass(frozen=True)
class EncoderConfig:
    width1: int = 32
    width2: int = 64
    feature_dim: int = 32
    k: int = 8
    num_prototypes: int = 32
    predictor: bool = True
    center_colors: bool = False
    center_trunk: bool = True      # subtract the per-cloud mean of the trunk output before the heads
    center_heads: bool = False     # same for the hidden pre-activations and outputs of every head

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(w for w in (self.width1, self.width2) if w > 0)

    def validate(self) -> None:
        if self.feature_dim < 2:
            raise ConfigError(f"network.feature_dim must be >= 2, got {self.feature_dim}")
        if self.width1 <= 0 or self.width2 < 0:
            raise ConfigError("network widths must be positive")
        if self.k < 1:
            raise ConfigError("network.k must be >= 1")
        if self.num_prototypes < 2:
            raise ConfigError("network.num_prototypes must be >= 2")


def _mlp2_shapes(prefix: str, d_in: int, d_hidden: int, d_out: int) -> list[tuple[str, tuple[int, ...]]]:
    return [(f"{prefix}.W1", (d_in, d_hidden)), (f"{prefix}.b1", (d_hidden,)),
            (f"{prefix}.W2", (d_hidden, d_out)), (f"{prefix}.b2", (d_out,))]


def parameter_shapes(cfg: EncoderConfig, student: bool = True) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, shape) list; the order fixes initialization draws."""
    shapes: list[tuple[str, tuple[int, ...]]] = []
    widths = cfg.widths
    shapes += [("enc.W0", (INPUT_DIM, widths[0])), ("enc.b0", (widths[0],))]
    for i in range(1, len(widths)):
        shapes += [(f"enc.W{i}", (widths[i - 1], widths[i])), (f"enc.U{i}", (widths[i - 1], widths[i])),
                   (f"enc.b{i}", (widths[i],))]
    d = cfg.feature_dim
    shapes += [("enc.Wout", (widths[-1], d)), ("enc.Uout", (widths[-1], d)), ("enc.bout", (d,))]
    shapes += _mlp2_shapes("g", d, d, d)
    shapes += _mlp2_shapes("h", d, d, d)
    if student and cfg.predictor:
        shapes += _mlp2_shapes("pred", d, d, d)
    shapes.append(("prototypes", (cfg.num_prototypes, d)))
    return shapes


def init_prototypes(n: int, dim: int, seed) -> np.ndarray:
    """Rows i.i.d. standard normal, then unit-normalized."""
    if n < 2 or dim < 2:
        raise ConfigError(f"init_prototypes needs n >= 2 and dim >= 2, got n={n}, dim={dim}")
    s = np.random.default_rng(seed).standard_normal((n, dim))
    return s / np.linalg.norm(s, axis=1, keepdims=True)


def init_student(cfg: EncoderConfig, seed) -> dict[str, np.ndarray]:
    """He-normal weights, zero biases, random unit prototypes."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(cfg):
        if name == "prototypes":
            params[name] = init_prototypes(shape[0], shape[1], rng.integers(2**63))
        elif len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.normal(0.0, np.sqrt(2.0 / shape[0]), size=shape)
    return params


def teacher_keys(student: dict[str, np.ndarray]) -> list[str]:
    return [k for k in student if not k.startswith("pred.")]


@dataclass
class ModelState:
    student: dict[str, np.ndarray]
    teacher: dict[str, np.ndarray]
    center: np.ndarray
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def copy(self) -> "ModelState":
        return ModelState({k: v.copy() for k, v in self.student.items()},
                          {k: v.copy() for k, v in self.teacher.items()},
                          self.center.copy(),
                          {k: v.copy() for k, v in self.velocity.items()},
                          self.step)


def init_state(cfg: EncoderConfig, seed) -> ModelState:
    student = init_student(cfg, seed)
    teacher = {k: student[k].copy() for k in teacher_keys(student)}
    return ModelState(student, teacher, np.zeros(cfg.num_prototypes))


def ema_update(state: ModelState, momentum: float) -> ModelState:
    """teacher <- m * teacher + (1 - m) * student, predictor excluded, centre untouched."""
    if not 0.0 <= momentum <= 1.0:
        raise ConfigError(f"EMA momentum must be in [0, 1], got {momentum}")
    teacher = {k: momentum * v + (1.0 - momentum) * state.student[k] for k, v in state.teacher.items()}
    return ModelState(state.student, teacher, state.center, state.velocity, state.step)


# --------------------------------------------------------------------------
# Forward pass
# --------------------------------------------------------------------------

def input_features(cloud: PointCloud, cfg: EncoderConfig) -> np.ndarray:
    xyz = cloud.coords - cloud.coords.mean(axis=0)
    rgb = cloud.colors - 0.5 if cfg.center_colors else cloud.colors
    nrm = cloud.normals if cloud.normals is not None else np.zeros((len(cloud), 3))
    return np.concatenate([xyz, rgb, nrm], axis=1)


def as_tensors(params: dict[str, np.ndarray], trainable: bool) -> dict[str, ad.Tensor]:
    make = ad.parameter if trainable else ad.tensor
    return {k: make(v) for k, v in params.items()}


def _neighbor_mean(x: ad.Tensor, graph: KnnGraph | None) -> ad.Tensor:
    if graph is None:
        return ad.tensor(np.zeros(x.shape))
    m, ke = graph.neighbors.shape
    rows = ad.gather_rows(x, graph.neighbors.ravel())
    return ad.segment_mean(rows, np.repeat(np.arange(m), ke), m)


def _center_rows(x: ad.Tensor) -> ad.Tensor:
    mean = ad.matmul(ad.tensor(np.full((1, x.shape[0]), 1.0 / x.shape[0])), x)
    return ad.sub(x, mean)


def _mlp2(x: ad.Tensor, p: dict[str, ad.Tensor], prefix: str, center: bool = False) -> ad.Tensor:
    pre = ad.add(ad.matmul(x, p[f"{prefix}.W1"]), p[f"{prefix}.b1"])
    hidden = ad.relu(_center_rows(pre) if center else pre)
    out = ad.add(ad.matmul(hidden, p[f"{prefix}.W2"]), p[f"{prefix}.b2"])
    return _center_rows(out) if center else out


def encode(cloud: PointCloud, params: dict[str, ad.Tensor], cfg: EncoderConfig,
           graph: KnnGraph | None = None, branches=("g", "h")) -> dict[str, ad.Tensor]:
    """Per-point outputs of the trunk and the requested heads.

    Returns a dict with ``"trunk"`` plus any of ``"g"``, ``"h"`` and
    ``"pred"`` (predictor applied after ``h``; skipped when the parameter set
    has no predictor).
    """
    if len(cloud) == 0:
        raise EmptyInputError("encode: empty point set")
    if params["enc.W0"].shape[0] != INPUT_DIM:
        raise DimensionError(f"encode: enc.W0 expects {params['enc.W0'].shape[0]} inputs, have {INPUT_DIM}")
    if graph is None and len(cloud) >= 2:
        graph = knn_graph(cloud, cfg.k)
    x = ad.tensor(input_features(cloud, cfg))
    h = ad.relu(ad.add(ad.matmul(x, params["enc.W0"]), params["enc.b0"]))
    for i in range(1, len(cfg.widths)):
        agg = _neighbor_mean(h, graph)
        pre = ad.add(ad.add(ad.matmul(h, params[f"enc.W{i}"]), ad.matmul(agg, params[f"enc.U{i}"])),
                     params[f"enc.b{i}"])
        h = ad.relu(pre)
    agg = _neighbor_mean(h, graph)
    trunk = ad.add(ad.add(ad.matmul(h, params["enc.Wout"]), ad.matmul(agg, params["enc.Uout"])),
                   params["enc.bout"])
    out = {"trunk": trunk}
    if cfg.center_trunk:
        trunk = _center_rows(trunk)
    if "g" in branches:
        out["g"] = _mlp2(trunk, params, "g", cfg.center_heads)
    if "h" in branches or "pred" in branches:
        out["h"] = _mlp2(trunk, params, "h", cfg.center_heads)
        if "pred" in branches and "pred.W1" in params:
            out["pred"] = _mlp2(out["h"], params, "pred", cfg.center_heads)
    return out


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------
# Layout (little-endian):
#   8s  magic b"SGPCKPT\0"
#   u32 version
#   u32 config length, then UTF-8 key-value config text
#   u64 step
#   u32 array count, then per array:
#       u16 name length, name (UTF-8), u8 ndim, ndim x u32 dims, float64 data (C order)
# Array names: "student/<p>", "teacher/<p>", "velocity/<p>", "center".

MAGIC = b"SGPCKPT\0"
VERSION = 1


def save_checkpoint(path, state: ModelState, config_text: str = "") -> None:
    arrays = [(f"student/{k}", v) for k, v in state.student.items()]
    arrays += [(f"teacher/{k}", v) for k, v in state.teacher.items()]
    arrays += [(f"velocity/{k}", v) for k, v in state.velocity.items()]
    arrays.append(("center", state.center))
    cfg_bytes = config_text.encode("utf-8")
    chunks = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(cfg_bytes)), cfg_bytes,
              struct.pack("<Q", state.step), struct.pack("<I", len(arrays))]
    for name, arr in arrays:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        nb = name.encode("utf-8")
        chunks += [struct.pack("<H", len(nb)), nb, struct.pack("<B", arr.ndim),
                   struct.pack(f"<{arr.ndim}I", *arr.shape), arr.tobytes()]
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> tuple[ModelState, str]:
    """Return the stored state and the echoed config text."""
    try:
        return _parse_checkpoint(Path(path).read_bytes(), path)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, ParseError):
            raise
        raise ParseError(f"{path}: truncated or corrupt checkpoint ({exc})") from None


def _parse_checkpoint(data: bytes, path) -> tuple[ModelState, str]:
    if data[:8] != MAGIC:
        raise ParseError(f"{path}: not a checkpoint (bad magic)")
    pos = 8

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, data, pos)
        pos += struct.calcsize(fmt)
        return vals

    (version,) = take("<I")
    if version != VERSION:
        raise ParseError(f"{path}: unsupported checkpoint version {version}")
    (clen,) = take("<I")
    config_text = data[pos:pos + clen].decode("utf-8")
    pos += clen
    (step,) = take("<Q")
    (count,) = take("<I")
    groups: dict[str, dict[str, np.ndarray]] = {"student": {}, "teacher": {}, "velocity": {}}
    center = None
    for _ in range(count):
        (nlen,) = take("<H")
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = take("<B")
        shape = take(f"<{ndim}I") if ndim else ()
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
        if name == "center":
            center = arr
        else:
            group, _, key = name.partition("/")
            if group not in groups:
                raise ParseError(f"{path}: unknown array group in {name!r}")
            groups[group][key] = arr
    if center is None:
        raise ParseError(f"{path}: checkpoint has no center array")
    return ModelState(groups["student"], groups["teacher"], center, groups["velocity"], step), config_text
