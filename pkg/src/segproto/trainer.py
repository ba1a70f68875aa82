"""Joint pre-training loop: grouping distillation plus semantic-aware contrast.

One optimizer step runs, per scene, segmentation of the view overlap,
segment pooling and prototype assignment, group extraction, point sampling,
pair construction and the contrastive loss; the batch objective is the mean
over scenes of ``lambda_group * L_group + lambda_con * L_con``.  After the
SGD step the teacher takes an EMA step and the centre is updated, in that
order.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .augment import AugmentConfig, ViewPair, make_view_pair
from .contrastive import STRATEGIES, build_pairs, contrastive_loss, sample_points
from .errors import ConfigError, NumericError
from .grouping import compute_assignments, extract_groups, grouping_loss, pool_segments, update_center
from .kvconfig import load_kv, to_kv
from .networks import (EncoderConfig, ModelState, ema_update, encode, init_state, load_checkpoint,
                       save_checkpoint)
from .pointcloud import PointCloud, default_room_recipe, generate_synthetic_scene, load_ply, load_recipe
from .segmentation import SegmentMap, graph_cut_segments, load_external_segments

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SegmentationConfig:
    threshold: float = 0.1
    k: int = 16
    min_segment_size: int = 20
    mask_dir: str | None = None   # external "<scene>.seg" files replace the graph cut


@dataclass(frozen=True)
class GroupingConfig:
    tau_s: float = 0.1
    tau_t: float = 0.07
    centering: bool = True
    sharpening: bool = True        # off: the teacher uses tau_s as well
    center_momentum: float = 0.9
    informative_aware: bool = True

    @property
    def teacher_temp(self) -> float:
        return self.tau_t if self.sharpening else self.tau_s


@dataclass(frozen=True)
class ContrastiveConfig:
    strategy: str = "segment_grouping"
    num_samples: int = 2048
    tau: float = 0.4
    grid_size: float = 1.0
    confidence: bool = True
    symmetric: bool = False


@dataclass(frozen=True)
class TrainConfig:
    lambda_group: float = 1.0
    lambda_con: float = 1.0
    lr: float = 0.1
    weight_decay: float = 1e-4
    sgd_momentum: float = 0.8
    batch_size: int = 32
    epochs: int = 1200
    warmup_epochs: float = 12.0
    max_steps: int = 0             # caps the schedule length when > 0
    ema_momentum: float = 0.996
    seed: int = 0
    checkpoint_every: int = 0      # epochs; 0 writes only the final checkpoint
    workers: int = 1
    data_dir: str | None = None    # PLY scenes; when unset, synthetic rooms are generated
    recipe: str | None = None
    num_scenes: int = 64
    data_seed: int = 1000
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    segmentation: SegmentationConfig = field(default_factory=SegmentationConfig)
    network: EncoderConfig = field(default_factory=EncoderConfig)
    grouping: GroupingConfig = field(default_factory=GroupingConfig)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)

    def validate(self) -> None:
        if self.lambda_group < 0 or self.lambda_con < 0:
            raise ConfigError("loss weights must be >= 0")
        if self.lr < 0 or self.weight_decay < 0 or not 0 <= self.sgd_momentum < 1:
            raise ConfigError("optimizer scalars out of range")
        if self.batch_size < 1 or self.epochs < 0 or self.warmup_epochs < 0 or self.max_steps < 0:
            raise ConfigError("schedule counts out of range")
        if not 0.0 <= self.ema_momentum <= 1.0:
            raise ConfigError(f"ema_momentum must be in [0, 1], got {self.ema_momentum}")
        if self.contrastive.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.contrastive.strategy!r}")
        if not 0.0 <= self.grouping.center_momentum < 1.0:
            raise ConfigError("grouping.center_momentum must be in [0, 1)")
        self.augment.validate()
        self.network.validate()

    def to_text(self) -> str:
        return "\n".join(to_kv(self)) + "\n"


def load_config(path) -> TrainConfig:
    cfg = load_kv(TrainConfig, path)
    cfg.validate()
    return cfg


def parse_config_text(text: str) -> TrainConfig:
    from .kvconfig import apply_kv, parse_kv
    return apply_kv(TrainConfig(), parse_kv(text, "<checkpoint config>"))


# --------------------------------------------------------------------------
# Schedule and optimizer
# --------------------------------------------------------------------------

def steps_per_epoch(num_scenes: int, cfg: TrainConfig) -> int:
    return math.ceil(num_scenes / cfg.batch_size)


def total_steps(num_scenes: int, cfg: TrainConfig) -> int:
    total = cfg.epochs * steps_per_epoch(num_scenes, cfg)
    return min(total, cfg.max_steps) if cfg.max_steps > 0 else total


def warmup_steps(total_steps: int, cfg: TrainConfig) -> int:
    if cfg.epochs == 0 or total_steps == 0:
        return 0
    return max(1, int(round(cfg.warmup_epochs / cfg.epochs * total_steps)))


def lr_at(step: int, cfg: TrainConfig, total_steps: int) -> float:
    """Linear warmup from 0, then cosine decay reaching 0 at the last step."""
    warm = warmup_steps(total_steps, cfg)
    if step < warm:
        return cfg.lr * step / warm
    span = total_steps - 1 - warm
    if span <= 0:
        return cfg.lr
    progress = min(1.0, (step - warm) / span)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], velocity: dict[str, np.ndarray],
             lr: float, momentum: float, weight_decay: float, no_decay=("prototypes",)):
    """Heavy-ball SGD: v <- mu v + (g + wd p); p <- p - lr v.  Returns new (params, velocity)."""
    new_p, new_v = {}, {}
    for name, p in params.items():
        g = grads.get(name)
        g = np.zeros_like(p) if g is None else g
        if weight_decay and name not in no_decay:
            g = g + weight_decay * p
        v = momentum * velocity[name] + g if name in velocity else g.copy()
        new_v[name] = v
        new_p[name] = p - lr * v
    return new_p, new_v


# --------------------------------------------------------------------------
# One step
# --------------------------------------------------------------------------

@dataclass
class StepRecord:
    step: int
    epoch: int
    l_group: float
    l_con: float
    l_overall: float
    lr: float
    mean_confidence: float
    num_pairs: int
    usage: np.ndarray

    def row(self) -> list[str]:
        return [str(self.step), str(self.epoch), repr(self.l_group), repr(self.l_con), repr(self.l_overall),
                repr(self.lr), repr(self.mean_confidence), str(self.num_pairs),
                " ".join(str(int(u)) for u in self.usage)]


REPORT_COLUMNS = ["step", "epoch", "l_group", "l_con", "l_overall", "lr", "mean_confidence",
                  "num_pairs", "usage"]


def segment_pair(pair: ViewPair, cfg: TrainConfig) -> SegmentMap:
    """Segments of the overlap, shared by both views."""
    scfg = cfg.segmentation
    if scfg.mask_dir:
        return load_external_segments(Path(scfg.mask_dir) / f"{pair.name}.seg", pair.overlap_ids)
    source = pair.source if pair.source is not None else pair.view_q
    return graph_cut_segments(source, pair.overlap_ids, threshold=scfg.threshold,
                              min_segment_size=scfg.min_segment_size, k=scfg.k)


def _scene_losses(pair: ViewPair, segmap: SegmentMap, student, teacher: dict[str, ad.Tensor],
                  center, cfg: TrainConfig, sample_seed):
    net, gcfg, ccfg = cfg.network, cfg.grouping, cfg.contrastive
    s_out = encode(pair.view_q, student, net, branches=("g", "pred"))
    t_out = encode(pair.view_k, teacher, net, branches=("g", "h"))

    oq = pair.overlap_q
    ok = pair.overlap_k
    seg_q = segmap.segment_of(pair.view_q.ids[oq])
    seg_k = segmap.segment_of(pair.view_k.ids[ok])
    P = segmap.num_segments
    z_q = pool_segments(ad.gather_rows(s_out["g"], oq), seg_q, P)
    z_k = pool_segments(ad.gather_rows(t_out["g"], ok), seg_k, P).data
    scores = compute_assignments(z_q, z_k, student["prototypes"], teacher["prototypes"].data,
                                 center if gcfg.centering else None, gcfg.tau_s, gcfg.teacher_temp,
                                 sharpen=gcfg.sharpening)
    l_group = grouping_loss(scores, gcfg.informative_aware)
    groups = extract_groups(scores.K, segmap)

    samples = sample_points(pair, ccfg.num_samples, sample_seed, ccfg.strategy)
    pairs = build_pairs(ccfg.strategy, samples, grouping=groups, segmap=segmap, K=scores.K,
                        grid_size=ccfg.grid_size, reference=pair.source, use_confidence=ccfg.confidence)
    q_feat = s_out["pred"] if "pred" in s_out else s_out["h"]
    v_q = ad.l2_normalize_rows(ad.gather_rows(q_feat, samples.idx_q))
    v_k = ad.l2_normalize_rows(ad.gather_rows(t_out["h"], samples.idx_k)).data
    l_con = contrastive_loss(v_q, v_k, pairs, ccfg.tau)
    if ccfg.symmetric:
        l_con = ad.scalar_mul(ad.add(l_con, _swapped_con(pair, samples, pairs, student, teacher, cfg)), 0.5)
    return l_group, l_con, z_k, groups, pairs


def _swapped_con(pair, samples, pairs, student, teacher, cfg):
    """Contrastive term with the views' roles exchanged (same samples and pair set, transposed)."""
    net, ccfg = cfg.network, cfg.contrastive
    s_out = encode(pair.view_k, student, net, branches=("pred",))
    t_out = encode(pair.view_q, teacher, net, branches=("h",))
    q_feat = s_out["pred"] if "pred" in s_out else s_out["h"]
    v_q = ad.l2_normalize_rows(ad.gather_rows(q_feat, samples.idx_k))
    v_k = ad.l2_normalize_rows(ad.gather_rows(t_out["h"], samples.idx_q)).data
    from .contrastive import PairSet, Samples
    swapped = PairSet(pairs.strategy, Samples(samples.idx_k, samples.idx_q, samples.ids_k, samples.ids_q,
                                              samples.with_replacement),
                      pairs.positive.T.copy(), pairs.confidence.T.copy())
    return contrastive_loss(v_q, v_k, swapped, ccfg.tau)


def train_step(state: ModelState, batch: list[ViewPair], cfg: TrainConfig, lr: float,
               segmaps: list[SegmentMap] | None = None, epoch: int = 0, seed=None):
    """One optimizer step; returns ``(new_state, StepRecord)``."""
    if not batch:
        raise ConfigError("train_step: empty batch")
    seed = cfg.seed if seed is None else seed
    if segmaps is None:
        segmaps = [segment_pair(p, cfg) for p in batch]
    student = {k: ad.parameter(v) for k, v in state.student.items()}
    teacher = {k: ad.tensor(v) for k, v in state.teacher.items()}

    total = None
    lg_sum = lc_sum = lo_sum = 0.0
    z_ks = []
    usage = np.zeros(cfg.network.num_prototypes, dtype=np.int64)
    conf_sum, n_pairs = 0.0, 0
    for idx, (pair, segmap) in enumerate(zip(batch, segmaps)):
        sample_seed = [int(seed), int(state.step), idx, 7]
        try:
            l_group, l_con, z_k, groups, pairs = _scene_losses(pair, segmap, student, teacher, state.center,
                                                               cfg, sample_seed)
        except NumericError as exc:
            raise NumericError(f"scene {pair.name!r}: {exc}") from exc
        scene = ad.add(ad.scalar_mul(l_group, cfg.lambda_group), ad.scalar_mul(l_con, cfg.lambda_con))
        lg, lc, lo = l_group.item(), l_con.item(), scene.item()
        if not all(np.isfinite([lg, lc, lo])):
            raise NumericError(f"scene {pair.name!r}: non-finite loss (group={lg}, con={lc})")
        total = scene if total is None else ad.add(total, scene)
        lg_sum, lc_sum, lo_sum = lg_sum + lg, lc_sum + lc, lo_sum + lo
        z_ks.append(z_k)
        usage += np.bincount(groups.point_labels, minlength=len(usage))
        conf_sum += float(pairs.confidence[pairs.positive].sum())
        n_pairs += pairs.num_positives

    nb = len(batch)
    loss = ad.scalar_mul(total, 1.0 / nb)
    ad.backward(loss)
    grads = {k: t.grad for k, t in student.items()}
    student_new, velocity = sgd_step(state.student, grads, state.velocity, lr, cfg.sgd_momentum,
                                     cfg.weight_decay)
    new_state = ModelState(student_new, state.teacher, state.center, velocity, state.step + 1)
    new_state = ema_update(new_state, cfg.ema_momentum)
    if cfg.grouping.centering:
        new_state.center = update_center(state.center, np.concatenate(z_ks), state.teacher["prototypes"],
                                         cfg.grouping.center_momentum)
    record = StepRecord(state.step, epoch, lg_sum / nb, lc_sum / nb, lo_sum / nb, lr,
                        conf_sum / n_pairs if n_pairs else 0.0, n_pairs, usage)
    return new_state, record


# --------------------------------------------------------------------------
# Full run
# --------------------------------------------------------------------------

@dataclass
class TrainReport:
    records: list[StepRecord]
    checkpoint_path: Path | None
    state: ModelState


def load_scenes(cfg: TrainConfig) -> list[PointCloud]:
    """Training scenes: PLY files under ``data_dir`` (its ``train/`` subdir if present) or synthetic rooms."""
    if cfg.data_dir:
        root = Path(cfg.data_dir)
        if (root / "train").is_dir():
            root = root / "train"
        files = sorted(root.glob("*.ply"))
        if not files:
            raise ConfigError(f"no .ply scenes under {root}")
        return [load_ply(f) for f in files]
    recipe = load_recipe(cfg.recipe) if cfg.recipe else default_room_recipe()
    return [generate_synthetic_scene(cfg.data_seed + i, recipe) for i in range(cfg.num_scenes)]


def write_report_csv(path, records: list[StepRecord]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(REPORT_COLUMNS)
        for r in records:
            w.writerow(r.row())


def read_report_csv(path) -> list[dict[str, str]]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def _prepare(cloud: PointCloud, seed, cfg: TrainConfig):
    pair = make_view_pair(cloud, seed, cfg.augment)
    return pair, segment_pair(pair, cfg)


def run_pretraining(scenes: list[PointCloud], cfg: TrainConfig, out_dir=None,
                    state: ModelState | None = None) -> TrainReport:
    """Train for ``cfg.epochs`` epochs; stream the report CSV and write checkpoints under ``out_dir``."""
    cfg.validate()
    if not scenes:
        raise ConfigError("run_pretraining: empty dataset")
    state = init_state(cfg.network, cfg.seed) if state is None else state
    per_epoch = steps_per_epoch(len(scenes), cfg)
    total = total_steps(len(scenes), cfg)
    out = Path(out_dir) if out_dir is not None else None
    config_text = cfg.to_text()
    records: list[StepRecord] = []
    writer = fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        fh = open(out / "report.csv", "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(REPORT_COLUMNS)
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        for epoch in range(cfg.epochs):
            order = np.random.default_rng([cfg.seed, epoch, 11]).permutation(len(scenes))
            for b in range(per_epoch):
                if len(records) >= total:
                    break
                chosen = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
                seeds = [[cfg.seed, epoch, int(i), 3] for i in chosen]
                jobs = [(scenes[i], s) for i, s in zip(chosen, seeds)]
                if pool is not None:
                    prepared = list(pool.map(lambda js: _prepare(js[0], js[1], cfg), jobs))
                else:
                    prepared = [_prepare(c, s, cfg) for c, s in jobs]
                lr = lr_at(len(records), cfg, total)
                state, rec = train_step(state, [p for p, _ in prepared], cfg, lr,
                                        segmaps=[m for _, m in prepared], epoch=epoch)
                records.append(rec)
                if writer is not None:
                    writer.writerow(rec.row())
                    fh.flush()
            if out is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(out / f"checkpoint_epoch{epoch + 1:04d}.bin", state, config_text)
    finally:
        if fh is not None:
            fh.close()
        if pool is not None:
            pool.shutdown()
    ckpt = None
    if out is not None:
        ckpt = out / "checkpoint.bin"
        save_checkpoint(ckpt, state, config_text)
        (out / "config.txt").write_text(config_text)
    return TrainReport(records, ckpt, state)


def load_trained(path) -> tuple[ModelState, TrainConfig]:
    state, text = load_checkpoint(path)
    return state, parse_config_text(text)
