"""Command-line entry points.

Every subcommand exits 0 on success.  Failures print a single line
``error: <kind>: <message>`` to stderr and exit 1; argument errors exit 2.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .evaluation import activation_map, collapse_summary, group_cloud, grouping_metrics, linear_probe, random_init_state
from .grouping import read_grouping, write_grouping
from .kvconfig import apply_kv
from .networks import load_checkpoint, save_checkpoint
from .pointcloud import default_room_recipe, generate_synthetic_scene, iter_ply_files, load_ply, load_recipe, write_ply
from .segmentation import graph_cut_segments, load_external_segments, write_segments
from .trainer import TrainConfig, load_config, load_scenes, parse_config_text, run_pretraining


def _overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for p in pairs:
        if "=" not in p:
            raise ConfigError(f"--set expects key=value, got {p!r}")
        k, v = p.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def cmd_pretrain(args) -> None:
    from .plotting import plot_training_curves, plot_usage_entropy
    cfg = load_config(args.config) if args.config else TrainConfig()
    if args.set:
        cfg = apply_kv(cfg, _overrides(args.set))
        cfg.validate()
    out = Path(args.out)
    report = run_pretraining(load_scenes(cfg), cfg, out)
    if report.records:
        plot_training_curves(report.records, out / "training_curves.png")
        plot_usage_entropy(report.records, out / "usage_entropy.png", cfg.network.num_prototypes)
    print(f"steps={len(report.records)} checkpoint={report.checkpoint_path}")


def cmd_segment(args) -> None:
    cloud = load_ply(args.input)
    segmap = graph_cut_segments(cloud, threshold=args.threshold, min_segment_size=args.min_size, k=args.k)
    write_segments(args.out, segmap)
    print(f"points={len(segmap.ids)} segments={segmap.num_segments}")


def _load_model(path):
    state, text = load_checkpoint(path)
    return state, parse_config_text(text)


def cmd_group(args) -> None:
    state, cfg = _load_model(args.checkpoint)
    cloud = load_ply(args.input)
    segmap = load_external_segments(args.masks, cloud.ids) if args.masks else None
    result, segmap = group_cloud(state, cfg, cloud, segmap)
    write_grouping(args.out, result)
    if args.regions:
        regions = Path(args.regions)
        regions.mkdir(parents=True, exist_ok=True)
        for label in np.unique(result.point_labels).tolist():
            keep = cloud.index_of(result.ids[result.point_labels == label])
            write_ply(regions / f"prototype_{label:03d}.ply", cloud.subset(keep))
    print(f"points={len(result.ids)} segments={segmap.num_segments} "
          f"groups={len(np.unique(result.segment_labels))}")


def cmd_activation_map(args) -> None:
    state, cfg = _load_model(args.checkpoint)
    cloud = load_ply(args.input)
    amap = activation_map(state, cfg.network, cloud, args.query, args.branch)
    write_ply(args.out, cloud, extra={"similarity": amap.similarities})
    if amap.degenerate:
        print("warning: all features are zero, map is degenerate", file=sys.stderr)
    print(f"query={amap.query_id} points={len(amap.ids)}")


def _split(data: Path, name: str) -> list:
    files = list(iter_ply_files(data / name))
    if not files:
        raise ConfigError(f"no .ply scenes under {data / name}")
    return [load_ply(f) for f in files]


def cmd_probe(args) -> None:
    from .plotting import plot_probe
    state, cfg = _load_model(args.checkpoint)
    data = Path(args.data)
    train, test = _split(data, "train"), _split(data, "test")
    results = {"pretrained": linear_probe(state, cfg.network, train, test, iters=args.iters)}
    if args.baseline_seed is not None:
        base = random_init_state(cfg.network, args.baseline_seed)
        results["random_init"] = linear_probe(base, cfg.network, train, test, iters=args.iters)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["encoder", "class", "accuracy"])
        for name, res in results.items():
            for c, acc in sorted(res.per_class.items()):
                w.writerow([name, c, repr(acc)])
            w.writerow([name, "mean", repr(res.mean_accuracy)])
            w.writerow([name, "overall", repr(res.overall_accuracy)])
            for c in res.missing_classes:
                w.writerow([name, c, "missing"])
    plot_probe(results, out.with_suffix(".png"))
    print(" ".join(f"{k}={v.mean_accuracy:.4f}" for k, v in results.items()))


def cmd_gen_data(args) -> None:
    recipe = load_recipe(args.recipe) if args.recipe else default_room_recipe()
    out = Path(args.out)
    for split, count, offset in (("train", args.train, 0), ("test", args.test, args.train)):
        (out / split).mkdir(parents=True, exist_ok=True)
        for i in range(count):
            cloud = generate_synthetic_scene(args.seed + offset + i, recipe)
            write_ply(out / split / f"{cloud.name}.ply", cloud)
    print(f"train={args.train} test={args.test} out={out}")


def cmd_metrics(args) -> None:
    ids, labels, conf = read_grouping(args.grouping)
    cloud = load_ply(args.input)
    if cloud.labels is None:
        raise ConfigError(f"{args.input} has no per-vertex labels")
    truth = dict(zip(cloud.ids.tolist(), cloud.labels.tolist()))
    pred = dict(zip(ids.tolist(), labels.tolist()))
    truth = {i: truth[i] for i in pred if i in truth} if args.overlap_only else truth
    m = grouping_metrics(pred, truth)
    row = {"purity": m.purity, "nmi": m.nmi, "usage_entropy": m.usage_entropy,
           "groups": m.cluster_count, "mean_confidence": float(conf.mean())}
    text = ",".join(row) + "\n" + ",".join(repr(v) for v in row.values()) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)


def cmd_init_checkpoint(args) -> None:
    cfg = load_config(args.config) if args.config else TrainConfig()
    from .networks import init_state
    save_checkpoint(args.out, init_state(cfg.network, args.seed if args.seed is not None else cfg.seed),
                    cfg.to_text())


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="segproto", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("pretrain", help="self-supervised pre-training")
    s.add_argument("--config", help="key = value config file")
    s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("segment", help="graph-cut segments of one PLY")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--threshold", type=float, default=0.1)
    s.add_argument("--min-size", type=int, default=20)
    s.add_argument("--k", type=int, default=16)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_segment)

    s = sub.add_parser("group", help="teacher grouping of one PLY")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--masks", help="external segment file 'original_id mask_id'")
    s.add_argument("--regions", help="directory for one PLY per prototype")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_group)

    s = sub.add_parser("activation-map", help="cosine similarity to a query point")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--query", type=int, required=True)
    s.add_argument("--branch", choices=("g", "h"), default="g")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_activation_map)

    s = sub.add_parser("probe", help="linear probe on frozen trunk features")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True, help="directory with train/ and test/ PLY scenes")
    s.add_argument("--baseline-seed", type=int, help="also probe a random-init encoder with this seed")
    s.add_argument("--iters", type=int, default=500)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_probe)

    s = sub.add_parser("gen-data", help="write synthetic labelled scenes")
    s.add_argument("--recipe", help="scene recipe file (default: built-in room)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--train", type=int, default=16)
    s.add_argument("--test", type=int, default=8)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("metrics", help="purity / NMI of a grouping file against PLY labels")
    s.add_argument("--grouping", required=True)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--overlap-only", action="store_true", help="score only ids present in the grouping")
    s.add_argument("--out")
    s.set_defaults(func=cmd_metrics)

    s = sub.add_parser("init-checkpoint", help="write an untrained checkpoint")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_init_checkpoint)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (Exception, KeyboardInterrupt) as exc:  # one-line report for every failure
        msg = " ".join(str(exc).split()) or repr(exc)
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
