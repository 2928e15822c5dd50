"""Command-line entry point: ``ptseg <command> [flags]``."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import from_kv, parse_kv
from .errors import ArgumentError, FormatError, PtsegError
from .evaluation import ConfusionMatrix, accumulate, render_report
from .pointcloud import CameraIntrinsics, LabeledPointCloud, depth_to_cloud, encode_ascii, load_cloud, save_cloud
from .synth import SceneRecipe, synth_scene
from .training import load_train_config, predict_scene, train, train_config_from_mapping, train_config_keys
from .training import save_train_config

log = logging.getLogger("ptseg")

# class colors of the indoor benchmark (13 classes)
BENCHMARK_PALETTE = {
    "ceiling": (0, 255, 0),
    "floor": (0, 0, 255),
    "wall": (0, 255, 255),
    "beam": (255, 255, 0),
    "column": (255, 0, 255),
    "window": (100, 100, 255),
    "door": (200, 200, 100),
    "table": (170, 120, 200),
    "chair": (255, 0, 0),
    "sofa": (200, 100, 100),
    "bookcase": (10, 200, 100),
    "board": (200, 200, 200),
    "clutter": (50, 50, 50),
}
DEFAULT_PALETTE = list(BENCHMARK_PALETTE.values())


class UsageError(ArgumentError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# colored export


def palette_for(class_names) -> list[tuple[int, int, int]]:
    """Named benchmark colors where the class name matches, the default order otherwise."""
    if all(n in BENCHMARK_PALETTE for n in class_names):
        return [BENCHMARK_PALETTE[n] for n in class_names]
    return DEFAULT_PALETTE


def export_colored(cloud: LabeledPointCloud, labels, palette, path) -> None:
    """Write an ASCII cloud whose colors show ``labels`` (one ``x y z r g b label`` line per point)."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (len(cloud),):
        raise ArgumentError(f"{len(labels)} labels for {len(cloud)} points")
    pal = np.asarray(palette, dtype=np.int64).reshape(-1, 3)
    if len(pal) < cloud.num_classes or (len(labels) and labels.max() >= len(pal)):
        raise ArgumentError(f"palette has {len(pal)} colors for {cloud.num_classes} classes")
    if ((pal < 0) | (pal > 255)).any():
        raise ArgumentError("palette entries must lie in [0, 255]")
    colored = LabeledPointCloud(cloud.positions, labels, cloud.class_names, pal[labels].astype(np.uint8), cloud.tag)
    Path(path).write_text(encode_ascii(colored), encoding="utf-8")


# ---------------------------------------------------------------------------
# labels files


LABELS_HEADER = "# ptseg-labels digest="


def write_labels(path, labels, cloud: LabeledPointCloud) -> None:
    body = "\n".join(str(int(v)) for v in labels)
    Path(path).write_text(f"{LABELS_HEADER}{cloud.digest()} count={len(labels)}\n{body}\n", encoding="utf-8")


def read_labels(path, cloud: LabeledPointCloud | None = None) -> np.ndarray:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith(LABELS_HEADER):
        raise FormatError(f"{path}: missing labels header", 0)
    fields = dict(kv.split("=", 1) for kv in lines[0][2:].split()[1:])
    try:
        labels = np.array([int(s) for s in lines[1:] if s.strip()], dtype=np.int64)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    if int(fields.get("count", -1)) != len(labels):
        raise FormatError(f"{path}: header announces {fields.get('count')} labels, found {len(labels)}")
    if cloud is not None and fields.get("digest") != cloud.digest():
        raise ArgumentError(f"{path} was predicted for a different cloud (digest {fields.get('digest')})")
    return labels


def save_counts(path, cm: ConfusionMatrix) -> None:
    rows = "\n".join(" ".join(str(v) for v in r) for r in cm.counts)
    Path(path).write_text(f"# classes: {','.join(cm.class_names)}\n{rows}\n", encoding="utf-8")


def load_counts(path) -> ConfusionMatrix:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("# classes:"):
        raise FormatError(f"{path}: missing class header", 0)
    names = tuple(lines[0].split(":", 1)[1].strip().split(","))
    try:
        counts = np.array([[int(v) for v in ln.split()] for ln in lines[1:] if ln.strip()], dtype=np.int64)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    return ConfusionMatrix(counts, names)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    values = parse_kv(Path(args.recipe).read_text(encoding="utf-8")) if args.recipe else {}
    if args.seed is not None:
        values["seed"] = str(args.seed)
    recipe = from_kv(SceneRecipe, values)
    cloud = synth_scene(recipe, tag=args.tag)
    save_cloud(cloud, args.out, args.format)
    print(f"{args.out}: {len(cloud)} points, {cloud.num_classes} classes")
    return 0


def cmd_project(args) -> int:
    depth = np.load(args.depth)
    semantic = np.load(args.semantic)
    colors = np.load(args.colors) if args.colors else None
    h, w = depth.shape
    k = CameraIntrinsics(
        args.focal, args.focal_y or args.focal,
        w / 2 if args.cx is None else args.cx, h / 2 if args.cy is None else args.cy, w, h,
    )
    names = tuple(args.names.split(",")) if args.names else None
    cloud = depth_to_cloud(depth, semantic, k, colors, args.max_depth, names)
    save_cloud(cloud, args.out, args.format)
    print(f"{args.out}: {len(cloud)} points")
    return 0


def _train_overrides(args) -> dict:
    out = {}
    for key in train_config_keys():
        v = getattr(args, key, None)
        if v is not None:
            out[key] = v
    return out


def cmd_train(args) -> int:
    overrides = _train_overrides(args)
    cfg = load_train_config(args.config, overrides) if args.config else train_config_from_mapping(overrides)
    clouds = [load_cloud(p) for p in args.data]
    m = clouds[0].num_classes
    if cfg.model.num_classes != m and "num_classes" not in overrides:
        cfg = dataclasses.replace(cfg, model=dataclasses.replace(cfg.model, num_classes=m))
    if cfg.model.use_color and not all(c.has_color for c in clouds):
        cfg = dataclasses.replace(cfg, model=dataclasses.replace(cfg.model, input_dim=6))
        log.warning("clouds without color: training on XYZ features only")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_train_config(cfg, out / "train.cfg")

    def show(r):
        print(f"epoch {r.epoch:4d}  loss {r.loss:.4f}  acc {r.accuracy:.4f}  {r.seconds:.1f}s")

    train(clouds, cfg, checkpoint_dir=out, resume=args.resume, epoch_callback=show)
    print(f"model written to {out / 'model'}")
    return 0


def _load_trained(path):
    from .models import load_model

    path = Path(path)
    prefix = path / "model" if path.is_dir() else path
    cfg_path = prefix.parent / "train.cfg"
    model = load_model(prefix)
    sampler = load_train_config(cfg_path).sampler if cfg_path.exists() else None
    return model, sampler


def cmd_predict(args) -> int:
    model, sampler = _load_trained(args.model)
    if sampler is None:
        raise ArgumentError(f"no train.cfg next to {args.model}")
    if args.points_per_block:
        sampler = dataclasses.replace(sampler, points_per_block=args.points_per_block)
    cloud = load_cloud(args.data)
    if cloud.num_classes != model.config.num_classes:
        raise ArgumentError(f"cloud has {cloud.num_classes} classes, model predicts {model.config.num_classes}")
    labels = predict_scene(cloud, model, sampler, seed=args.seed or 0)
    write_labels(args.out, labels, cloud)
    if args.export:
        export_colored(cloud, labels, palette_for(cloud.class_names), args.export)
    print(f"{args.out}: {len(labels)} labels")
    return 0


def cmd_eval(args) -> int:
    if len(args.pred) != len(args.gt):
        raise ArgumentError(f"{len(args.pred)} prediction files for {len(args.gt)} clouds")
    cm = None
    for pred_path, gt_path in zip(args.pred, args.gt):
        cloud = load_cloud(gt_path)
        pred = read_labels(pred_path, cloud)
        if len(pred) != len(cloud):
            raise ArgumentError(f"{pred_path}: {len(pred)} labels for {len(cloud)} points")
        cm = cm or ConfusionMatrix.empty(cloud.num_classes, cloud.class_names)
        cm = accumulate(cm, pred, cloud.labels)
    text = render_report({args.name: cm})
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    if args.counts:
        save_counts(args.counts, cm)
    sys.stdout.write(text)
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    if os.environ.get("PTSEG_PRECISION", "f64") != "f64":
        raise ArgumentError("gradcheck runs in 64-bit mode only; unset PTSEG_PRECISION or set it to f64")
    with ad.precision("f64"):
        reports = run_suite(seed=args.seed or 0, eps=args.eps, tol=args.tol, include_models=args.all)
    ok = True
    for name, r in reports.items():
        status = "ok" if r.passed else "FAIL"
        ok &= r.passed
        print(f"{name:24s} max rel. err {r.worst:.3e}  {status}")
    return 0 if ok else 2


def cmd_report(args) -> int:
    results = {}
    for item in args.runs:
        if "=" not in item:
            raise ArgumentError(f"expected NAME=COUNTS_FILE, got {item!r}")
        name, path = item.split("=", 1)
        results[name] = load_counts(path)
    text = render_report(results, title=args.title or "")
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# parser


def _flag(key: str) -> str:
    return "--" + key.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ptseg", description="Point-cloud semantic segmentation with block context.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic labeled room")
    s.add_argument("--recipe", help="key = value scene recipe")
    s.add_argument("--out", required=True)
    s.add_argument("--format", choices=("binary", "ascii"))
    s.add_argument("--tag")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("project", help="back-project a depth map (.npy) into a labeled cloud")
    s.add_argument("--depth", required=True)
    s.add_argument("--semantic", required=True)
    s.add_argument("--colors")
    s.add_argument("--focal", type=float, default=725.0)
    s.add_argument("--focal-y", type=float)
    s.add_argument("--cx", type=float)
    s.add_argument("--cy", type=float)
    s.add_argument("--max-depth", type=float, default=80.0)
    s.add_argument("--names", help="comma-separated class names")
    s.add_argument("--out", required=True)
    s.add_argument("--format", choices=("binary", "ascii"))
    s.add_argument("--seed", type=int, help="accepted for uniformity; projection is deterministic")
    s.set_defaults(func=cmd_project)

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--data", nargs="+", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True, help="checkpoint directory")
    s.add_argument("--resume", help="checkpoint prefix to resume from")
    for key in train_config_keys():
        s.add_argument(_flag(key), dest=key, metavar="VALUE", help=f"override {key}")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", help="label every point of a cloud")
    s.add_argument("--model", required=True, help="checkpoint directory or prefix")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--export", help="also write a label-colored ASCII cloud")
    s.add_argument("--points-per-block", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("eval", help="score label files against ground truth")
    s.add_argument("--pred", nargs="+", required=True)
    s.add_argument("--gt", nargs="+", required=True)
    s.add_argument("--name", default="model")
    s.add_argument("--out")
    s.add_argument("--counts", help="also write the confusion counts")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference check of every operator")
    s.add_argument("--all", action="store_true", help="include the three miniature models")
    s.add_argument("--eps", type=float, default=1e-6)
    s.add_argument("--tol", type=float, default=1e-4)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("report", help="render a comparison table from confusion counts")
    s.add_argument("runs", nargs="+", metavar="NAME=COUNTS")
    s.add_argument("--title")
    s.add_argument("--out")
    s.set_defaults(func=cmd_report)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ArgumentError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2 if isinstance(exc, OSError) else 1
    except (PtsegError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
