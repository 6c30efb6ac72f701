"""Command-line entry point: ``dmuq gen | train | eval | viz``.

Failures exit with status 2 (usage) or 1 and print one line
``error: <category>: <message>`` to stderr. Log verbosity comes from the
``DMUQ_LOG`` environment variable (e.g. ``DMUQ_LOG=INFO``).
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .benchmark import (
    dataset_path,
    evaluate_artifacts,
    generate_splits,
    load_artifact,
    load_splits,
    predict,
    save_artifact,
    score_cell,
    train_cells,
    write_report,
)
from .config import METHODS, RunConfig, load_config
from .detector import CollabMode
from .distributions import Variant
from .errors import DMUQError, UsageError
from .scenegen import save_dataset
from .viz import render_svg

log = logging.getLogger("dmuq")


def _config(args) -> RunConfig:
    return load_config(args.config)


def _data_dir(args, cfg: RunConfig) -> Path:
    return Path(args.data or cfg.paths.data)


def _writable_dir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create directory {path}: {exc.strerror}") from None
    if not os.access(path, os.W_OK):
        raise UsageError(f"directory {path} is not writable")
    return path


def cmd_gen(args) -> int:
    cfg = _config(args)
    if args.frames is not None:
        if args.frames < 1:
            raise UsageError("--frames must be >= 1")
        cfg = cfg.with_frames(args.frames).validate()
    out = _writable_dir(Path(args.out))
    splits = generate_splits(cfg)
    for name, frames in splits.items():
        scene, _ = cfg.split_scene(name)
        save_dataset(dataset_path(out, name), frames, scene)
        print(f"{name}: {len(frames)} frames ({scene.n_scenes} scenes x {scene.frames_per_scene})")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    splits = load_splits(_data_dir(args, cfg), ("train", "val"), cfg.scene)
    out = _writable_dir(Path(args.out))
    methods = list(METHODS) if "all" in args.method else list(dict.fromkeys(args.method))
    variant = Variant.parse(args.variant or cfg.detector.variant).value
    arts = train_cells(splits, cfg, args.mode, methods, variant)
    for method in methods:
        path = save_artifact(out, arts[method], variant_suffix=True)
        stats = "with statistics" if arts[method].stats is not None else "no statistics"
        print(f"{arts[method].mode}/{method}: {path} ({stats})")
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    test = load_splits(_data_dir(args, cfg), ("test",), cfg.scene)["test"]
    root = Path(args.artifacts)
    if not root.is_dir():
        raise UsageError(f"artifact directory {root} does not exist")
    if args.ablation:
        rows = []
        for v in cfg.eval.ablation_variants:
            for method in ("dm", "doublem"):
                try:
                    art = load_artifact(root, cfg.eval.ablation_mode, method, v)
                except UsageError as exc:
                    raise UsageError(f"ablation cell {v}/{method}: {exc}") from None
                rows.append(score_cell(art, test, cfg))
        paths = write_report(args.report, rows, cfg, with_variant=True)
    else:
        modes = [args.mode] if args.mode else None
        methods = [args.method] if args.method else None
        rows = evaluate_artifacts(root, test, cfg, modes, methods)
        paths = write_report(args.report, rows, cfg)
    sys.stdout.write(Path(paths[0]).read_text())
    gaps = sum(r.n_gt is None for r in rows)
    if gaps:
        log.warning("%d grid cell(s) had no artifacts", gaps)
    return 0


def cmd_viz(args) -> int:
    cfg = _config(args)
    frames = load_splits(_data_dir(args, cfg), (args.split,), cfg.scene)[args.split]
    if not 0 <= args.frame < len(frames):
        raise UsageError(f"frame {args.frame} out of range for the {args.split} split ({len(frames)} frames)")
    frame = frames[args.frame]
    art = load_artifact(args.artifacts, args.mode, args.method)
    dets = predict(art, [frame])[0]
    svg = render_svg(frame, dets, (cfg.scene.world_width, cfg.scene.world_length), cfg.scene.cell_size)
    out = Path(args.out)
    _writable_dir(out.parent if str(out.parent) else Path("."))
    out.write_text(svg)
    print(f"{out}: {len(frame.targets())} ground truths, {len(dets)} detections")
    return 0


def _mode(text: str) -> str:
    return CollabMode.parse(text).value


_mode.__name__ = "mode"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dmuq", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate train/val/test datasets")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--frames", type=int, help="frames per scene for every split")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train grid cells of one mode")
    t.add_argument("--config", required=True)
    t.add_argument("--method", required=True, nargs="+", choices=list(METHODS) + ["all"], help="one or more methods, or all")
    t.add_argument("--mode", required=True, type=_mode, help="lb | inter | early")
    t.add_argument("--out", required=True, help="artifact root directory")
    t.add_argument("--variant", help="IMG | ISG | DMG (default from config)")
    t.add_argument("--data", help="dataset directory (default from config)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score stored artifacts on the test split")
    e.add_argument("--config", required=True)
    e.add_argument("--artifacts", required=True)
    e.add_argument("--report", required=True, help="text report path; a .json twin is written next to it")
    e.add_argument("--mode", type=_mode, help="restrict to one mode")
    e.add_argument("--method", choices=METHODS, help="restrict to one method")
    e.add_argument("--ablation", action="store_true", help="score the distribution-variant grid instead")
    e.add_argument("--data", help="dataset directory (default from config)")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("viz", help="render one test frame as SVG")
    v.add_argument("--frame", required=True, type=int)
    v.add_argument("--artifacts", required=True)
    v.add_argument("--out", required=True)
    v.add_argument("--config", required=True)
    v.add_argument("--mode", default="inter", type=_mode)
    v.add_argument("--method", default="doublem", choices=METHODS)
    v.add_argument("--split", default="test", choices=["train", "val", "test"])
    v.add_argument("--data", help="dataset directory (default from config)")
    v.set_defaults(func=cmd_viz)
    return p


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get("DMUQ_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except DMUQError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return 2 if isinstance(exc, UsageError) else 1
    except OSError as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
