"""Command-line entry point: one subcommand per stage, plus ``synth`` and ``run``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline, synth
from .config import add_config_arguments, config_from_args
from .vlm_client import ConfigurationError


def _frames_arg(p):
    p.add_argument("frames", type=Path, help="directory of per-frame 'x y z' text files")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="truckvlm", description="Roadside LiDAR vehicle classification pipeline.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)

    def stage(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("-o", "--out", type=Path, required=True, help="run directory")
        add_config_arguments(p)
        return p

    p = stage("learn-bg", "learn the background model from static-scene frames")
    _frames_arg(p)
    p = stage("extract", "write per-frame foreground points")
    _frames_arg(p)
    p.add_argument("--model", type=Path, help="background model (default: <out>/background.txt)")
    stage("track", "cluster foreground points and track them across frames")
    stage("reconstruct", "register and merge each confirmed track's frames")
    stage("render", "write original and processed side-view images")
    p = stage("labels", "write labels.csv from a labels file or synthetic ground truth")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--labels", type=Path, help="'track_id,label' CSV")
    g.add_argument("--truth", type=Path, help="synthetic ground-truth directory")
    stage("classify", "prompt the backend for every labeled track")
    stage("evaluate", "score results and write reports and tables")
    p = stage("run", "full pipeline on an input directory")
    p.add_argument("input", type=Path, help="directory with frames/ and optional background/, labels.csv, truth/")

    p = sub.add_parser("synth", help="generate a synthetic scene with ground truth")
    p.add_argument("-o", "--out", type=Path, required=True)
    p.add_argument("--preset", choices=sorted(synth.PRESETS), default="three-class")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, help="range noise sigma in meters")
    p.add_argument("--frames", type=int, help="number of frames")
    return parser


def _run(args) -> int:
    if args.command == "synth":
        kw = {}
        if args.noise is not None:
            kw["noise"] = args.noise
        if args.frames is not None:
            kw["n_frames"] = args.frames
        scene = synth.PRESETS[args.preset](**kw)
        synth.write_scene(scene, synth.generate(scene, args.seed), args.out)
        print(f"wrote {args.preset} scene to {args.out}")
        return 0

    cfg = config_from_args(args)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    cmd = args.command
    if cmd == "learn-bg":
        pipeline.learn_bg(cfg, args.frames, out)
    elif cmd == "extract":
        pipeline.extract(cfg, args.frames, out, args.model)
    elif cmd == "track":
        pipeline.track(cfg, out)
    elif cmd == "reconstruct":
        pipeline.reconstruct(cfg, out)
    elif cmd == "render":
        pipeline.render(cfg, out)
    elif cmd == "labels":
        pipeline.make_labels(cfg, out, args.labels, args.truth)
    elif cmd == "classify":
        pipeline.classify(cfg, out)
    elif cmd in ("evaluate", "run"):
        reports = (pipeline.run_pipeline(cfg, args.input, out) if cmd == "run" else pipeline.evaluate(cfg, out))
        for (variant, k), rep in sorted(reports.items()):
            print(f"{variant:10s} k={k:<2d} macro F1 = {rep.macro_f1:.3f}")
        table = out / "table.txt"
        if table.exists():
            print(table.read_text(), end="")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except (pipeline.StageError, ConfigurationError, ValueError) as exc:
        print(f"truckvlm: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
