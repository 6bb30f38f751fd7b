"""Command-line entry point: stagewise commands and a one-shot pipeline."""

from __future__ import annotations

import argparse
import io
import json
import logging
import re
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .classifier import (SkillCategory, cross_validate, holdout_protocol, load_model, render_table,
                         save_model, select_and_fit)
from .config import ConfigError, PipelineConfig, load_config, with_overrides
from .features import FEATURE_NAMES, extract, read_feature_matrix, write_feature_matrix, write_selection
from .fusion import fuse_stream
from .kinematics import build_series, read_kinematics_csv, write_kinematics_csv
from .metrics import evaluate
from .pipeline import feature_matrix
from .report import (procedure_report, render_report, score_procedure, timelines_svg, trajectory_svg,
                     write_json)
from .simulator import (ARCHETYPES, NoiseConfig, benchmark_suite, default_prior, generate,
                        read_ground_truth, write_ground_truth)
from .tips import locate_tips, read_prior, read_tips_csv, write_prior, write_tips_csv
from .tracker import Tracker, read_tracks_csv, write_tracks_csv
from .types import StreamHeader, parse_detection_stream, write_detection_stream

log = logging.getLogger("microskill")

EXIT_INPUT = 1
EXIT_INTERNAL = 2


class InputError(Exception):
    """Bad user input: missing files, malformed data, bad configuration."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


class Context:
    def __init__(self, args):
        cfg = PipelineConfig()
        if args.config:
            with _open(args.config) as fh:
                cfg = load_config(fh)
        self.cfg = with_overrides(cfg, args.tau_merge)
        self.seed = args.seed
        self.out = Path(args.out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.hash = self.cfg.digest()

    def meta(self, frame_rate: Optional[float] = None) -> dict:
        m = {"tool": "microskill", "version": __version__, "config_hash": self.hash, "seed": self.seed}
        if frame_rate is not None:
            m["frame_rate"] = frame_rate
        return m

    def comment(self, frame_rate: Optional[float] = None) -> str:
        return " ".join(f"{k}={v}" for k, v in self.meta(frame_rate).items())

    def path(self, name: str) -> Path:
        return self.out / name

    def write_text(self, name: str, text: str) -> Path:
        p = self.path(name)
        with open(p, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        return p

    def write_json(self, name: str, obj) -> Path:
        p = self.path(name)
        with open(p, "w", encoding="utf-8", newline="\n") as fh:
            write_json(fh, obj)
        return p


def _open(path, mode="r"):
    try:
        return open(path, mode, encoding=None if "b" in mode else "utf-8")
    except OSError as exc:
        raise InputError(f"cannot open {path}: {exc.strerror}") from None


def _read_stream(path):
    with _open(path, "rb") as fh:
        return parse_detection_stream(fh)


def _prior(ctx: Context, path: Optional[str]):
    if path:
        with _open(path) as fh:
            return read_prior(fh)
    return default_prior(ctx.cfg.tip.prior_samples, ctx.cfg.tip.prior_seed)


# ---------------------------------------------------------------------------
# stages

def _track(ctx: Context, header: StreamHeader, detections):
    fused = fuse_stream(detections, ctx.cfg.fusion)
    tracker = Tracker(ctx.cfg.tracker)
    tracks = tracker.run(fused)
    with open(ctx.path("tracks.csv"), "w", encoding="utf-8", newline="\n") as fh:
        write_tracks_csv(fh, tracks, ctx.comment(header.frame_rate))
    ctx.write_json("tracker_report.json", {"meta": ctx.meta(header.frame_rate), **tracker.report.to_json()})
    return fused, tracks


def _tips(ctx: Context, header: StreamHeader, fused, tracks, prior):
    tips = locate_tips(tracks, fused, prior)
    with open(ctx.path("prior.json"), "w", encoding="utf-8", newline="\n") as fh:
        write_prior(fh, prior)
    with open(ctx.path("tips.csv"), "w", encoding="utf-8", newline="\n") as fh:
        write_tips_csv(fh, tips, ctx.comment(header.frame_rate))
    return tips


def _kinematics(ctx: Context, header: StreamHeader, tips):
    series = build_series(tips, header, ctx.cfg.kinematics.smoothing_window, skip_short=True)
    with open(ctx.path("kinematics.csv"), "w", encoding="utf-8", newline="\n") as fh:
        write_kinematics_csv(fh, series, ctx.comment(header.frame_rate))
    return series


def _features(ctx: Context, series, procedure_id: str, frame_rate: Optional[float]):
    if not series:
        raise InputError("no kinematic series long enough for feature extraction")
    fv = extract(series)
    with open(ctx.path("features.csv"), "w", encoding="utf-8", newline="\n") as fh:
        write_feature_matrix(fh, [procedure_id], [None], np.array([fv.values]), fv.names,
                             ctx.comment(frame_rate))
    return fv


def _score(ctx: Context, model, fv, frame_rate: Optional[float]):
    score = {"meta": ctx.meta(frame_rate), **score_procedure(model, fv)}
    ctx.write_json("score.json", score)
    return score


def _report(ctx: Context, score: dict, series):
    rep = procedure_report(score, series, ctx.meta(score.get("meta", {}).get("frame_rate")))
    ctx.write_json("report.json", rep)
    ctx.write_text("report.txt", render_report(rep))
    ctx.write_text("trajectory.svg", trajectory_svg(series))
    ctx.write_text("timelines.svg", timelines_svg(series))
    return rep


def _train(ctx: Context, X, y, names, pids):
    c = ctx.cfg.classifier
    params = c.boost if ctx.seed is None else _with_seed(c.boost, ctx.seed)
    q = ctx.cfg.features.fdr_q
    report = cross_validate(X, y, params, c.folds, names, q)
    counts = np.bincount(y, minlength=3)
    if np.ceil(0.2 * len(y)) >= np.count_nonzero(counts) and counts[counts > 0].min() >= 2:
        report.holdout = holdout_protocol(X, y, params, c.folds, names, q).holdout
    else:
        log.warning("too few procedures for a 20% stratified holdout; reporting cross-validation only")
    trained = select_and_fit(X, y, names, params, q)
    trained.model.metadata.update({"seed": params.seed, "folds": c.folds, "config_hash": ctx.hash,
                                   "training_procedures": len(y)})
    with open(ctx.path("model.json"), "w", encoding="utf-8", newline="\n") as fh:
        save_model(fh, trained.model)
    with open(ctx.path("selection.json"), "w", encoding="utf-8", newline="\n") as fh:
        write_selection(fh, trained.selection, ctx.meta())
    ctx.write_json("cv_report.json", {"meta": ctx.meta(), "procedures": pids, **report.to_json()})
    table = report.table()
    if report.holdout is not None:
        table += "\n\n" + render_table(report.holdout, "Held-out 20% test split")
    ctx.write_text("cv_report.txt", table + "\n")
    return trained.model, report


def _with_seed(params, seed):
    return replace(params, seed=seed)


def _benchmark_matrix(ctx: Context, benchmark: str):
    sim = ctx.cfg.simulator
    seed = ctx.seed if ctx.seed is not None else 0
    sizes = "paper" if benchmark == "paper" else int(benchmark)
    procs = benchmark_suite(sizes, seed, sim.noise, sim.duration_s, sim.frame_rate, sim.archetype_spread)
    prior = default_prior(ctx.cfg.tip.prior_samples, ctx.cfg.tip.prior_seed)
    pids, X, y = feature_matrix(procs, prior, ctx.cfg)
    with open(ctx.path("benchmark_features.csv"), "w", encoding="utf-8", newline="\n") as fh:
        write_feature_matrix(fh, pids, [SkillCategory(v).label for v in y], X, FEATURE_NAMES,
                             ctx.comment(sim.frame_rate))
    return pids, X, y


# ---------------------------------------------------------------------------
# commands

def cmd_simulate(ctx: Context, args) -> None:
    sim = ctx.cfg.simulator
    noise = NoiseConfig.zero() if args.zero_noise else sim.noise
    arch = ARCHETYPES[SkillCategory.parse(args.archetype)]
    seed = ctx.seed if ctx.seed is not None else 0
    duration = args.duration if args.duration is not None else sim.duration_s
    gt, dets = generate(arch, noise, duration, sim.frame_rate, seed)
    with open(ctx.path("stream.jsonl"), "w", encoding="utf-8", newline="\n") as fh:
        write_detection_stream(fh, gt.header, dets, ctx.meta(gt.header.frame_rate))
    with open(ctx.path("ground_truth.json"), "w", encoding="utf-8", newline="\n") as fh:
        write_ground_truth(fh, gt)


def cmd_track(ctx: Context, args) -> None:
    header, dets = _read_stream(args.stream)
    _track(ctx, header, dets)


def cmd_tips(ctx: Context, args) -> None:
    header, dets = _read_stream(args.stream)
    with _open(args.tracks) as fh:
        tracks = read_tracks_csv(fh)
    _tips(ctx, header, fuse_stream(dets, ctx.cfg.fusion), tracks, _prior(ctx, args.prior))


def cmd_kinematics(ctx: Context, args) -> None:
    header, _ = _read_stream(args.stream)
    with _open(args.tips) as fh:
        tips = read_tips_csv(fh)
    _kinematics(ctx, header, tips)


def cmd_features(ctx: Context, args) -> None:
    with _open(args.kinematics) as fh:
        series = read_kinematics_csv(fh)
    fr = 1.0 / series[0].dt if series else None
    _features(ctx, series, args.procedure_id, fr)


def cmd_train(ctx: Context, args) -> None:
    if args.features:
        with _open(args.features) as fh:
            pids, labels, X, names = read_feature_matrix(fh)
        try:
            y = np.array([int(SkillCategory.parse(v)) for v in labels])
        except ValueError as exc:
            raise InputError(f"feature matrix labels: {exc}") from None
    else:
        pids, X, y = _benchmark_matrix(ctx, args.benchmark)
        names = list(FEATURE_NAMES)
    _, report = _train(ctx, X, y, names, pids)
    print(report.table())


def cmd_score(ctx: Context, args) -> None:
    with _open(args.features) as fh:
        text = fh.read()
    pids, _, X, names = read_feature_matrix(io.StringIO(text))
    if len(pids) != 1:
        raise InputError("score expects a feature file with exactly one procedure")
    m = re.search(r"^#.*\bframe_rate=([0-9.eE+-]+)", text, re.M)
    with _open(args.model) as fh:
        model = load_model(fh)
    score = _score(ctx, model, dict(zip(names, X[0].tolist())), float(m.group(1)) if m else None)
    print(score["category"])


def cmd_evaluate(ctx: Context, args) -> None:
    header, dets = _read_stream(args.stream)
    with _open(args.ground_truth) as fh:
        gt = read_ground_truth(fh)
    fused = fuse_stream(dets, ctx.cfg.fusion)
    if args.tracks:
        with _open(args.tracks) as fh:
            tracks = read_tracks_csv(fh)
    else:
        tracks = Tracker(ctx.cfg.tracker).run(fused, range(gt.n_frames))
    rep = evaluate(fused, gt.boxes, tracks, ctx.cfg.eval)
    ctx.write_json("evaluation.json", {"meta": ctx.meta(header.frame_rate), **rep.to_json()})
    ctx.write_text("evaluation.txt", rep.table() + "\n")
    print(rep.table())


def cmd_report(ctx: Context, args) -> None:
    with _open(args.score) as fh:
        score = json.load(fh)
    with _open(args.kinematics) as fh:
        series = read_kinematics_csv(fh)
    _report(ctx, score, series)


def cmd_pipeline(ctx: Context, args) -> None:
    header, dets = _read_stream(args.stream)
    if args.model:
        with _open(args.model) as fh:
            model = load_model(fh)
    else:
        log.warning("no --model given; training the default benchmark model")
        pids, X, y = _benchmark_matrix(ctx, "paper")
        model, _ = _train(ctx, X, y, list(FEATURE_NAMES), pids)
    fused, tracks = _track(ctx, header, dets)
    tips = _tips(ctx, header, fused, tracks, _prior(ctx, args.prior))
    series = _kinematics(ctx, header, tips)
    fv = _features(ctx, series, args.procedure_id, header.frame_rate)
    score = _score(ctx, model, fv.as_dict(), header.frame_rate)
    rep = _report(ctx, score, series)
    print(render_report(rep), end="")


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML configuration file")
    common.add_argument("--seed", type=int, default=None, help="random seed (simulation, training)")
    common.add_argument("--tau-merge", type=float, default=None, help="IoU threshold for duplicate fusion")
    common.add_argument("--out-dir", default=".", help="directory for output artifacts")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="microskill", description="Instrument tracking and skill assessment pipeline.")
    parser.add_argument("--version", action="version", version=f"microskill {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", parents=[common], help="generate a synthetic procedure")
    p.add_argument("--archetype", required=True, choices=["poor", "moderate", "good"])
    p.add_argument("--duration", type=float, default=None, help="seconds (default from config)")
    p.add_argument("--zero-noise", action="store_true", help="emit ground-truth boxes as detections")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("track", parents=[common], help="fuse and track a detection stream")
    p.add_argument("--stream", required=True)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("tips", parents=[common], help="localise instrument tips along tracks")
    p.add_argument("--stream", required=True)
    p.add_argument("--tracks", required=True)
    p.add_argument("--prior", help="shape prior JSON (default: learned from simulator templates)")
    p.set_defaults(func=cmd_tips)

    p = sub.add_parser("kinematics", parents=[common], help="tip paths to kinematic series")
    p.add_argument("--stream", required=True, help="stream the tips came from (frame rate)")
    p.add_argument("--tips", required=True)
    p.set_defaults(func=cmd_kinematics)

    p = sub.add_parser("features", parents=[common], help="kinematic series to a feature vector")
    p.add_argument("--kinematics", required=True)
    p.add_argument("--procedure-id", default="procedure")
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("train", parents=[common], help="cross-validate and fit a skill model")
    p.add_argument("--features", help="labelled feature matrix CSV (default: simulate a benchmark)")
    p.add_argument("--benchmark", default="paper", help="'paper' (28/16/14) or procedures per class")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", parents=[common], help="classify one procedure")
    p.add_argument("--features", required=True)
    p.add_argument("--model", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("evaluate", parents=[common], help="detection and tracking metrics vs ground truth")
    p.add_argument("--stream", required=True)
    p.add_argument("--ground-truth", required=True)
    p.add_argument("--tracks")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", parents=[common], help="procedure report and plots")
    p.add_argument("--score", required=True)
    p.add_argument("--kinematics", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("pipeline", parents=[common], help="fuse, track, tips, kinematics, features, score")
    p.add_argument("--stream", required=True)
    p.add_argument("--model", help="model JSON (default: train on the simulated benchmark)")
    p.add_argument("--prior")
    p.add_argument("--procedure-id", default="procedure")
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        ctx = Context(args)
        args.func(ctx, args)
    except (InputError, ConfigError, OSError, ValueError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"microskill {args.command}: error: {msg}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # anything else is a broken invariant inside the pipeline
        print(f"microskill {args.command}: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return 0


if __name__ == "__main__":
    sys.exit(main())
