"""Command line: ``replayvo {gen,pretrain,adapt,adapt-async,eval,plot}``.

Failures print one JSON line ``{"error": <kind>, "message": <text>}`` on
stderr and exit with status 2 (usage) or 1 (everything else).
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys

from . import autodiff as ad
from .adapter import (AdapterConfig, AdapterState, AugmentRanges, begin_sequence,
                      frames_from_sequence, process_frame)
from .async_runtime import AdapterLearner, AsyncConfig, NetworkPredictor, run_async
from .evaluation import (Protocol, Revisit, aq_rq, estimate_trajectory,
                         forgetting_matrix, kitti_errors)
from .io import FormatError, RunConfig, load_config, load_sequence, save_config, save_sequence, write_poses
from .losses import LossWeights
from .model import Networks
from .protocol import build_world
from .replay_buffer import save_buffer
from .training import PretrainConfig, pretrain

log = logging.getLogger("replayvo")


class CliError(Exception):
    def __init__(self, kind: str, message: str, status: int = 1):
        super().__init__(message)
        self.kind = kind
        self.status = status


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message, 2)


# ---------------------------------------------------------------- helpers

def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig().validate()
    if args.seed is not None:
        cfg.run.seed = args.seed
    return cfg


def _adapter_config(cfg: RunConfig, replay_n: int | None = None) -> AdapterConfig:
    a = cfg.adapter
    return AdapterConfig(
        replay_n=a.replay_n if replay_n is None else replay_n, cycles=a.cycles,
        min_drive_dist=a.min_drive_dist, weights=LossWeights(cfg.loss.gamma, cfg.loss.lam),
        augment=AugmentRanges() if a.augment else AugmentRanges.identity(), lr=a.lr,
        capacity=cfg.buffer.capacity, threshold=cfg.buffer.threshold, seed=cfg.run.seed)


def _networks(path: str, cam) -> Networks:
    if not os.path.exists(path):
        raise CliError("missing-file", f"checkpoint {path} not found")
    nets = Networks.create((cam.height, cam.width), 0)
    try:
        ad.restore(nets.param_groups(), ad.load_checkpoint(path), trainable=True)
    except (ValueError, KeyError) as exc:
        raise CliError("bad-checkpoint", f"{path}: {exc}") from None
    return nets


def _sequence(path: str):
    if not os.path.isdir(path):
        raise CliError("missing-file", f"sequence directory {path} not found")
    return load_sequence(path)


def _named(items, what: str) -> list:
    out = []
    for it in items or []:
        if "=" not in it:
            raise CliError("usage", f"{what} must be given as NAME=PATH, got {it!r}", 2)
        name, path = it.split("=", 1)
        out.append((name, path))
    return out


def _write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


# ----------------------------------------------------------- subcommands

def cmd_gen(args, cfg: RunConfig) -> None:
    s = cfg.synthetic
    world = build_world(cfg.run.seed, s.source_frames, s.target_frames, s.eval_frames, s.dt,
                        cfg.camera_model())
    os.makedirs(args.out, exist_ok=True)
    for name in ("source", "target", "heldout_a", "heldout_b"):
        save_sequence(getattr(world, name), os.path.join(args.out, name))
    save_config(cfg, os.path.join(args.out, "config.ini"))
    print(json.dumps({"out": args.out, "sequences": ["source", "target", "heldout_a", "heldout_b"]}))


def cmd_pretrain(args, cfg: RunConfig) -> None:
    seq = _sequence(args.data)
    p = cfg.pretrain
    pcfg = PretrainConfig(p.epochs, p.batch_size, p.lr, p.lr_final, p.rotation_warmup, cfg.run.seed)
    nets = Networks.create((seq.camera.height, seq.camera.width), cfg.run.seed)
    history = pretrain(nets, seq, pcfg, LossWeights(cfg.loss.gamma, cfg.loss.lam))
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    ad.save_checkpoint(args.out, nets.param_groups())
    print(json.dumps({"checkpoint": args.out, "epoch_loss": history}))


def cmd_adapt(args, cfg: RunConfig) -> None:
    seqs = _named(args.sequence, "--sequence")
    if not seqs:
        raise CliError("usage", "at least one --sequence NAME=DIR is required", 2)
    loaded = [(name, _sequence(path)) for name, path in seqs]
    cam = loaded[0][1].camera
    nets = _networks(args.checkpoint, cam)
    acfg = _adapter_config(cfg, 0 if args.no_replay else None)
    state = AdapterState.create(nets, cam, acfg)
    os.makedirs(args.out, exist_ok=True)
    lineage = [{"step": "source", "checkpoint": os.path.abspath(args.checkpoint), "sequence": None}]
    for k, (name, seq) in enumerate(loaded, 1):
        begin_sequence(state)
        acfg.domain_tag = name
        with open(os.path.join(args.out, f"log_{k:02d}_{name}.jsonl"), "w") as fh:
            for f in frames_from_sequence(seq):
                rep = process_frame(state, f)
                if rep.accepted:
                    fh.write(rep.to_json() + "\n")
        ck = os.path.join(args.out, f"step_{k:02d}_{name}.rvck")
        ad.save_checkpoint(ck, nets.param_groups())
        lineage.append({"step": f"{k:02d}_{name}", "checkpoint": os.path.abspath(ck), "sequence": name})
    save_buffer(state.buffer, os.path.join(args.out, "buffer"))
    run = {"replay_n": acfg.replay_n, "cycles": acfg.cycles, "seed": cfg.run.seed, "steps": lineage}
    _write_json(os.path.join(args.out, "run.json"), run)
    save_config(cfg, os.path.join(args.out, "config.ini"))
    print(json.dumps({"out": args.out, "steps": [s["step"] for s in lineage]}))


def cmd_adapt_async(args, cfg: RunConfig) -> None:
    seq = _sequence(args.sequence)
    nets = _networks(args.checkpoint, seq.camera)
    state = AdapterState.create(nets, seq.camera, _adapter_config(cfg))
    a = cfg.async_
    mode = args.mode or a.mode
    acfg = AsyncConfig(publish_every=a.publish_every, min_drive_dist=cfg.adapter.min_drive_dist, mode=mode,
                       learner_cost=a.learner_cost, playback_rate=a.playback_rate)
    learner = AdapterLearner(state)
    res = run_async(frames_from_sequence(seq), acfg, NetworkPredictor(copy.deepcopy(nets)), learner)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "predictions.jsonl"), "w") as fh:
        for o in res.outputs:
            fh.write(json.dumps({"timestamp": o.timestamp, "weights_version": o.weights_version,
                                 "pose": None if o.vo is None else [float(x) for x in o.vo.row34()]}) + "\n")
    with open(os.path.join(args.out, "learner.jsonl"), "w") as fh:
        for rep in learner.reports:
            fh.write(rep.to_json() + "\n")
    write_poses(os.path.join(args.out, "poses_est.txt"), res.trajectory.poses)
    ad.save_checkpoint(os.path.join(args.out, "final.rvck"), res.final.params)
    summary = {"mode": mode, "gated_frames": res.gated, "estimates": len(res.outputs),
               "drop_count": res.drop_count, "updates": res.updates,
               "publications": len(res.publications), "errors": res.errors}
    _write_json(os.path.join(args.out, "summary.json"), summary)
    print(json.dumps(summary))


def _eval_inputs(args):
    if args.run:
        with open(os.path.join(args.run, "run.json")) as fh:
            run = json.load(fh)
        checkpoints = [(s["step"], s["checkpoint"]) for s in run["steps"]]
        current = {s["step"]: s["sequence"] for s in run["steps"] if s["sequence"]}
    else:
        checkpoints = _named(args.checkpoint, "--checkpoint")
        current = {}
    if not checkpoints:
        raise CliError("usage", "give --run DIR or at least one --checkpoint NAME=PATH", 2)
    seqs = _named(args.sequence, "--sequence")
    if not seqs:
        raise CliError("usage", "at least one --sequence NAME=DIR is required", 2)
    return checkpoints, current, [(n, _sequence(p)) for n, p in seqs]


def cmd_eval(args, cfg: RunConfig) -> None:
    from .plotting import plot_error_matrix, plot_trajectories

    checkpoints, current, seqs = _eval_inputs(args)
    cam = seqs[0][1].camera
    segs = tuple(cfg.evaluation.segment_lengths)
    md = cfg.adapter.min_drive_dist
    trajs = {name: {} for name, _ in seqs}

    def evaluate(path, item):
        name, seq = item
        nets = _networks(path, cam)
        est, gt = estimate_trajectory(nets.pose, seq, md)
        trajs[name].setdefault("ground truth", gt)
        trajs[name][label_of[path]] = est
        return kitti_errors(gt, est, segs, cfg.evaluation.step)

    label_of = {p: lbl for lbl, p in checkpoints}
    report = forgetting_matrix(checkpoints, {n: (n, s) for n, s in seqs}, evaluate)
    report.current = current
    first = [tuple(x.split("=", 1)) for x in args.first_visit or []]
    revisits = []
    for x in args.revisit or []:
        try:
            seq, rest = x.split("=", 1)
            w, wo = rest.split(",")
        except ValueError:
            raise CliError("usage", f"--revisit must be SEQ=WITH,WITHOUT, got {x!r}", 2) from None
        revisits.append(Revisit(seq, w, wo))
    if first or revisits:
        report.scores = aq_rq(report, Protocol(tuple(first), tuple(revisits), checkpoints[0][0]))
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "report.csv"), "w") as fh:
        fh.write(report.to_csv())
    _write_json(os.path.join(args.out, "report.json"), report.to_json())
    fmt = args.format
    plot_error_matrix(os.path.join(args.out, f"t_err.{fmt}"), report, "t_err")
    for name, tr in trajs.items():
        plot_trajectories(os.path.join(args.out, f"trajectory_{name}.{fmt}"), tr, name)
    print(json.dumps({"out": args.out, "t_err": report.matrix().round(4).tolist(), "scores": report.scores}))


def cmd_plot(args, cfg: RunConfig) -> None:
    from .adapter import StepReport
    from .plotting import plot_loss_traces, plot_trajectories

    os.makedirs(args.out, exist_ok=True)
    fmt = args.format
    written = []
    if args.sequence:
        seq = _sequence(args.sequence)
        trajs = {}
        for label, path in _named(args.checkpoint, "--checkpoint"):
            est, gt = estimate_trajectory(_networks(path, seq.camera).pose, seq, cfg.adapter.min_drive_dist)
            trajs.setdefault("ground truth", gt)
            trajs[label] = est
        if not trajs:
            raise CliError("usage", "--sequence needs at least one --checkpoint NAME=PATH", 2)
        with open(os.path.join(args.out, "trajectories.csv"), "w") as fh:
            fh.write("name,timestamp,x,y,z\n")
            for label, tr in trajs.items():
                for t, p in zip(tr.timestamps, tr.poses):
                    x, y, z = p.translation
                    fh.write(f"{label},{t:.6f},{x:.9f},{y:.9f},{z:.9f}\n")
        out = os.path.join(args.out, f"trajectories.{fmt}")
        plot_trajectories(out, trajs)
        written += ["trajectories.csv", os.path.basename(out)]
    for path in args.log or []:
        reports = []
        with open(path) as fh:
            for line in fh:
                d = json.loads(line)
                reports.append(StepReport(d["timestamp"], d["accepted"], loss_trace=d["loss_trace"]))
        stem = os.path.splitext(os.path.basename(path))[0]
        with open(os.path.join(args.out, f"loss_{stem}.csv"), "w") as fh:
            fh.write("timestamp,first,last\n")
            for r in reports:
                if r.loss_trace:
                    fh.write(f"{r.timestamp:.6f},{r.loss_trace[0]:.9g},{r.loss_trace[-1]:.9g}\n")
        plot_loss_traces(os.path.join(args.out, f"loss_{stem}.{fmt}"), reports, stem)
        written += [f"loss_{stem}.csv", f"loss_{stem}.{fmt}"]
    if not written:
        raise CliError("usage", "nothing to plot: give --sequence/--checkpoint and/or --log", 2)
    print(json.dumps({"out": args.out, "files": written}))


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="replayvo", description="Online continual visual-inertial odometry toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="run configuration file (INI)")
        sp.add_argument("--seed", type=int, help="overrides [run] seed")
        return sp

    sp = add("gen", "render the synthetic source/target sequences")
    sp.add_argument("--out", required=True)
    sp = add("pretrain", "offline training on a source sequence")
    sp.add_argument("--data", required=True, help="sequence directory")
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp = add("adapt", "synchronous online adaptation over sequences in order")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--sequence", action="append", help="NAME=DIR, repeatable, in adaptation order")
    sp.add_argument("--out", required=True)
    sp.add_argument("--no-replay", action="store_true", help="adapt with N = 0")
    sp = add("adapt-async", "asynchronous predictor/learner run on one sequence")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--sequence", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--mode", choices=("simulated", "wallclock"))
    sp = add("eval", "segment errors, forgetting matrix and AQ/RQ")
    sp.add_argument("--run", help="adapt output directory (uses its checkpoint lineage)")
    sp.add_argument("--checkpoint", action="append", help="NAME=PATH, repeatable; first is the source model")
    sp.add_argument("--sequence", action="append", help="NAME=DIR, repeatable")
    sp.add_argument("--first-visit", action="append", help="SEQ=STEP cell for AQ")
    sp.add_argument("--revisit", action="append", help="SEQ=WITH,WITHOUT step labels for RQ")
    sp.add_argument("--out", required=True)
    sp.add_argument("--format", choices=("svg", "png"), default="svg")
    sp = add("plot", "trajectory and loss-trace figures with CSV data")
    sp.add_argument("--sequence")
    sp.add_argument("--checkpoint", action="append", help="NAME=PATH")
    sp.add_argument("--log", action="append", help="per-step JSONL log from adapt")
    sp.add_argument("--out", required=True)
    sp.add_argument("--format", choices=("svg", "png"), default="svg")
    return p


COMMANDS = {"gen": cmd_gen, "pretrain": cmd_pretrain, "adapt": cmd_adapt, "adapt-async": cmd_adapt_async,
            "eval": cmd_eval, "plot": cmd_plot}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise CliError("usage", "missing subcommand (one of: " + ", ".join(COMMANDS) + ")", 2)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        COMMANDS[args.command](args, _config(args))
        return 0
    except CliError as exc:
        err = (exc.kind, str(exc), exc.status)
    except FormatError as exc:
        err = ("invalid-input", str(exc), 1)
    except (OSError, ValueError) as exc:
        err = (type(exc).__name__, str(exc), 1)
    print(json.dumps({"error": err[0], "message": err[1].replace("\n", " ")}), file=sys.stderr)
    return err[2]


if __name__ == "__main__":
    sys.exit(main())
