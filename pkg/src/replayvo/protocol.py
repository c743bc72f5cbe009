"""The source-to-target experiment: pretrain on A, adapt online on B, evaluate.

Shared by the command line and the behavioural tests.  Every sequence of a
world is derived from one integer seed; trajectory seeds are offset per role
so the held-out sequences never coincide with the ones trained on.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .adapter import AdapterConfig, AdapterState, frames_from_sequence, run_sync
from .evaluation import DEFAULT_SEGMENTS, SegmentErrors, evaluate_sequence
from .geometry import Camera
from .model import Networks
from .synthetic import DomainSpec, Sequence, domain_trajectory, make_domain_pair, render_sequence
from .training import PretrainConfig, pretrain

log = logging.getLogger(__name__)

# trajectory seed offsets per sequence role
SOURCE, TARGET, HELDOUT_A, HELDOUT_B = 1000, 2000, 3000, 4000


@dataclass
class World:
    seed: int
    domain_a: DomainSpec
    domain_b: DomainSpec
    source: Sequence
    target: Sequence
    heldout_a: Sequence
    heldout_b: Sequence


def build_world(seed: int, source_frames: int = 300, target_frames: int = 300,
                eval_frames: int = 300, dt: float = 0.1, cam: Camera | None = None) -> World:
    cam = cam if cam is not None else Camera.default()
    a, b = make_domain_pair(seed)

    def render(dom, n, offset):
        return render_sequence(dom, domain_trajectory(dom, n, offset + seed, dt), cam)

    return World(seed, a, b, render(a, source_frames, SOURCE), render(b, target_frames, TARGET),
                 render(a, eval_frames, HELDOUT_A), render(b, eval_frames, HELDOUT_B))


def _cache_key(world: World, cfg: PretrainConfig) -> str:
    blob = json.dumps({"domain": world.domain_a.to_dict(), "frames": len(world.source),
                       "traj": world.source.meta, "cam": dataclasses.asdict(world.source.camera),
                       "cfg": dataclasses.asdict(cfg)}, sort_keys=True)
    return hashlib.sha1(blob.encode()).hexdigest()[:16]


def pretrained_snapshot(world: World, cfg: PretrainConfig | None = None, cache_dir: str | None = None) -> dict:
    """Weights after offline training on the source sequence.

    With ``cache_dir`` the checkpoint is stored under a key derived from the
    source data and the schedule and reused on later calls.
    """
    cfg = cfg if cfg is not None else PretrainConfig(seed=world.seed)
    path = None
    if cache_dir is not None:
        os.makedirs(cache_dir, exist_ok=True)
        path = os.path.join(cache_dir, f"pretrained-{world.seed}-{_cache_key(world, cfg)}.rvck")
        if os.path.exists(path):
            return ad.load_checkpoint(path)
    cam = world.source.camera
    nets = Networks.create((cam.height, cam.width), world.seed)
    t0 = time.perf_counter()
    pretrain(nets, world.source, cfg)
    log.info("pretrained seed %d in %.1f s", world.seed, time.perf_counter() - t0)
    if path is not None:
        ad.save_checkpoint(path, nets.param_groups())
        return ad.load_checkpoint(path)
    # round through float32 like a stored checkpoint, so cached and fresh runs agree
    return ad.snapshot(nets.param_groups())


def networks_from(snapshot: dict, cam: Camera, seed: int = 0) -> Networks:
    nets = Networks.create((cam.height, cam.width), seed)
    ad.restore(nets.param_groups(), snapshot, trainable=True)
    return nets


def adapt(snapshot: dict, seq: Sequence, cfg: AdapterConfig) -> tuple:
    """Online adaptation of a fresh copy of ``snapshot`` over ``seq``.

    Returns ``(networks, adapter state, step reports)``.
    """
    nets = networks_from(snapshot, seq.camera)
    state = AdapterState.create(nets, seq.camera, cfg)
    reports = run_sync(state, frames_from_sequence(seq))
    return nets, state, reports


@dataclass
class RunResult:
    name: str
    target: SegmentErrors            # on held-out B
    source: SegmentErrors            # on held-out A
    buffer_size: int
    seconds: float


@dataclass
class ExperimentResult:
    seed: int
    unadapted_target: SegmentErrors
    unadapted_source: SegmentErrors
    runs: dict = field(default_factory=dict)     # name -> RunResult

    def summary(self) -> dict:
        out = {"seed": self.seed, "unadapted": {"B": self.unadapted_target.t_err,
                                                 "A": self.unadapted_source.t_err}}
        for name, r in self.runs.items():
            out[name] = {"B": r.target.t_err, "A": r.source.t_err, "buffer": r.buffer_size,
                         "seconds": round(r.seconds, 2)}
        return out


def run_experiment(seed: int, variants: dict, pretrain_cfg: PretrainConfig | None = None,
                   cache_dir: str | None = None, segment_lengths=DEFAULT_SEGMENTS,
                   world: World | None = None) -> ExperimentResult:
    """Pretrain (or load) the source model, then adapt once per named
    :class:`AdapterConfig` and evaluate every model on both held-out sequences."""
    world = world if world is not None else build_world(seed)
    snap = pretrained_snapshot(world, pretrain_cfg, cache_dir)
    base = networks_from(snap, world.source.camera)
    md = next(iter(variants.values())).min_drive_dist if variants else 0.2
    res = ExperimentResult(seed, evaluate_sequence(base.pose, world.heldout_b, segment_lengths, md),
                           evaluate_sequence(base.pose, world.heldout_a, segment_lengths, md))
    for name, cfg in variants.items():
        t0 = time.perf_counter()
        nets, state, _ = adapt(snap, world.target, cfg)
        secs = time.perf_counter() - t0
        res.runs[name] = RunResult(
            name,
            evaluate_sequence(nets.pose, world.heldout_b, segment_lengths, cfg.min_drive_dist),
            evaluate_sequence(nets.pose, world.heldout_a, segment_lengths, cfg.min_drive_dist),
            len(state.buffer), secs)
        log.info("seed %d %s: %s", seed, name, res.runs[name])
    return res


def median(values) -> float:
    return float(np.median(np.asarray(list(values), dtype=np.float64)))
