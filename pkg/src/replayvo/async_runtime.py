"""Asynchronous predictor/learner split.

The predictor produces one pose estimate per gated frame with whatever
weights were last published and never waits for the learner.  The learner
takes the newest frame from a depth-1 mailbox (older unprocessed frames are
dropped and counted), runs one adaptation step, and publishes an immutable
weight snapshot every ``publish_every`` completed updates.

Two schedulers drive the workers: a deterministic simulated clock with
scripted learner costs (used by the tests) and real threads on the wall
clock.
"""

from __future__ import annotations

import heapq
import logging
import threading
import time
from dataclasses import dataclass, field
from typing import Callable

from . import autodiff as ad
from .adapter import AdapterState, FrameInput, GateState, adapt_on_frame, gate_frame, stamp
from .evaluation import TrajectoryRecord
from .geometry import Pose, chain_relative, se3_exp
from .model import Networks, pose_forward

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class WeightSnapshot:
    params: dict          # group name -> (trainable, tuple of read-only arrays)
    version: int


@dataclass
class AsyncConfig:
    publish_every: int = 1
    mailbox_depth: int = 1
    min_drive_dist: float = 0.2
    mode: str = "simulated"            # or "wallclock"
    learner_cost: float | Callable = 0.0   # simulated seconds per update, or f(step_index) -> seconds
    playback_rate: float = 0.0         # wall-clock: 0 = as fast as possible, 1 = real time

    def __post_init__(self):
        if self.publish_every < 1:
            raise ValueError("publish_every must be >= 1")
        if self.mailbox_depth != 1:
            raise ValueError("only a latest-wins mailbox of depth 1 is supported")
        if self.mode not in ("simulated", "wallclock"):
            raise ValueError(f"unknown mode {self.mode!r}")

    def cost(self, k: int) -> float:
        c = self.learner_cost(k) if callable(self.learner_cost) else self.learner_cost
        if c < 0:
            raise ValueError("learner cost must be non-negative")
        return float(c)


# -------------------------------------------------------- shared channels

class Mailbox:
    """Holds at most one frame; a newer frame overwrites (drops) the older."""

    def __init__(self):
        self._cond = threading.Condition()
        self._item = None
        self._closed = False
        self.dropped = 0
        self.posted = 0

    def put(self, item) -> None:
        with self._cond:
            if self._item is not None:
                self.dropped += 1
            self._item = item
            self.posted += 1
            self._cond.notify_all()

    def take(self, block: bool = False, timeout: float | None = None):
        with self._cond:
            if block:
                self._cond.wait_for(lambda: self._item is not None or self._closed, timeout)
            item, self._item = self._item, None
            return item

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    @property
    def closed(self) -> bool:
        return self._closed

    def discard(self) -> int:
        """Drop whatever is still waiting (end of stream)."""
        with self._cond:
            n = int(self._item is not None)
            self.dropped += n
            self._item = None
            return n


class SnapshotCell:
    """Atomically swappable reference to the latest :class:`WeightSnapshot`."""

    def __init__(self, initial: WeightSnapshot):
        self._lock = threading.Lock()
        self._snap = initial

    def get(self) -> WeightSnapshot:
        with self._lock:
            return self._snap

    def publish(self, snap: WeightSnapshot) -> None:
        with self._lock:
            if snap.version <= self._snap.version:
                raise ValueError("snapshot versions must increase")
            self._snap = snap


# ------------------------------------------------------------ the workers

class NetworkPredictor:
    """Forward-only pose estimation with a private copy of the networks."""

    def __init__(self, nets: Networks):
        self.nets = nets
        self.version = None

    def load(self, snap: WeightSnapshot) -> None:
        if snap.version != self.version:
            ad.restore(self.nets.param_groups(), snap.params)
            self.version = snap.version

    def estimate(self, prev: FrameInput, cur: FrameInput) -> Pose:
        return se3_exp(pose_forward(self.nets.pose, prev.image, cur.image))


class AdapterLearner:
    """Wraps an :class:`AdapterState`; one ``step`` is one ``adapt_on_frame``."""

    def __init__(self, state: AdapterState):
        self.state = state
        self.reports = []

    def step(self, frame: FrameInput) -> bool:
        """Returns whether the weights were updated."""
        rep = adapt_on_frame(self.state, frame)
        self.reports.append(rep)
        return bool(rep.loss_trace) or rep.rolled_back

    def snapshot(self) -> dict:
        return ad.snapshot(self.state.nets.param_groups())


@dataclass
class PredictorOutput:
    timestamp: float
    vo: Pose | None
    weights_version: int


@dataclass
class AsyncResult:
    trajectory: TrajectoryRecord
    outputs: list                     # PredictorOutput per gated frame
    drop_count: int
    publications: list                # published WeightSnapshot in order
    updates: int
    processed: list                   # timestamps the learner adapted on
    gated: int
    final: WeightSnapshot | None = None
    errors: list = field(default_factory=list)


class _Runtime:
    def __init__(self, predictor, learner, cfg: AsyncConfig, initial: dict):
        self.predictor = predictor
        self.learner = learner
        self.cfg = cfg
        self.cell = SnapshotCell(WeightSnapshot(initial, 0))
        self.mailbox = Mailbox()
        self.publications = []
        self.updates = 0
        self.since_publish = 0
        self.processed = []
        self.errors = []
        self.outputs = []
        self.prev = None

    def predictor_submit(self, f: FrameInput) -> PredictorOutput:
        snap = self.cell.get()          # one version per estimate
        vo = None
        if self.prev is not None:
            self.predictor.load(snap)
            vo = self.predictor.estimate(self.prev, f)
        self.prev = f
        out = PredictorOutput(f.timestamp, vo, snap.version)
        self.outputs.append(out)
        self.mailbox.put(f)
        return out

    def learner_run(self, f: FrameInput):
        """One learner step; returns the snapshot to publish, if any."""
        try:
            updated = self.learner.step(f)
        except Exception as exc:          # log, skip, continue
            log.warning("learner step failed at t=%.3f: %s", f.timestamp, exc)
            self.errors.append(f"{f.timestamp}: {exc}")
            return None
        self.processed.append(f.timestamp)
        if not updated:
            return None
        self.updates += 1
        self.since_publish += 1
        if self.since_publish >= self.cfg.publish_every:
            self.since_publish = 0
            return WeightSnapshot(self.learner.snapshot(), len(self.publications) + 1)
        return None

    def publish(self, snap) -> None:
        if snap is not None:
            self.cell.publish(snap)
            self.publications.append(snap)


def _gated(stream, min_drive_dist: float):
    gate = GateState(min_drive_dist)
    for f in stream:
        if gate_frame(gate, f):
            yield stamp(gate, f)


def _run_simulated(rt: _Runtime, frames: list) -> None:
    # events: (time, kind, seq, payload); completions (kind 0) precede arrivals (kind 1)
    events = [(f.timestamp, 1, i, f) for i, f in enumerate(frames)]
    heapq.heapify(events)
    busy = False
    seq = len(frames)
    k = 0

    def start(now):
        nonlocal busy, seq, k
        f = rt.mailbox.take()
        if f is None:
            busy = False
            return
        busy = True
        snap = rt.learner_run(f)
        heapq.heappush(events, (now + rt.cfg.cost(k), 0, seq, snap))
        seq += 1
        k += 1

    while events:
        now, kind, _, payload = heapq.heappop(events)
        if kind == 0:
            rt.publish(payload)
            start(now)
        else:
            rt.predictor_submit(payload)
            if not busy:
                start(now)
    rt.mailbox.discard()


def _run_wallclock(rt: _Runtime, frames: list) -> None:
    def learner():
        while True:
            f = rt.mailbox.take(block=True)
            if f is None:
                if rt.mailbox.closed:
                    return
                continue
            rt.publish(rt.learner_run(f))

    worker = threading.Thread(target=learner, name="learner", daemon=True)
    worker.start()
    t0 = time.perf_counter()
    for f in frames:
        if rt.cfg.playback_rate > 0:
            delay = (f.timestamp - frames[0].timestamp) / rt.cfg.playback_rate - (time.perf_counter() - t0)
            if delay > 0:
                time.sleep(delay)
        rt.predictor_submit(f)
    # stop accepting work; the in-flight step finishes, anything still queued is dropped
    rt.mailbox.discard()
    rt.mailbox.close()
    worker.join()


def run_async(stream, cfg: AsyncConfig, predictor, learner, initial: dict | None = None) -> AsyncResult:
    """Drive predictor and learner over a frame stream to its end.

    ``initial`` is the parameter snapshot published as version 0 (defaults
    to the learner's current weights).
    """
    frames = list(_gated(stream, cfg.min_drive_dist))
    rt = _Runtime(predictor, learner, cfg, learner.snapshot() if initial is None else initial)
    if cfg.mode == "simulated":
        _run_simulated(rt, frames)
    else:
        _run_wallclock(rt, frames)
    vo = [o for o in rt.outputs if o.vo is not None]
    if vo:
        traj = TrajectoryRecord([rt.outputs[0].timestamp] + [o.timestamp for o in vo],
                                chain_relative([o.vo for o in vo]))
    else:
        traj = TrajectoryRecord([], [])
    return AsyncResult(traj, rt.outputs, rt.mailbox.dropped, rt.publications, rt.updates,
                       rt.processed, len(frames), WeightSnapshot(learner.snapshot(), -1), rt.errors)


def run_async_adapter(stream, state: AdapterState, cfg: AsyncConfig = AsyncConfig()) -> AsyncResult:
    """Convenience wrapper: predictor with a private copy of ``state.nets``."""
    import copy

    pred_nets = copy.deepcopy(state.nets)
    return run_async(stream, cfg, NetworkPredictor(pred_nets), AdapterLearner(state))

