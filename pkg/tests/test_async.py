import threading
import time

import numpy as np
import pytest

from replayvo import autodiff as ad
from replayvo.adapter import AdapterConfig, AdapterState, FrameInput, frames_from_sequence, process_frame
from replayvo.async_runtime import (AsyncConfig, Mailbox, SnapshotCell, WeightSnapshot, run_async,
                                    run_async_adapter)
from replayvo.geometry import Camera, Pose
from replayvo.model import Networks
from replayvo.synthetic import domain_trajectory, make_domain_pair, render_sequence
from oracles import simulate_drops

CAM = Camera.default(32, 24, 30.0)


class StubLearner:
    """Counts steps; its 'weights' are arrays filled with the step count."""

    def __init__(self, n_arrays=4, size=64, jitter=0.0, seed=0, fail_at=()):
        self.k = 0
        self.params = [np.zeros(size) for _ in range(n_arrays)]
        self.seen = []
        self.jitter = jitter
        self.rng = np.random.default_rng(seed)
        self.fail_at = set(fail_at)
        self._lock = threading.Lock()

    def step(self, frame):
        if self.jitter:
            time.sleep(self.rng.uniform(0, self.jitter))
        if frame.timestamp in self.fail_at:
            raise RuntimeError("boom")
        with self._lock:
            self.k += 1
            for p in self.params:           # in-place, one array at a time
                p[:] = self.k
                if self.jitter:
                    time.sleep(0)
        self.seen.append(frame.timestamp)
        return True

    def snapshot(self):
        with self._lock:
            arrs = []
            for p in self.params:
                a = p.copy()
                a.setflags(write=False)
                arrs.append(a)
        return {"w": (True, tuple(arrs))}


class StubPredictor:
    def __init__(self, jitter=0.0, seed=1):
        self.versions = []
        self.torn = 0
        self.snap = None
        self.jitter = jitter
        self.rng = np.random.default_rng(seed)

    def load(self, snap):
        self.snap = snap

    def estimate(self, prev, cur):
        arrs = self.snap.params["w"][1]
        if self.jitter:
            time.sleep(self.rng.uniform(0, self.jitter))
        vals = {float(v) for a in arrs for v in np.unique(a)}
        if len(vals) != 1:
            self.torn += 1
        self.versions.append(self.snap.version)
        return Pose.identity()


def _stream(n, dt=0.1, speed=5.0):
    return [FrameInput(None, speed, k * dt) for k in range(n)]


# ----------------------------------------------------------------- channels

def test_mailbox_latest_wins():
    mb = Mailbox()
    assert mb.take() is None
    mb.put(1)
    mb.put(2)
    mb.put(3)
    assert mb.dropped == 2 and mb.take() == 3 and mb.take() is None
    mb.put(4)
    assert mb.discard() == 1 and mb.dropped == 3
    mb.close()
    assert mb.take(block=True, timeout=0.1) is None


def test_snapshot_cell_versions_increase():
    cell = SnapshotCell(WeightSnapshot({}, 0))
    cell.publish(WeightSnapshot({}, 1))
    with pytest.raises(ValueError):
        cell.publish(WeightSnapshot({}, 1))
    assert cell.get().version == 1


def test_async_config_validation():
    with pytest.raises(ValueError):
        AsyncConfig(publish_every=0)
    with pytest.raises(ValueError):
        AsyncConfig(mailbox_depth=2)
    with pytest.raises(ValueError):
        AsyncConfig(mode="fast")
    with pytest.raises(ValueError):
        AsyncConfig(learner_cost=-1.0).cost(0)


# --------------------------------------------------------- simulated clock

def test_drop_oracle_hand_case():
    # frames at t = 0, 1, 2, ...; each step costs 3. Frame 1 is overwritten by
    # frame 2, which starts at t = 3 when frame 0 finishes (completion before
    # the arrival of frame 3), and so on.
    processed, drops = simulate_drops([float(k) for k in range(30)], lambda k: 3.0)
    assert processed == [0, 2, 5, 8, 11, 14, 17, 20, 23, 26, 29]
    assert drops == 19
    res = run_async([FrameInput(None, 1.0, float(k)) for k in range(30)],
                    AsyncConfig(min_drive_dist=0.0, learner_cost=3.0), StubPredictor(), StubLearner())
    assert res.processed == [float(i) for i in processed] and res.drop_count == 19


@pytest.mark.parametrize("periods", [0.0, 0.5, 1.0, 2.5, 3.0, 7.0])
def test_simulated_drops_match_oracle(periods):
    n, dt = 300, 0.1
    cfg = AsyncConfig(min_drive_dist=0.0, learner_cost=periods * dt)
    learner = StubLearner()
    res = run_async(_stream(n, dt), cfg, StubPredictor(), learner)
    arrivals = [k * dt for k in range(n)]
    processed, drops = simulate_drops(arrivals, lambda k: periods * dt)
    assert res.drop_count == drops
    assert res.processed == [arrivals[i] for i in processed]
    assert len(res.outputs) == n and all(o.vo is not None for o in res.outputs[1:])
    assert res.updates + res.drop_count == n


def test_simulated_variable_costs_match_oracle():
    rng = np.random.default_rng(0)
    costs = rng.uniform(0, 0.5, size=400)
    arrivals = list(np.cumsum(rng.uniform(0.01, 0.2, size=300)))
    frames = [FrameInput(None, 10.0, t) for t in arrivals]
    cfg = AsyncConfig(min_drive_dist=0.0, learner_cost=lambda k: costs[k])
    res = run_async(frames, cfg, StubPredictor(), StubLearner())
    processed, drops = simulate_drops(arrivals, lambda k: costs[k])
    assert res.drop_count == drops and len(res.processed) == len(processed)


@pytest.mark.parametrize("k", [1, 2, 3, 7])
def test_publication_every_k_updates(k):
    cfg = AsyncConfig(publish_every=k, min_drive_dist=0.0)
    learner = StubLearner()
    res = run_async(_stream(50), cfg, StubPredictor(), learner)
    assert res.updates == 50
    assert len(res.publications) == 50 // k
    assert [p.version for p in res.publications] == list(range(1, 50 // k + 1))
    for p in res.publications:
        assert float(p.params["w"][1][0][0]) == p.version * k
    assert res.final.version == -1 and float(res.final.params["w"][1][0][0]) == 50


def test_versions_seen_by_predictor_are_monotone():
    cfg = AsyncConfig(min_drive_dist=0.0, learner_cost=0.25)
    pred = StubPredictor()
    res = run_async(_stream(100), cfg, pred, StubLearner())
    v = [o.weights_version for o in res.outputs]
    assert v == sorted(v) and v[0] == 0 and v[-1] >= 1


def test_learner_failure_is_logged_and_skipped():
    cfg = AsyncConfig(min_drive_dist=0.0)
    learner = StubLearner(fail_at={0.5})
    res = run_async(_stream(10), cfg, StubPredictor(), learner)
    assert len(res.errors) == 1 and res.updates == 9
    assert len(res.outputs) == 10


def test_gating_applies_before_the_predictor():
    cfg = AsyncConfig(min_drive_dist=1.0)
    res = run_async(_stream(20, speed=5.0), cfg, StubPredictor(), StubLearner())
    assert res.gated == 10 and len(res.outputs) == 10


# --------------------------------------------------------------- wall clock

def test_wallclock_stress_no_torn_reads():
    n = 10_000
    cfg = AsyncConfig(min_drive_dist=0.0, mode="wallclock")
    pred = StubPredictor(jitter=2e-5, seed=3)
    learner = StubLearner(jitter=2e-4, seed=4)
    res = run_async(_stream(n, dt=0.01), cfg, pred, learner)
    assert pred.torn == 0
    v = [o.weights_version for o in res.outputs]
    assert all(a <= b for a, b in zip(v, v[1:]))
    assert len(res.outputs) == n
    assert res.updates + res.drop_count == n
    assert [p.version for p in res.publications] == list(range(1, len(res.publications) + 1))


def test_wallclock_real_time_playback_finishes():
    cfg = AsyncConfig(min_drive_dist=0.0, mode="wallclock", playback_rate=50.0)
    res = run_async(_stream(20), cfg, StubPredictor(), StubLearner(jitter=1e-3))
    assert len(res.outputs) == 20 and res.updates >= 1


# ------------------------------------------------------- with the adapter

@pytest.fixture(scope="module")
def small_seq():
    a, _ = make_domain_pair(1)
    return render_sequence(a, domain_trajectory(a, 14, 2), CAM)


def test_instant_learner_matches_sync_adapter(small_seq):
    cfg = AdapterConfig(cycles=2, seed=5)
    frames = frames_from_sequence(small_seq)

    sync_state = AdapterState.create(Networks.create((24, 32), 0), CAM, cfg)
    sync_snaps = []
    for f in frames:
        rep = process_frame(sync_state, f)
        if rep.loss_trace:
            sync_snaps.append(ad.snapshot(sync_state.nets.param_groups()))

    async_state = AdapterState.create(Networks.create((24, 32), 0), CAM, cfg)
    res = run_async_adapter(frames, async_state, AsyncConfig(min_drive_dist=cfg.min_drive_dist))
    assert len(res.publications) == len(sync_snaps) > 0
    for pub, ref in zip(res.publications, sync_snaps):
        for name in ref:
            for a, b in zip(pub.params[name][1], ref[name][1]):
                np.testing.assert_array_equal(a, b)
