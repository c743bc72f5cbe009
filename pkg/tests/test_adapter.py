import json

import numpy as np
import pytest

from replayvo import autodiff as ad
from replayvo.adapter import (AdapterConfig, AdapterState, AugmentRanges, FrameInput, GateState,
                              adapt_on_frame, augment_replay, begin_sequence, build_batch,
                              frames_from_sequence, gate_frame, jitter, process_frame, run_sync, stamp)
from replayvo.geometry import Camera
from replayvo.model import Networks, extract_feature
from replayvo.replay_buffer import Buffer, ReplaySample, maybe_add
from replayvo.synthetic import domain_trajectory, make_domain_pair, render_sequence
from replayvo.training import TripletBatchItem

CAM = Camera.default(32, 24, 30.0)


@pytest.fixture(scope="module")
def small_seq():
    a, _ = make_domain_pair(0)
    return render_sequence(a, domain_trajectory(a, 12, 5), CAM)


def _state(cfg=None, seed=0):
    nets = Networks.create((24, 32), seed)
    return AdapterState.create(nets, CAM, cfg or AdapterConfig())


def _frames(speeds, dt=0.1):
    return [FrameInput(None, s, k * dt) for k, s in enumerate(speeds)]


# --------------------------------------------------------------------- gate

def test_gate_accepts_every_other_frame_at_one_mps():
    g = GateState(0.2)
    got = [gate_frame(g, f) for f in _frames([1.0] * 7)]
    assert got == [True, False, True, False, True, False, True]


def test_gate_first_frame_and_stationary():
    g = GateState(0.2)
    got = [gate_frame(g, f) for f in _frames([0.0] * 5)]
    assert got == [True, False, False, False, False]


def test_gate_integrates_previous_speed():
    g = GateState(0.2)
    # 3 m/s for 0.1 s covers 0.3 m: the second frame passes
    assert [gate_frame(g, f) for f in _frames([3.0, 0.0, 0.0])] == [True, True, False]
    assert g.odometer == pytest.approx(0.3)


def test_gate_zero_distance_accepts_all():
    g = GateState(0.0)
    assert all(gate_frame(g, f) for f in _frames([0.0, 0.0, 1.0]))


def test_gate_rejects_bad_input():
    g = GateState(0.2)
    gate_frame(g, FrameInput(None, 1.0, 0.5))
    with pytest.raises(ValueError, match="non-monotone"):
        gate_frame(g, FrameInput(None, 1.0, 0.5))
    with pytest.raises(ValueError):
        gate_frame(g, FrameInput(None, -1.0, 0.6))


def test_stamp_records_odometer():
    g = GateState(0.2)
    out = []
    for f in _frames([2.5] * 4):
        if gate_frame(g, f):
            out.append(stamp(g, f).odometer)
    assert out == pytest.approx([0.0, 0.25, 0.5, 0.75])


# ------------------------------------------------------------- augmentation

def _triplet(seed=0):
    rng = np.random.default_rng(seed)
    imgs = (np.round(rng.uniform(0.2, 0.8, size=(3, 24, 32, 3)) * 255) / 255).astype(np.float32)
    return TripletBatchItem(imgs, (2.0, 2.0), (0.1, 0.1))


def test_identity_jitter_is_bit_exact():
    t = _triplet()
    np.testing.assert_array_equal(jitter(t.images, 1.0, 1.0, 1.0, 0.0), t.images)
    out = augment_replay(t, np.random.default_rng(0), AugmentRanges.identity())
    np.testing.assert_array_equal(out.images, t.images)


def test_jitter_values():
    img = np.full((2, 2, 3), 0.4, dtype=np.float32)
    np.testing.assert_allclose(jitter(img, 1.5, 1.0, 1.0, 0.0), 0.6, rtol=1e-6)
    np.testing.assert_allclose(jitter(img, 3.0, 1.0, 1.0, 0.0), 1.0)
    # contrast of a flat image is a no-op; saturation of a gray image too
    np.testing.assert_allclose(jitter(img, 1.0, 1.7, 0.3, 0.0), img, atol=1e-7)
    red = np.zeros((1, 1, 3), dtype=np.float32)
    red[..., 0] = 1.0
    shifted = jitter(red, 1.0, 1.0, 1.0, 1 / 3)
    np.testing.assert_allclose(shifted[0, 0], [0.0, 1.0, 0.0], atol=1e-6)


def test_augmentation_is_shared_across_triplet_and_in_range():
    t = _triplet(1)
    same = TripletBatchItem(np.stack([t.images[0]] * 3), t.speeds, t.dt)
    out = augment_replay(same, np.random.default_rng(4))
    np.testing.assert_array_equal(out.images[0], out.images[1])
    np.testing.assert_array_equal(out.images[0], out.images[2])
    assert out.images.min() >= 0 and out.images.max() <= 1
    assert out.speeds == same.speeds and out.dt == same.dt
    assert not np.array_equal(out.images, same.images)


def test_augment_ranges_validation():
    with pytest.raises(ValueError):
        AugmentRanges(brightness=(1.2, 0.8))
    with pytest.raises(ValueError):
        AugmentRanges(hue=(-0.7, 0.0))


def test_build_batch_contents():
    buf = Buffer(10, 0.99)
    for k, f in enumerate(np.eye(4)):
        maybe_add(buf, ReplaySample(_triplet(k + 10), f))
    cur = _triplet(0)
    batch = build_batch(cur, buf, 2, 0, exclude_ids=(3,), ranges=AugmentRanges.identity())
    assert len(batch) == 3 and batch[0] is cur
    stored = [s.item.images for s in buf.samples[:3]]
    for item in batch[1:]:
        assert any(np.array_equal(item.images, s) for s in stored)
    assert len(build_batch(cur, Buffer(), 2, 0)) == 1


# ------------------------------------------------------------------ adapter

def test_warm_up_then_updates(small_seq):
    cfg = AdapterConfig(cycles=3, min_drive_dist=0.0)
    st = _state(cfg)
    reps = run_sync(st, frames_from_sequence(small_seq)[:5])
    assert [r.accepted for r in reps] == [True] * 5
    assert [len(r.loss_trace) for r in reps] == [0, 0, 3, 3, 3]
    assert reps[0].vo is None and reps[2].vo is not None
    assert reps[2].depth.shape == (24, 32)
    assert reps[2].admission.admitted and reps[2].admission.max_sim == float("-inf")


def test_loss_trace_has_c_entries_and_json(small_seq):
    st = _state(AdapterConfig(cycles=5, min_drive_dist=0.0))
    reps = run_sync(st, frames_from_sequence(small_seq)[:3])
    r = reps[-1]
    assert len(r.loss_trace) == 5 and all(np.isfinite(r.loss_trace))
    d = json.loads(r.to_json())
    assert set(d) >= {"timestamp", "accepted", "admission", "loss_trace", "pose"}
    assert len(d["pose"]) == 12 and d["admission"]["max_sim"] == "empty"


def test_encoders_and_features_unchanged_decoders_changed(small_seq):
    st = _state(AdapterConfig(cycles=2, min_drive_dist=0.0))
    enc0 = {g.name: [a.copy() for a in g.arrays()] for g in st.nets.encoder_groups()}
    dec0 = {g.name: [a.copy() for a in g.arrays()] for g in st.nets.decoder_groups()}
    probe = small_seq.frames[0]
    f0 = extract_feature(st.nets.depth, probe)
    run_sync(st, frames_from_sequence(small_seq)[:6])
    for g in st.nets.encoder_groups():
        for a, b in zip(enc0[g.name], g.arrays()):
            np.testing.assert_array_equal(a, b)
    assert any(not np.array_equal(a, b) for g in st.nets.decoder_groups()
               for a, b in zip(dec0[g.name], g.arrays()))
    np.testing.assert_array_equal(f0, extract_feature(st.nets.depth, probe))


def test_new_sample_never_replayed_in_its_own_step(small_seq):
    st = _state(AdapterConfig(cycles=1, min_drive_dist=0.0, replay_n=5, threshold=1.0))
    reps = run_sync(st, frames_from_sequence(small_seq)[:8])
    for r in reps:
        if r.admission is not None and r.admission.sample_id is not None:
            assert r.admission.sample_id not in r.batch_ids


def test_replay_zero_uses_only_current(small_seq):
    st = _state(AdapterConfig(cycles=1, min_drive_dist=0.0, replay_n=0, threshold=1.0))
    reps = run_sync(st, frames_from_sequence(small_seq)[:6])
    assert all(r.batch_ids == [] for r in reps)
    assert len(st.buffer) >= 1


def test_gated_frames_skip_updates(small_seq):
    st = _state(AdapterConfig(cycles=1, min_drive_dist=1e6))
    reps = run_sync(st, frames_from_sequence(small_seq)[:4])
    assert [r.accepted for r in reps] == [True, False, False, False]


def test_ungated_frame_rejected():
    st = _state()
    with pytest.raises(ValueError, match="gate"):
        adapt_on_frame(st, FrameInput(np.zeros((24, 32, 3)), 1.0, 0.0))


def test_deterministic_given_seed(small_seq):
    def run():
        st = _state(AdapterConfig(cycles=2, min_drive_dist=0.0, seed=3))
        run_sync(st, frames_from_sequence(small_seq)[:6])
        return ad.snapshot(st.nets.param_groups())
    a, b = run(), run()
    for k in a:
        for x, y in zip(a[k][1], b[k][1]):
            np.testing.assert_array_equal(x, y)


def test_non_finite_step_rolls_back(small_seq, monkeypatch):
    import replayvo.adapter as adapter_mod

    st = _state(AdapterConfig(cycles=3, min_drive_dist=0.0))
    frames = frames_from_sequence(small_seq)
    run_sync(st, frames[:3])
    before = ad.snapshot(st.nets.param_groups())
    step0 = st.opt.step
    real = adapter_mod.train_step
    calls = []

    def flaky(*args, **kw):
        calls.append(1)
        if len(calls) == 2:          # the first cycle already moved the weights
            raise ad.NonFiniteError("mul produced non-finite values")
        return real(*args, **kw)

    monkeypatch.setattr(adapter_mod, "train_step", flaky)
    rep = process_frame(st, frames[3])
    assert rep.rolled_back and len(rep.loss_trace) == 1 and rep.vo is not None
    assert st.opt.step == step0
    after = ad.snapshot(st.nets.param_groups())
    for k in before:
        for x, y in zip(before[k][1], after[k][1]):
            np.testing.assert_array_equal(x, y)


def test_non_finite_frame_rejected(small_seq):
    st = _state(AdapterConfig(min_drive_dist=0.0))
    bad = FrameInput(np.full((24, 32, 3), np.nan, dtype=np.float32), 1.0, 0.0)
    with pytest.raises(ValueError, match="non-finite"):
        process_frame(st, bad)


def test_begin_sequence_resets_stream_state(small_seq):
    st = _state(AdapterConfig(cycles=1, min_drive_dist=0.0))
    frames = frames_from_sequence(small_seq)[:4]
    run_sync(st, frames)
    n = len(st.buffer)
    begin_sequence(st)
    reps = run_sync(st, frames)          # timestamps restart at zero
    assert [len(r.loss_trace) for r in reps] == [0, 0, 1, 1]
    assert len(st.buffer) >= n


def test_config_validation():
    with pytest.raises(ValueError):
        AdapterConfig(cycles=0)
    with pytest.raises(ValueError):
        AdapterConfig(lr=0.0)
    with pytest.raises(ValueError):
        AdapterConfig(replay_n=-1)
