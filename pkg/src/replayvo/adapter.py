"""Synchronous online adaptation: gate, admit to replay, build batch, update decoders.

Every accepted frame runs, in order:

1. assemble the triplet ``(I_{t-2}, I_{t-1}, I_t)`` of the last three accepted frames;
2. offer it to the replay buffer (feature of ``I_t``);
3. draw ``N`` replay samples (never the one admitted in this step) and augment them;
4. forward both networks on the batch, 5. evaluate the loss,
6. back-propagate and step Adam on the decoders, repeated ``c`` times;
7. emit ``O_{t-1->t}`` from the final forward pass.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

from . import autodiff as ad
from .geometry import Camera, Pose, Twist, se3_exp
from .losses import LossWeights
from .model import Networks, extract_feature, freeze_encoders, pose_forward
from .replay_buffer import AdmissionReport, Buffer, ReplaySample, maybe_add, sample_batch
from .training import TripletBatchItem, train_step

log = logging.getLogger(__name__)

# distances are sums of float products; allow for their rounding at the threshold
GATE_TOL = 1e-9


@dataclass(frozen=True)
class AugmentRanges:
    brightness: tuple = (0.8, 1.2)
    contrast: tuple = (0.8, 1.2)
    saturation: tuple = (0.8, 1.2)
    hue: tuple = (-0.05, 0.05)

    @classmethod
    def identity(cls) -> "AugmentRanges":
        return cls((1.0, 1.0), (1.0, 1.0), (1.0, 1.0), (0.0, 0.0))

    def __post_init__(self):
        for name in ("brightness", "contrast", "saturation"):
            lo, hi = getattr(self, name)
            if not 0 <= lo <= hi:
                raise ValueError(f"{name} range must satisfy 0 <= lo <= hi")
        if not -0.5 <= self.hue[0] <= self.hue[1] <= 0.5:
            raise ValueError("hue range must lie in [-0.5, 0.5]")


@dataclass
class AdapterConfig:
    replay_n: int = 2
    cycles: int = 5
    min_drive_dist: float = 0.2
    weights: LossWeights = field(default_factory=LossWeights)
    augment: AugmentRanges = field(default_factory=AugmentRanges)
    lr: float = 1e-4
    capacity: int = 100
    threshold: float = 0.95
    seed: int = 0
    domain_tag: str = ""

    def __post_init__(self):
        if self.replay_n < 0 or self.cycles < 1 or self.min_drive_dist < 0:
            raise ValueError("need replay_n >= 0, cycles >= 1 and min_drive_dist >= 0")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")


@dataclass(frozen=True)
class FrameInput:
    image: np.ndarray          # (H, W, 3) in [0, 1]
    speed: float               # m/s, valid until the next frame
    timestamp: float           # s
    odometer: float | None = None   # integrated distance, stamped by the gate


# --------------------------------------------------------------------- gate

@dataclass
class GateState:
    min_drive_dist: float = 0.2
    last_timestamp: float | None = None
    last_speed: float = 0.0
    odometer: float = 0.0             # total integrated distance
    since_accept: float = 0.0
    accepted: int = 0
    seen: int = 0


def gate_frame(state: GateState, f: FrameInput) -> bool:
    """Accept a frame once the integrated speed since the last accepted frame
    reaches ``min_drive_dist``.  The first frame is always accepted."""
    if f.speed < 0:
        raise ValueError("speed must be non-negative")
    if state.last_timestamp is not None:
        if not f.timestamp > state.last_timestamp:
            raise ValueError(f"non-monotone timestamp {f.timestamp} after {state.last_timestamp}")
        step = state.last_speed * (f.timestamp - state.last_timestamp)
        state.odometer += step
        state.since_accept += step
    first = state.seen == 0
    state.seen += 1
    state.last_timestamp = f.timestamp
    state.last_speed = float(f.speed)
    if first or state.since_accept >= state.min_drive_dist - GATE_TOL:
        state.since_accept = 0.0
        state.accepted += 1
        return True
    return False


def stamp(state: GateState, f: FrameInput) -> FrameInput:
    return dataclasses.replace(f, odometer=state.odometer)


# ------------------------------------------------------------- augmentation

def _gray(img: np.ndarray) -> np.ndarray:
    return img @ np.array([0.299, 0.587, 0.114], dtype=img.dtype)


def jitter(images: np.ndarray, b: float, c: float, s: float, h: float) -> np.ndarray:
    """Brightness, contrast, saturation and hue jitter of ``(..., H, W, 3)``
    images, in that order, each followed by clamping to ``[0, 1]``.  Unit
    factors and zero hue shift leave the input untouched."""
    out = np.asarray(images, dtype=np.float32)
    if b != 1.0:
        out = np.clip(out * np.float32(b), 0.0, 1.0)
    if c != 1.0:
        mean = _gray(out).mean(axis=(-2, -1), keepdims=True)[..., None]
        out = np.clip((out - mean) * np.float32(c) + mean, 0.0, 1.0)
    if s != 1.0:
        g = _gray(out)[..., None]
        out = np.clip((out - g) * np.float32(s) + g, 0.0, 1.0)
    if h != 0.0:
        hsv = rgb_to_hsv(out)
        hsv[..., 0] = np.mod(hsv[..., 0] + h, 1.0)
        out = np.clip(hsv_to_rgb(hsv), 0.0, 1.0)
    return out.astype(np.float32)


def augment_replay(item: TripletBatchItem, rng, ranges: AugmentRanges = AugmentRanges()) -> TripletBatchItem:
    """One jitter draw applied identically to all three images of a triplet."""
    b = rng.uniform(*ranges.brightness)
    c = rng.uniform(*ranges.contrast)
    s = rng.uniform(*ranges.saturation)
    h = rng.uniform(*ranges.hue)
    return TripletBatchItem(jitter(item.images, b, c, s, h), item.speeds, item.dt)


def build_batch(current: TripletBatchItem, buf: Buffer, n: int, rng_seed=None,
                exclude_ids=(), ranges: AugmentRanges = AugmentRanges()) -> list:
    """``[current]`` followed by up to ``n`` augmented replay samples."""
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    replay = sample_batch(buf, n, rng, exclude_ids)
    return [current] + [augment_replay(s.item, rng, ranges) for s in replay]


# ------------------------------------------------------------------ adapter

@dataclass
class StepReport:
    timestamp: float
    accepted: bool
    vo: Pose | None = None
    loss_trace: list = field(default_factory=list)
    admission: AdmissionReport | None = None
    depth: np.ndarray | None = None
    batch_ids: list = field(default_factory=list)
    rolled_back: bool = False

    def to_json(self) -> str:
        return json.dumps({
            "timestamp": self.timestamp,
            "accepted": self.accepted,
            "admission": None if self.admission is None else self.admission.to_dict(),
            "loss_trace": [float(x) for x in self.loss_trace],
            "pose": None if self.vo is None else [float(x) for x in self.vo.row34()],
            "replay_ids": list(self.batch_ids),
            "rolled_back": self.rolled_back,
        })


@dataclass
class AdapterState:
    nets: Networks
    cam: Camera
    cfg: AdapterConfig
    buffer: Buffer
    opt: ad.OptState
    gate: GateState
    rng: np.random.Generator
    history: list = field(default_factory=list)   # last accepted (stamped) frames
    steps: int = 0

    @classmethod
    def create(cls, nets: Networks, cam: Camera, cfg: AdapterConfig = AdapterConfig(),
               buffer: Buffer | None = None) -> "AdapterState":
        freeze_encoders(nets.depth, nets.pose)
        for g in nets.decoder_groups():
            g.trainable = True
        buf = buffer if buffer is not None else Buffer(cfg.capacity, cfg.threshold)
        return cls(nets, cam, cfg, buf, ad.OptState(lr=cfg.lr), GateState(cfg.min_drive_dist),
                   np.random.default_rng(cfg.seed))


def _triplet(frames) -> TripletBatchItem:
    imgs = np.stack([f.image for f in frames])
    speeds, dts = [], []
    for a, b in zip(frames[:-1], frames[1:]):
        dt = b.timestamp - a.timestamp
        dts.append(dt)
        speeds.append(max(b.odometer - a.odometer, 0.0) / dt)
    return TripletBatchItem(imgs, speeds, dts)


def adapt_on_frame(state: AdapterState, f: FrameInput) -> StepReport:
    """Run the online update for an accepted frame (``f.odometer`` set)."""
    if f.odometer is None:
        raise ValueError("frame has not been through the gate")
    if not np.isfinite(f.image).all():
        raise ValueError(f"frame at t={f.timestamp} has non-finite pixels")
    if state.history and not f.timestamp > state.history[-1].timestamp:
        raise ValueError("non-monotone timestamp")
    state.history = (state.history + [f])[-3:]
    if len(state.history) < 3:
        return StepReport(f.timestamp, True)

    current = _triplet(state.history)
    feat = extract_feature(state.nets.depth, f.image)
    admission = maybe_add(state.buffer, ReplaySample(current, feat, domain_tag=state.cfg.domain_tag))
    exclude = () if admission.sample_id is None else (admission.sample_id,)
    replay = sample_batch(state.buffer, state.cfg.replay_n, state.rng, exclude)
    batch = [current] + [augment_replay(s.item, state.rng, state.cfg.augment) for s in replay]

    groups = state.nets.param_groups()
    before = ad.snapshot(groups)
    opt_before = state.opt.copy()
    trace, out = [], None
    rolled_back = False
    try:
        for _ in range(state.cfg.cycles):
            out = train_step(state.nets, batch, state.cam, state.cfg.weights, state.opt)
            trace.append(float(out.loss.value))
    except ad.NonFiniteError as exc:
        log.warning("non-finite loss at t=%.3f (%s); rolling back", f.timestamp, exc)
        ad.restore(groups, before)
        state.opt = opt_before
        rolled_back, out = True, None
    state.steps += 1

    if out is None:
        vo = se3_exp(pose_forward(state.nets.pose, state.history[1].image, f.image))
        depth = None
    else:
        n = len(batch)
        vo = se3_exp(Twist.from_vector(np.asarray(out.twists.value[n], dtype=np.float64)))
        depth = np.asarray(out.depth.value[0, 0])
    return StepReport(f.timestamp, True, vo, trace, admission, depth,
                      [s.id for s in replay], rolled_back)


def process_frame(state: AdapterState, f: FrameInput) -> StepReport:
    """Gate a raw frame and adapt on it if accepted."""
    if not gate_frame(state.gate, f):
        return StepReport(f.timestamp, False)
    return adapt_on_frame(state, stamp(state.gate, f))


def begin_sequence(state: AdapterState) -> None:
    """Start a new stream: fresh gate and triplet history; weights, optimizer
    moments and replay buffer carry over."""
    state.gate = GateState(state.cfg.min_drive_dist)
    state.history = []


def frames_from_sequence(seq) -> list:
    return [FrameInput(seq.frames[i], float(seq.speeds[i]), float(seq.timestamps[i]))
            for i in range(len(seq.frames))]


def run_sync(state: AdapterState, frames, on_step=None) -> list:
    reports = []
    for f in frames:
        r = process_frame(state, f)
        reports.append(r)
        if on_step is not None:
            on_step(r)
    return reports
