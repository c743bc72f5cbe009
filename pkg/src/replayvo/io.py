"""Sequence directories, pose files, PNG frames and the run configuration file.

Sequence directory layout::

    frames/000000.png ...   8-bit RGB frames
    poses_gt.txt            optional, 12 numbers per line (row-major 3x4, camera-to-world)
    speeds.csv              "timestamp,speed" rows (required)
    domain.json             camera intrinsics, domain spec and free-form metadata
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .geometry import Camera, Pose
from .synthetic import DomainSpec, Sequence


class FormatError(ValueError):
    pass


# -------------------------------------------------------------------- png

def write_png(path, img) -> None:
    """Write an ``(H, W, 3)`` image in ``[0, 1]`` as 8-bit PNG."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise FormatError(f"expected an (H, W, 3) image, got {arr.shape}")
    u8 = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(u8, mode="RGB").save(path, format="PNG")


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        u8 = np.asarray(im.convert("RGB"))
    # same arithmetic as the renderer's quantization, so round trips are exact
    return (u8.astype(np.float64) / 255.0).astype(np.float32)


# ------------------------------------------------------------------ poses

def format_pose(p: Pose) -> str:
    return " ".join(repr(float(x)) for x in p.row34())


def write_poses(path, poses) -> None:
    with open(path, "w") as fh:
        for p in poses:
            fh.write(format_pose(p) + "\n")


def read_poses(path) -> list:
    poses = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                vals = [float(x) for x in line.split()]
            except ValueError:
                raise FormatError(f"{path}:{lineno}: non-numeric pose entry") from None
            if len(vals) != 12:
                raise FormatError(f"{path}:{lineno}: expected 12 numbers, got {len(vals)}")
            m = np.asarray(vals).reshape(3, 4)
            poses.append(Pose(m[:, :3], m[:, 3]))
    return poses


# -------------------------------------------------------------- sequences

def save_sequence(seq: Sequence, root) -> None:
    fdir = os.path.join(root, "frames")
    os.makedirs(fdir, exist_ok=True)
    for i, img in enumerate(seq.frames):
        write_png(os.path.join(fdir, f"{i:06d}.png"), img)
    if seq.gt_poses:
        write_poses(os.path.join(root, "poses_gt.txt"), seq.gt_poses)
    with open(os.path.join(root, "speeds.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", "speed"])
        for t, s in zip(seq.timestamps, seq.speeds):
            w.writerow([repr(float(t)), repr(float(s))])
    meta = {
        "camera": dataclasses.asdict(seq.camera),
        "domain": None if seq.domain is None else seq.domain.to_dict(),
        "meta": seq.meta,
    }
    with open(os.path.join(root, "domain.json"), "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)


def load_sequence(root) -> Sequence:
    fdir = os.path.join(root, "frames")
    if not os.path.isdir(fdir):
        raise FormatError(f"{root}: no frames/ directory")
    names = sorted(n for n in os.listdir(fdir) if n.lower().endswith(".png"))
    speeds_path = os.path.join(root, "speeds.csv")
    if not os.path.exists(speeds_path):
        raise FormatError(f"{root}: speeds.csv missing (velocity data required)")
    ts, sp = [], []
    with open(speeds_path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or row[0] == "timestamp":
                continue
            try:
                ts.append(float(row[0]))
                sp.append(float(row[1]))
            except (ValueError, IndexError):
                raise FormatError(f"{speeds_path}:{lineno}: expected 'timestamp,speed'") from None
    if len(ts) != len(names):
        raise FormatError(f"{root}: {len(names)} frames but {len(ts)} speed rows")
    frames = np.stack([read_png(os.path.join(fdir, n)) for n in names]) if names else np.zeros((0, 0, 0, 3))
    poses_path = os.path.join(root, "poses_gt.txt")
    poses = read_poses(poses_path) if os.path.exists(poses_path) else []
    if poses and len(poses) != len(names):
        raise FormatError(f"{root}: {len(names)} frames but {len(poses)} poses")
    cam, domain, meta = None, None, {}
    info_path = os.path.join(root, "domain.json")
    if os.path.exists(info_path):
        with open(info_path) as fh:
            info = json.load(fh)
        cam = Camera(**info["camera"]) if info.get("camera") else None
        domain = DomainSpec.from_dict(info["domain"]) if info.get("domain") else None
        meta = info.get("meta") or {}
    if cam is None:
        h, w = frames.shape[1:3]
        cam = Camera.default(width=w, height=h)
    return Sequence(frames, poses, np.zeros((0,), np.float32), np.asarray(sp), np.asarray(ts),
                    cam, domain, meta)


# ---------------------------------------------------------------- config

@dataclass
class AdapterSection:
    replay_n: int = 2
    cycles: int = 5
    min_drive_dist: float = 0.2
    lr: float = 1e-4
    augment: bool = True


@dataclass
class BufferSection:
    capacity: int = 100
    threshold: float = 0.95


@dataclass
class LossSection:
    gamma: float = 0.001
    lam: float = 0.05


@dataclass
class AsyncSection:
    publish_every: int = 1
    mode: str = "simulated"
    learner_cost: float = 0.0
    playback_rate: float = 0.0


@dataclass
class CameraSection:
    width: int = 64
    height: int = 48
    focal: float = 60.0


@dataclass
class PretrainSection:
    epochs: int = 20
    batch_size: int = 4
    lr: float = 1e-3
    lr_final: float = 1e-4
    rotation_warmup: int = 500


@dataclass
class SyntheticSection:
    source_frames: int = 300
    target_frames: int = 300
    eval_frames: int = 300
    dt: float = 0.1


@dataclass
class EvaluationSection:
    segment_lengths: tuple = (10.0, 20.0, 30.0, 40.0)
    step: int = 1


@dataclass
class RunSection:
    seed: int = 0
    workdir: str = "run"


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    adapter: AdapterSection = field(default_factory=AdapterSection)
    buffer: BufferSection = field(default_factory=BufferSection)
    loss: LossSection = field(default_factory=LossSection)
    async_: AsyncSection = field(default_factory=AsyncSection)
    camera: CameraSection = field(default_factory=CameraSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    synthetic: SyntheticSection = field(default_factory=SyntheticSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)

    def validate(self) -> "RunConfig":
        a = self.adapter
        if a.replay_n < 0 or a.cycles < 1 or a.min_drive_dist < 0 or a.lr <= 0:
            raise FormatError("adapter: need replay_n >= 0, cycles >= 1, min_drive_dist >= 0, lr > 0")
        if self.buffer.capacity < 1 or not -1 <= self.buffer.threshold <= 1:
            raise FormatError("buffer: need capacity >= 1 and threshold in [-1, 1]")
        if self.loss.gamma < 0 or self.loss.lam < 0:
            raise FormatError("loss: weights must be non-negative")
        if self.async_.publish_every < 1 or self.async_.mode not in ("simulated", "wallclock"):
            raise FormatError("async: need publish_every >= 1 and mode simulated|wallclock")
        if self.camera.width % 8 or self.camera.height % 8 or self.camera.focal <= 0:
            raise FormatError("camera: width and height must be multiples of 8, focal > 0")
        p = self.pretrain
        if p.epochs < 0 or p.batch_size < 1 or p.lr <= 0 or p.lr_final <= 0 or p.rotation_warmup < 0:
            raise FormatError("pretrain: invalid schedule")
        s = self.synthetic
        if min(s.source_frames, s.target_frames, s.eval_frames) < 3 or s.dt <= 0:
            raise FormatError("synthetic: need >= 3 frames per sequence and dt > 0")
        if not self.evaluation.segment_lengths or min(self.evaluation.segment_lengths) <= 0:
            raise FormatError("evaluation: segment lengths must be positive")
        if self.evaluation.step < 1:
            raise FormatError("evaluation: step must be >= 1")
        return self

    def camera_model(self) -> Camera:
        return Camera.default(self.camera.width, self.camera.height, self.camera.focal)


def _section_name(attr: str) -> str:
    return attr.rstrip("_")


def _format(v) -> str:
    if isinstance(v, tuple):
        return ", ".join(repr(float(x)) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(raw: str, default, where: str):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(float(x) for x in raw.split(",") if x.strip())
        return raw.strip()
    except ValueError:
        raise FormatError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from None


def config_to_text(cfg: RunConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        sec = getattr(cfg, f.name)
        lines.append(f"[{_section_name(f.name)}]")
        for sf in dataclasses.fields(sec):
            lines.append(f"{sf.name} = {_format(getattr(sec, sf.name))}")
        lines.append("")
    return "\n".join(lines)


def save_config(cfg: RunConfig, path) -> None:
    with open(path, "w") as fh:
        fh.write(config_to_text(cfg))


def config_from_text(text: str, source: str = "<config>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise FormatError(f"{source}: {exc.message.splitlines()[0]}") from None
    cfg = RunConfig()
    sections = {_section_name(f.name): f.name for f in dataclasses.fields(cfg)}
    for name in parser.sections():
        if name not in sections:
            raise FormatError(f"{source}: unknown section [{name}]")
        sec = getattr(cfg, sections[name])
        known = {sf.name: sf for sf in dataclasses.fields(sec)}
        for key, raw in parser.items(name):
            if key not in known:
                raise FormatError(f"{source}: unknown key {name}.{key}")
            setattr(sec, key, _parse(raw, getattr(sec, key), f"{source}: {name}.{key}"))
    return cfg.validate()


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return config_from_text(fh.read(), str(path))
