"""Deterministic multi-domain image sequences with exact ground truth.

The world is a set of vertical, fronto-parallel textured strips at fixed
depths (world ``z``), tiled periodically along ``x``, with a background
plane behind them.  The camera looks down ``+z`` and drives sideways
along its own ``x`` axis while yawing slowly about ``y``, which gives
strong parallax and a piecewise-constant depth map.  Every pixel is ray
cast against the exact pinhole model.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .geometry import Camera, Pose, _rays, relative_pose

MIN_PLANE_DEPTH = 0.5
MAX_PLANE_DEPTH = 50.0


@dataclass(frozen=True)
class DomainSpec:
    name: str
    texture_seed: int
    texture_scale: float                 # lattice cells per radian of view
    gain: tuple = (1.0, 1.0, 1.0)
    offset: tuple = (0.0, 0.0, 0.0)
    noise_sigma: float = 0.0
    depth_layout: tuple = (4.0, 6.0, 9.0, 14.0, 20.0)
    background_depth: float = 30.0
    strip_width: float = 2.0             # meters, mean width of a strip
    palette_shift: float = 0.0           # rotates the strip colours
    nominal_speed: float = 2.6           # m/s, mean speed of trajectories driven in this domain

    def __post_init__(self):
        depths = list(self.depth_layout) + [self.background_depth]
        if not all(MIN_PLANE_DEPTH <= d <= MAX_PLANE_DEPTH for d in depths):
            raise ValueError(f"plane depths must lie in [{MIN_PLANE_DEPTH}, {MAX_PLANE_DEPTH}] m")
        if self.background_depth <= max(self.depth_layout):
            raise ValueError("background must be behind every strip")
        if any(g <= 0 for g in self.gain):
            raise ValueError("gains must be positive")
        if self.nominal_speed <= 0:
            raise ValueError("nominal speed must be positive")
        if self.noise_sigma < 0 or self.texture_scale <= 0 or self.strip_width <= 0:
            raise ValueError("noise, texture scale and strip width must be non-negative/positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("gain", "offset", "depth_layout"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSpec":
        d = dict(d)
        for k in ("gain", "offset", "depth_layout"):
            d[k] = tuple(float(x) for x in d[k])
        return cls(**d)


@dataclass(frozen=True)
class TrajectorySpec:
    n_frames: int
    dt: float
    speed_profile: tuple
    yaw_rate_profile: tuple
    seed: int = 0

    def __post_init__(self):
        if self.n_frames < 3:
            raise ValueError("need at least 3 frames")
        if len(self.speed_profile) != self.n_frames or len(self.yaw_rate_profile) != self.n_frames:
            raise ValueError("profiles must have one entry per frame")
        if min(self.speed_profile) < 0:
            raise ValueError("speeds must be non-negative")
        if self.dt <= 0:
            raise ValueError("dt must be positive")


@dataclass
class Sequence:
    frames: np.ndarray            # (n, H, W, 3) float32 on the 1/255 grid
    gt_poses: list                # camera-to-world Pose per frame
    gt_depths: np.ndarray         # (n, H, W) float32 camera-frame depth
    speeds: np.ndarray            # (n,) m/s, speeds[i] covers [t_i, t_{i+1}]
    timestamps: np.ndarray        # (n,) s
    camera: Camera
    domain: DomainSpec | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.frames)


def smooth_trajectory(n_frames: int, seed: int, dt: float = 0.1, mean_speed: float = 2.6,
                      speed_jitter: float = 0.5, yaw_amplitude: float = 0.05) -> TrajectorySpec:
    """Random but smooth speed and yaw-rate profiles."""
    rng = np.random.default_rng(seed)
    t = np.arange(n_frames) * dt
    speed = np.full(n_frames, mean_speed)
    yaw = np.zeros(n_frames)
    for _ in range(3):
        f, ph = rng.uniform(0.05, 0.4), rng.uniform(0, 2 * np.pi)
        speed += speed_jitter / 3 * np.sin(2 * np.pi * f * t + ph)
        f, ph = rng.uniform(0.05, 0.3), rng.uniform(0, 2 * np.pi)
        yaw += yaw_amplitude / 3 * np.sin(2 * np.pi * f * t + ph)
    return TrajectorySpec(n_frames, dt, tuple(np.maximum(speed, 0.0)), tuple(yaw), seed)


def make_domain_pair(seed: int) -> tuple:
    """Source domain A and target domain B separated by fixed deltas.

    B differs from A by: texture seed +1000, 1.6x texture frequency, strips
    0.8x as wide, a shifted palette, a low-contrast photometric bias (gains
    (0.5, 0.55, 0.6), offsets (0.25, 0.2, 0.2)), a freshly drawn strip depth
    layout from the same [6, 24] m range and a nominal driving speed 1.6x
    faster.  Metric scale of the scene is unchanged, so the gap is one of
    appearance and image motion rather than of absolute depth.
    """
    rng = np.random.default_rng(seed)
    base = tuple(float(np.round(d, 3)) for d in np.sort(rng.uniform(6.0, 24.0, size=5)))
    other = tuple(float(np.round(d, 3)) for d in np.sort(rng.uniform(6.0, 24.0, size=5)))
    a = DomainSpec(
        name="A", texture_seed=int(seed) * 2 + 1, texture_scale=6.0,
        depth_layout=base, background_depth=32.0, strip_width=3.0,
    )
    b = DomainSpec(
        name="B", texture_seed=a.texture_seed + 1000, texture_scale=a.texture_scale * 1.6,
        gain=(0.5, 0.55, 0.6), offset=(0.25, 0.2, 0.2), noise_sigma=a.noise_sigma,
        depth_layout=other, background_depth=a.background_depth, strip_width=a.strip_width * 0.8,
        palette_shift=0.5, nominal_speed=a.nominal_speed * 1.6,
    )
    return a, b


def domain_trajectory(domain: DomainSpec, n_frames: int, seed: int, dt: float = 0.1) -> TrajectorySpec:
    """A smooth trajectory driven at the domain's nominal speed."""
    return smooth_trajectory(n_frames, seed, dt=dt, mean_speed=domain.nominal_speed)


# ---------------------------------------------------------------- textures

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        return z ^ (z >> np.uint64(31))


def _lattice(seed: int, i: np.ndarray, j: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        key = (i.astype(np.int64).astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)
               + j.astype(np.int64).astype(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F)
               + np.uint64(seed) * np.uint64(0x165667B19E3779F9))
    return (_mix(key) >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def value_noise(seed: int, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Smooth lattice noise in [0, 1] with quintic interpolation."""
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    sx = fx * fx * fx * (fx * (fx * 6 - 15) + 10)
    sy = fy * fy * fy * (fy * (fy * 6 - 15) + 10)
    v00 = _lattice(seed, x0, y0)
    v10 = _lattice(seed, x0 + 1, y0)
    v01 = _lattice(seed, x0, y0 + 1)
    v11 = _lattice(seed, x0 + 1, y0 + 1)
    return (v00 * (1 - sx) + v10 * sx) * (1 - sy) + (v01 * (1 - sx) + v11 * sx) * sy


def _plane_colour(domain: DomainSpec, k: int) -> np.ndarray:
    hue = (0.13 * k + 0.37 * (domain.texture_seed % 7) + domain.palette_shift) % 1.0
    ang = 2 * np.pi * (hue + np.array([0.0, 1 / 3, 2 / 3]))
    return 0.5 + 0.1 * np.cos(ang)


def _texture(domain: DomainSpec, k: int, depth: float, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    cell = depth / domain.texture_scale
    seed = domain.texture_seed * 97 + k
    lum = value_noise(seed, x / cell, y / cell) + 0.5 * value_noise(seed + 50, 2 * x / cell, 2 * y / cell)
    chroma = value_noise(seed + 100, 0.7 * x / cell, 0.7 * y / cell)
    base = _plane_colour(domain, k)
    tint = np.array([0.12, -0.06, -0.06]) if k % 2 else np.array([-0.06, 0.12, -0.06])
    out = base[:, None] + 0.35 * (lum / 1.5 - 0.5)[None] + tint[:, None] * (chroma - 0.5)[None]
    return out


def _strip_layout(domain: DomainSpec):
    rng = np.random.default_rng(domain.texture_seed)
    n = len(domain.depth_layout)
    order = rng.permutation(n)
    widths = domain.strip_width * rng.uniform(0.6, 1.4, size=n)
    gaps = domain.strip_width * rng.uniform(0.0, 0.6, size=n)
    offsets = np.cumsum(np.concatenate([[0.0], (widths + gaps)[:-1]]))
    period = float(np.sum(widths + gaps))
    return order, offsets, widths, period


# --------------------------------------------------------------- rendering

def yaw_rotation(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def trajectory_poses(traj: TrajectorySpec) -> list:
    pos = np.zeros(3)
    theta = 0.0
    poses = []
    for k in range(traj.n_frames):
        rot = yaw_rotation(theta)
        poses.append(Pose(rot, pos.copy()))
        pos = pos + traj.speed_profile[k] * traj.dt * rot[:, 0]
        theta += traj.yaw_rate_profile[k] * traj.dt
    return poses


def render_view(domain: DomainSpec, pose: Pose, cam: Camera):
    """Noise-free image (H, W, 3) and camera depth (H, W) for one pose."""
    rays_c = _rays(cam)                                  # camera rays with z = 1
    rays_w = pose.rotation @ rays_c
    origin = pose.translation
    order, offsets, widths, period = _strip_layout(domain)
    n_pix = rays_c.shape[1]
    best_t = np.full(n_pix, np.inf)
    best_k = np.full(n_pix, -1)
    hits = {}
    planes = [(k, domain.depth_layout[k]) for k in range(len(domain.depth_layout))]
    for k, zk in planes:
        t = (zk - origin[2]) / rays_w[2]
        x = origin[0] + t * rays_w[0]
        slot = int(np.where(order == k)[0][0])
        inside = np.mod(x - offsets[slot], period) < widths[slot]
        closer = inside & (t > 0) & (t < best_t)
        best_t = np.where(closer, t, best_t)
        best_k = np.where(closer, k, best_k)
        hits[k] = (t, x, origin[1] + t * rays_w[1])
    zb = domain.background_depth
    tb = (zb - origin[2]) / rays_w[2]
    bg = best_k < 0
    best_t = np.where(bg, tb, best_t)
    img = np.zeros((3, n_pix))
    for k, zk in planes + [(len(planes), zb)]:
        sel = best_k == k if k < len(planes) else bg
        if not sel.any():
            continue
        t = best_t[sel]
        x = origin[0] + t * rays_w[0, sel]
        y = origin[1] + t * rays_w[1, sel]
        img[:, sel] = _texture(domain, k, zk, x, y)
    h, w = cam.height, cam.width
    # rays have unit camera z, so the ray parameter is the camera-frame depth
    return img.reshape(3, h, w).transpose(1, 2, 0), best_t.reshape(h, w)


def _check_volume(domain: DomainSpec, poses: list, cam: Camera):
    nearest = min(domain.depth_layout)
    half_fov = np.arctan2(cam.width / 2, cam.fx)
    for p in poses:
        heading = np.arctan2(p.rotation[0, 2], p.rotation[2, 2])
        if p.translation[2] > nearest - MIN_PLANE_DEPTH or abs(heading) > np.pi / 2 - half_fov - 0.05:
            raise ValueError("trajectory exits the textured volume")


def render_sequence(domain: DomainSpec, traj: TrajectorySpec, cam: Camera) -> Sequence:
    poses = trajectory_poses(traj)
    _check_volume(domain, poses, cam)
    rng = np.random.default_rng([traj.seed, domain.texture_seed])
    gain = np.asarray(domain.gain)
    offset = np.asarray(domain.offset)
    frames, depths = [], []
    for p in poses:
        img, depth = render_view(domain, p, cam)
        img = img * gain + offset
        if domain.noise_sigma > 0:
            img = img + rng.normal(0.0, domain.noise_sigma, size=img.shape)
        frames.append(np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0)
        depths.append(depth)
    n = traj.n_frames
    speeds = np.empty(n)
    for i in range(n - 1):
        speeds[i] = np.linalg.norm(poses[i + 1].translation - poses[i].translation) / traj.dt
    speeds[-1] = speeds[-2]
    return Sequence(
        frames=np.stack(frames).astype(np.float32),
        gt_poses=poses,
        gt_depths=np.stack(depths).astype(np.float32),
        speeds=speeds,
        timestamps=np.arange(n) * traj.dt,
        camera=cam,
        domain=domain,
        meta={"trajectory_seed": traj.seed, "dt": traj.dt},
    )


def relative_gt(seq: Sequence, i: int, j: int) -> Pose:
    """Ground-truth ``O_{i->j}`` between two frames."""
    return relative_pose(seq.gt_poses[i], seq.gt_poses[j])
