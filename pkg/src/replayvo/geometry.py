"""Rigid transforms, the pinhole camera, and differentiable inverse warping.

Conventions used everywhere in the package:

* ``Pose`` maps points from one frame into another: ``x_b = R @ x_a + t``.
* Absolute trajectory poses are camera-to-world.
* A VO estimate ``O_{a->b}`` maps points of camera frame ``a`` into frame
  ``b``; with camera-to-world poses ``P`` this is ``inv(P_b) @ P_a``.
* ``inverse_warp`` takes the pose that maps *target* points into the
  *source* frame.
* Twists use a decoupled parametrization: rotation from the axis-angle
  part by Rodrigues' formula, translation taken verbatim.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class Pose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.rotation
        out[:3, 3] = self.translation
        return out

    def row34(self) -> np.ndarray:
        """The 12 numbers of the 3x4 matrix in row-major order."""
        return self.matrix()[:3].reshape(12)

    def is_valid(self, tol: float = 1e-6) -> bool:
        r = self.rotation
        return bool(np.allclose(r.T @ r, np.eye(3), atol=tol)
                    and abs(np.linalg.det(r) - 1.0) < tol)

    def apply(self, points) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation


@dataclass(frozen=True)
class Twist:
    omega: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "omega", np.asarray(self.omega, dtype=np.float64).reshape(3))
        object.__setattr__(self, "v", np.asarray(self.v, dtype=np.float64).reshape(3))
        if not (np.isfinite(self.omega).all() and np.isfinite(self.v).all()):
            raise ValueError("twist components must be finite")

    @classmethod
    def from_vector(cls, vec) -> "Twist":
        vec = np.asarray(vec, dtype=np.float64).reshape(6)
        return cls(vec[:3], vec[3:])

    def vector(self) -> np.ndarray:
        return np.concatenate([self.omega, self.v])


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @classmethod
    def default(cls, width: int = 64, height: int = 48, focal: float = 60.0) -> "Camera":
        return cls(focal, focal, (width - 1) / 2.0, (height - 1) / 2.0, width, height)

    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])


# ------------------------------------------------------------ group algebra

def _hat(w):
    x, y, z = w
    return np.array([[0, -z, y], [z, 0, -x], [-y, x, 0.0]])


def so3_exp(omega) -> np.ndarray:
    omega = np.asarray(omega, dtype=np.float64)
    s = float(omega @ omega)
    if s < 1e-8:
        a = 1 - s / 6 + s * s / 120
        b = 0.5 - s / 24 + s * s / 720
    else:
        th = np.sqrt(s)
        a = np.sin(th) / th
        b = (1 - np.cos(th)) / s
    k = _hat(omega)
    return np.eye(3) + a * k + b * (k @ k)


def se3_exp(t: Twist) -> Pose:
    return Pose(so3_exp(t.omega), t.v)


def pose_compose(a: Pose, b: Pose) -> Pose:
    """``a ∘ b``: apply ``b`` first, then ``a``."""
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def pose_inverse(a: Pose) -> Pose:
    rt = a.rotation.T
    return Pose(rt, -rt @ a.translation)


def rotation_angle(r: np.ndarray) -> float:
    """Rotation angle in radians via the trace formula."""
    c = (np.trace(r) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def relative_pose(p_a: Pose, p_b: Pose) -> Pose:
    """VO motion ``O_{a->b}`` from camera-to-world poses."""
    return pose_compose(pose_inverse(p_b), p_a)


def chain_relative(motions, start: Pose | None = None) -> list:
    """Camera-to-world poses from a list of ``O_{k-1->k}`` motions.

    The first pose is ``start`` (identity by default), so the result has one
    more element than ``motions``.
    """
    poses = [start or Pose.identity()]
    for o in motions:
        poses.append(pose_compose(poses[-1], pose_inverse(o)))
    return poses


# ---------------------------------------------------------- pinhole model

def backproject(u, v, depth, cam: Camera) -> np.ndarray:
    u, v, depth = np.broadcast_arrays(*(np.asarray(a, dtype=np.float64) for a in (u, v, depth)))
    return np.stack([(u - cam.cx) / cam.fx * depth, (v - cam.cy) / cam.fy * depth, depth], -1)


def project(points, cam: Camera):
    p = np.asarray(points, dtype=np.float64)
    z = p[..., 2]
    return cam.fx * p[..., 0] / z + cam.cx, cam.fy * p[..., 1] / z + cam.cy


@lru_cache(maxsize=32)
def _rays(cam: Camera) -> np.ndarray:
    v, u = np.mgrid[0:cam.height, 0:cam.width].astype(np.float64)
    rays = np.stack([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, np.ones_like(u)])
    rays = rays.reshape(3, -1)
    rays.setflags(write=False)
    return rays


# ------------------------------------------------- differentiable transforms

# maps an axis-angle row vector to the flattened skew matrix: K = (w @ G).reshape(3, 3)
_HAT_GEN = np.zeros((3, 9))
for _i in range(3):
    _HAT_GEN[_i] = _hat(np.eye(3)[_i]).reshape(9)


def so3_exp_graph(omega: ad.Node) -> ad.Node:
    """Batched Rodrigues map ``(N, 3) -> (N, 3, 3)`` inside the graph."""
    n = omega.shape[0]
    dt = omega.dtype
    k = ad.reshape(ad.matmul(omega, ad.const(_HAT_GEN, dtype=dt)), (n, 3, 3))
    s = ad.sum_(omega * omega, axis=1)
    a = ad.reshape(ad.rodrigues_a(s), (n, 1, 1))
    b = ad.reshape(ad.rodrigues_b(s), (n, 1, 1))
    return ad.const(np.eye(3), dtype=dt) + a * k + b * ad.matmul(k, k)


def twist_to_transform(twist: ad.Node):
    """``(N, 6)`` twists ``[omega, v]`` -> rotation ``(N, 3, 3)`` and translation ``(N, 3)``."""
    if twist.ndim != 2 or twist.shape[1] != 6:
        raise ad.ShapeError(f"twist batch must be (N, 6), got {twist.shape}")
    return so3_exp_graph(twist[:, 0:3]), twist[:, 3:6]


def invert_transform(rot: ad.Node, trans: ad.Node):
    rt = ad.transpose(rot, (0, 2, 1))
    t = ad.reshape(ad.matmul(rt, ad.reshape(trans, trans.shape + (1,))), trans.shape)
    return rt, -t


def _as_transform(pose, n: int, dtype):
    if isinstance(pose, tuple) and len(pose) == 2 and all(isinstance(p, ad.Node) for p in pose):
        return pose
    if isinstance(pose, ad.Node):
        return twist_to_transform(pose)
    poses = pose if isinstance(pose, (list, tuple)) else [pose]
    poses = [se3_exp(p) if isinstance(p, Twist) else p for p in poses]
    if len(poses) == 1 and n > 1:
        poses = poses * n
    rot = np.stack([p.rotation for p in poses])
    trans = np.stack([p.translation for p in poses])
    return ad.const(rot, dtype=dtype), ad.const(trans, dtype=dtype)


def inverse_warp(source_img, target_depth, pose_target_to_source, cam: Camera):
    """Resample ``source_img`` into the target view.

    ``source_img`` is ``(N, C, H, W)`` (or ``(C, H, W)``), ``target_depth`` is
    ``(N, H, W)`` or ``(N, 1, H, W)``.  The pose may be a :class:`Pose`, a
    :class:`Twist`, a ``(N, 6)`` twist node, or a ``(rotation, translation)``
    node pair.

    Returns ``(warped, mask)``: ``warped`` is a graph node of the source
    shape, ``mask`` an ``(N, H, W)`` array that is 1 where the sample point
    lands inside the source image and in front of the camera.  Masked-out
    pixels of ``warped`` are exactly zero.
    """
    src = source_img if isinstance(source_img, ad.Node) else ad.const(source_img)
    if src.ndim == 3:
        src = ad.reshape(src, (1,) + src.shape)
    n, c, h, w = src.shape
    if (h, w) != (cam.height, cam.width):
        raise ad.ShapeError(f"image {h}x{w} does not match camera {cam.height}x{cam.width}")
    depth = target_depth if isinstance(target_depth, ad.Node) else ad.const(target_depth, dtype=src.dtype)
    if depth.size != n * h * w:
        raise ad.ShapeError(f"depth shape {depth.shape} does not match image {src.shape}")
    dval = ad.forward(depth)
    if not (dval > 0).all():
        raise ValueError("depth must be strictly positive")
    depth = ad.reshape(depth, (n, 1, h * w))

    rot, trans = _as_transform(pose_target_to_source, n, src.dtype)
    pts = ad.const(_rays(cam), dtype=src.dtype) * depth                  # (N, 3, HW)
    pts = ad.matmul(rot, pts) + ad.reshape(trans, (n, 3, 1))
    z = pts[:, 2, :]
    zc = ad.clamp(z, 1e-3, None)
    u = pts[:, 0, :] / zc * cam.fx + cam.cx
    v = pts[:, 1, :] / zc * cam.fy + cam.cy
    coords = ad.reshape(ad.stack([u, v], axis=-1), (n, h, w, 2))

    uv, vv, zv = (ad.forward(a) for a in (u, v, z))
    mask = ((zv > 1e-3) & (uv >= 0) & (uv <= w - 1) & (vv >= 0) & (vv <= h - 1))
    mask = mask.reshape(n, h, w).astype(src.dtype)
    warped = ad.grid_sample(src, coords) * ad.const(mask[:, None], dtype=src.dtype)
    return warped, mask
