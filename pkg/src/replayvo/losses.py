"""Photometric, smoothness and velocity losses and their weighted sum.

The three terms follow the usual self-supervised depth/ego-motion recipe:

* photometric: ``0.85 * (1 - SSIM) / 2 + 0.15 * L1`` per pixel, 3x3 SSIM
  with reflection padding, per-pixel minimum over the two warped
  neighbours, averaged over pixels that are valid in at least one of them;
* smoothness: edge-aware first-order penalty on mean-normalized disparity;
* velocity: ``| ||v|| - speed * dt |`` for the predicted translation.

No automasking and no multi-scale pyramid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
SSIM_WEIGHT = 0.85
_INVALID = 1e3


@dataclass(frozen=True)
class LossWeights:
    gamma: float = 0.001
    lam: float = 0.05

    def __post_init__(self):
        if self.gamma < 0 or self.lam < 0:
            raise ValueError("loss weights must be non-negative")


class EmptyMaskError(ValueError):
    pass


def _node(x, dtype=None):
    return x if isinstance(x, ad.Node) else ad.const(np.asarray(x), dtype=dtype)


def ssim_distance(x: ad.Node, y: ad.Node) -> ad.Node:
    """``clamp((1 - SSIM) / 2, 0, 1)`` per pixel and channel."""
    px, py = ad.pad2d(x, 1), ad.pad2d(y, 1)
    mu_x = ad.avg_pool2d(px, 3)
    mu_y = ad.avg_pool2d(py, 3)
    sig_x = ad.avg_pool2d(px * px, 3) - mu_x * mu_x
    sig_y = ad.avg_pool2d(py * py, 3) - mu_y * mu_y
    sig_xy = ad.avg_pool2d(px * py, 3) - mu_x * mu_y
    num = (2 * mu_x * mu_y + SSIM_C1) * (2 * sig_xy + SSIM_C2)
    den = (mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (sig_x + sig_y + SSIM_C2)
    return ad.clamp((1 - num / den) * 0.5, 0.0, 1.0)


def photometric_error(target: ad.Node, warped: ad.Node) -> ad.Node:
    """Per-pixel error ``(N, H, W)`` between two ``(N, C, H, W)`` images."""
    ssim = ad.mean(ssim_distance(target, warped), axis=1)
    l1 = ad.mean(ad.abs_(target - warped), axis=1)
    return ssim * SSIM_WEIGHT + l1 * (1 - SSIM_WEIGHT)


def photometric_loss(center, warped_prev, warped_next, masks, per_item: bool = False):
    """Minimum-reprojection photometric loss.

    Images are ``(N, C, H, W)``; ``masks`` is a pair of ``(N, H, W)`` 0/1
    arrays.  Returns a scalar node, or ``(N,)`` when ``per_item``.
    """
    center = _node(center)
    dt = center.dtype
    warped_prev, warped_next = _node(warped_prev, dt), _node(warped_next, dt)
    m_prev, m_next = (np.asarray(m, dtype=dt) for m in masks)
    any_valid = np.maximum(m_prev, m_next)
    counts = any_valid.reshape(any_valid.shape[0], -1).sum(axis=1)
    if counts.sum() == 0:
        raise EmptyMaskError("no pixel is valid in either warped source")
    e_prev = photometric_error(center, warped_prev) + ad.const((1 - m_prev) * _INVALID, dtype=dt)
    e_next = photometric_error(center, warped_next) + ad.const((1 - m_next) * _INVALID, dtype=dt)
    best = ad.minimum(e_prev, e_next) * ad.const(any_valid, dtype=dt)
    if per_item:
        return ad.sum_(best, axis=(1, 2)) * ad.const(1.0 / np.maximum(counts, 1), dtype=dt)
    return ad.sum_(best) * (1.0 / float(counts.sum()))


def smoothness_loss(depth, image, per_item: bool = False):
    """Edge-aware smoothness of mean-normalized disparity.

    ``depth`` is ``(N, 1, H, W)`` or ``(N, H, W)``; ``image`` ``(N, C, H, W)``.
    """
    image = _node(image)
    depth = _node(depth, image.dtype)
    n = image.shape[0]
    h, w = image.shape[-2:]
    disp = 1.0 / ad.reshape(depth, (n, 1, h, w))
    disp = disp / ad.mean(disp, axis=(2, 3), keepdims=True)
    dx = ad.abs_(disp[:, :, :, 1:] - disp[:, :, :, :-1])
    dy = ad.abs_(disp[:, :, 1:, :] - disp[:, :, :-1, :])
    ix = ad.mean(ad.abs_(image[:, :, :, 1:] - image[:, :, :, :-1]), axis=1, keepdims=True)
    iy = ad.mean(ad.abs_(image[:, :, 1:, :] - image[:, :, :-1, :]), axis=1, keepdims=True)
    tx = dx * ad.exp(-ix)
    ty = dy * ad.exp(-iy)
    if per_item:
        return ad.mean(tx, axis=(1, 2, 3)) + ad.mean(ty, axis=(1, 2, 3))
    return ad.mean(tx) + ad.mean(ty)


def velocity_loss(twist, speed, dt, per_item: bool = False):
    """``| ||v|| - speed * dt |`` for twists ``(N, 6)`` (or a single 6-vector)."""
    twist = _node(twist)
    if twist.ndim == 1:
        twist = ad.reshape(twist, (1, 6))
    target = np.broadcast_to(np.asarray(speed, dtype=np.float64) * np.asarray(dt, dtype=np.float64),
                             (twist.shape[0],))
    if (np.asarray(dt) <= 0).any() or (np.asarray(speed) < 0).any():
        raise ValueError("need dt > 0 and speed >= 0")
    v = twist[:, 3:6]
    # the tiny offset keeps d||v|| finite at v = 0
    norm = ad.sqrt(ad.sum_(v * v, axis=1) + 1e-12)
    err = ad.abs_(norm - ad.const(target, dtype=twist.dtype))
    return err if per_item else ad.mean(err)


def total_loss(l_pr, l_sm, l_vel, w: LossWeights = LossWeights()):
    """``l_pr + gamma * l_sm + lam * l_vel`` for floats or graph nodes."""
    if not any(isinstance(t, ad.Node) for t in (l_pr, l_sm, l_vel)):
        terms = [float(t) for t in (l_pr, l_sm, l_vel)]
        if not all(math.isfinite(t) for t in terms):
            raise ValueError("loss terms must be finite")
        return terms[0] + w.gamma * terms[1] + w.lam * terms[2]
    return l_pr + l_sm * w.gamma + l_vel * w.lam
