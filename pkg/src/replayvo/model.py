"""Toy depth and pose networks with separate encoders.

Both networks take channels-first image batches ``(N, 3, H, W)`` with
values in ``[0, 1]``.  ``H`` and ``W`` must be multiples of 8 (three
stride-2 stages).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .geometry import Twist

MIN_DEPTH = 0.1
MAX_DEPTH = 100.0
FEATURE_DIM = 32
POSE_SCALE = 0.01

_MEAN = 0.45
_STD = 0.225


def _conv_param(rng, cout, cin, k, dtype, gain=2.0):
    w = rng.normal(0.0, np.sqrt(gain / (cin * k * k)), size=(cout, cin, k, k))
    return ad.leaf(w.astype(dtype)), ad.leaf(np.zeros(cout, dtype=dtype))


def _normalize(images: ad.Node) -> ad.Node:
    return (images - _MEAN) * (1.0 / _STD)


def _to_nchw(img) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim == 3:
        img = img[None]
    if img.shape[-1] == 3 and img.shape[1] != 3:
        img = img.transpose(0, 3, 1, 2)
    return img


class _Net:
    def __init__(self, size, prefix):
        h, w = size
        if h % 8 or w % 8:
            raise ValueError("image height and width must be multiples of 8")
        self.size = (int(h), int(w))
        self.prefix = prefix

    def _check(self, images: ad.Node):
        if images.ndim != 4 or images.shape[2:] != self.size:
            raise ad.ShapeError(f"{self.prefix} expects (N, C, {self.size[0]}, {self.size[1]}), "
                                f"got {images.shape}")

    def param_groups(self) -> list:
        return [self.encoder, self.decoder]


class DepthNet(_Net):
    """Three stride-2 conv stages, then three upsampling stages with skips
    and a sigmoid disparity head."""

    def __init__(self, size=(48, 64), seed: int = 0, dtype=np.float32):
        super().__init__(size, "depth")
        rng = np.random.default_rng([seed, 1])
        enc = []
        for cin, cout in ((3, 8), (8, 16), (16, 32)):
            enc += _conv_param(rng, cout, cin, 3, dtype)
        dec = []
        for cin, cout in ((32 + 16, 16), (16 + 8, 8), (8, 8)):
            dec += _conv_param(rng, cout, cin, 3, dtype)
        hw, hb = _conv_param(rng, 1, 8, 3, dtype, gain=0.1)
        # start near 10 m so early warps are sensible
        target = (1.0 / 10.0 - 1.0 / MAX_DEPTH) / (1.0 / MIN_DEPTH - 1.0 / MAX_DEPTH)
        hb.value = np.full(1, np.log(target / (1 - target)), dtype=dtype)
        dec += [hw, hb]
        self.encoder = ad.ParamGroup("depth.encoder", enc)
        self.decoder = ad.ParamGroup("depth.decoder", dec)

    def encode(self, images: ad.Node) -> list:
        self._check(images)
        p = self.encoder.tensors
        x = _normalize(images)
        feats = []
        for i in range(3):
            x = ad.relu(ad.conv2d(x, p[2 * i], p[2 * i + 1], stride=2, padding=1))
            feats.append(x)
        return feats

    def __call__(self, images: ad.Node):
        """Depth ``(N, 1, H, W)`` and the encoder feature maps."""
        feats = self.encode(images)
        e1, e2, e3 = feats
        p = self.decoder.tensors
        x = ad.upsample2x(e3)
        x = ad.relu(ad.conv2d(ad.concat([x, e2], axis=1), p[0], p[1], padding=1))
        x = ad.upsample2x(x)
        x = ad.relu(ad.conv2d(ad.concat([x, e1], axis=1), p[2], p[3], padding=1))
        x = ad.upsample2x(x)
        x = ad.relu(ad.conv2d(x, p[4], p[5], padding=1))
        s = ad.sigmoid(ad.conv2d(x, p[6], p[7], padding=1))
        lo, hi = 1.0 / MAX_DEPTH, 1.0 / MIN_DEPTH
        depth = 1.0 / (s * (hi - lo) + lo)
        return depth, feats


class PoseNet(_Net):
    """Conv encoder over the channel-stacked pair, two dense layers to a
    twist ``[omega, v]`` scaled by ``POSE_SCALE``."""

    def __init__(self, size=(48, 64), seed: int = 0, dtype=np.float32, hidden: int = 64):
        super().__init__(size, "pose")
        rng = np.random.default_rng([seed, 2])
        enc = []
        for cin, cout in ((6, 8), (8, 16), (16, 32)):
            enc += _conv_param(rng, cout, cin, 3, dtype)
        flat = 32 * (size[0] // 8) * (size[1] // 8)
        w1 = rng.normal(0.0, np.sqrt(2.0 / flat), size=(flat, hidden))
        w2 = rng.normal(0.0, np.sqrt(1.0 / hidden), size=(hidden, 6))
        dec = [ad.leaf(w1.astype(dtype)), ad.leaf(np.zeros(hidden, dtype=dtype)),
               ad.leaf(w2.astype(dtype)), ad.leaf(np.zeros(6, dtype=dtype))]
        self.encoder = ad.ParamGroup("pose.encoder", enc)
        self.decoder = ad.ParamGroup("pose.decoder", dec)

    def __call__(self, img_a: ad.Node, img_b: ad.Node) -> ad.Node:
        """Twists ``(N, 6)`` for ``O_{a->b}``."""
        self._check(img_a)
        if img_a.shape != img_b.shape:
            raise ad.ShapeError(f"pose pair shapes differ: {img_a.shape} vs {img_b.shape}")
        p = self.encoder.tensors
        x = ad.concat([_normalize(img_a), _normalize(img_b)], axis=1)
        for i in range(3):
            x = ad.relu(ad.conv2d(x, p[2 * i], p[2 * i + 1], stride=2, padding=1))
        w1, b1, w2, b2 = self.decoder.tensors
        x = ad.reshape(x, (x.shape[0], -1))
        x = ad.relu(ad.matmul(x, w1) + b1)
        return (ad.matmul(x, w2) + b2) * POSE_SCALE


@dataclass
class Networks:
    depth: DepthNet
    pose: PoseNet

    @classmethod
    def create(cls, size=(48, 64), seed: int = 0, dtype=np.float32) -> "Networks":
        return cls(DepthNet(size, seed, dtype), PoseNet(size, seed, dtype))

    def param_groups(self) -> list:
        return self.depth.param_groups() + self.pose.param_groups()

    def encoder_groups(self) -> list:
        return [self.depth.encoder, self.pose.encoder]

    def decoder_groups(self) -> list:
        return [self.depth.decoder, self.pose.decoder]


def freeze_encoders(depth: DepthNet, pose: PoseNet) -> None:
    depth.encoder.trainable = False
    pose.encoder.trainable = False


# ------------------------------------------------------ array conveniences

def depth_forward(net: DepthNet, img) -> np.ndarray:
    """Depth map(s) for ``(H, W, 3)`` or batched images, without gradients."""
    arr = _to_nchw(img)
    with ad.no_grad():
        depth, _ = net(ad.const(arr, dtype=net.encoder.tensors[0].dtype))
        out = ad.forward(depth)[:, 0]
    return out[0] if np.asarray(img).ndim == 3 else out


def pose_forward(net: PoseNet, img_a, img_b) -> Twist:
    a, b = _to_nchw(img_a), _to_nchw(img_b)
    if a.shape != b.shape:
        raise ad.ShapeError(f"pose pair shapes differ: {a.shape} vs {b.shape}")
    dt = net.encoder.tensors[0].dtype
    with ad.no_grad():
        tw = ad.forward(net(ad.const(a, dtype=dt), ad.const(b, dtype=dt)))
    return Twist.from_vector(tw[0])


def pose_forward_batch(net: PoseNet, img_a, img_b) -> np.ndarray:
    dt = net.encoder.tensors[0].dtype
    with ad.no_grad():
        return ad.forward(net(ad.const(_to_nchw(img_a), dtype=dt),
                              ad.const(_to_nchw(img_b), dtype=dt))).astype(np.float64)


def features_from_maps(final_map: np.ndarray) -> np.ndarray:
    """Global-average-pool ``(N, C, h, w)`` and L2-normalize each row."""
    f = final_map.astype(np.float64).mean(axis=(2, 3))
    norm = np.linalg.norm(f, axis=1, keepdims=True)
    out = np.zeros_like(f)
    ok = norm[:, 0] > 0
    out[ok] = f[ok] / norm[ok]
    out[~ok, 0] = 1.0
    return out


def extract_feature(net: DepthNet, img) -> np.ndarray:
    """Unit-norm encoder feature of one image (or a batch, row per image)."""
    arr = _to_nchw(img)
    with ad.no_grad():
        feats = net.encode(ad.const(arr, dtype=net.encoder.tensors[0].dtype))
        final = ad.forward(feats[-1])
    out = features_from_maps(final)
    return out[0] if np.asarray(img).ndim == 3 else out
