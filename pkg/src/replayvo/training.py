"""Batched loss over image triplets, one optimizer update, and offline pretraining."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .geometry import Camera, inverse_warp, invert_transform, twist_to_transform
from .losses import LossWeights, photometric_loss, smoothness_loss, total_loss, velocity_loss
from .model import Networks

log = logging.getLogger(__name__)


@dataclass
class TripletBatchItem:
    """Frames ``(I_{t-2}, I_{t-1}, I_t)`` as ``(3, H, W, 3)`` plus the measured
    speed and time gap of the two adjacent pairs."""

    images: np.ndarray
    speeds: tuple
    dt: tuple

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        if self.images.ndim != 4 or self.images.shape[0] != 3:
            raise ValueError("a triplet needs three images of identical shape")
        self.speeds = tuple(float(s) for s in self.speeds)
        self.dt = tuple(float(d) for d in self.dt)
        if len(self.speeds) != 2 or len(self.dt) != 2:
            raise ValueError("need one speed and one dt per adjacent pair")
        if min(self.speeds) < 0 or min(self.dt) <= 0:
            raise ValueError("speeds must be >= 0 and dt > 0")

    @property
    def distances(self) -> np.ndarray:
        return np.asarray(self.speeds) * np.asarray(self.dt)


@dataclass
class BatchOutput:
    loss: ad.Node
    photometric: ad.Node
    smoothness: ad.Node
    velocity: ad.Node
    depth: ad.Node
    twists: ad.Node       # (2N, 6): rows [0, N) are O_{t-2->t-1}, [N, 2N) are O_{t-1->t}


def batch_graph(nets: Networks, items, cam: Camera, weights: LossWeights,
                rotation: bool = True) -> BatchOutput:
    """Build (but do not evaluate) the loss graph for a list of triplets.

    ``rotation=False`` zeroes the predicted rotations (translation-only warm-up).
    """
    dtype = nets.depth.encoder.tensors[0].dtype
    # frozen groups take no part in differentiation
    for g in nets.param_groups():
        for t in g.tensors:
            t.requires_grad = g.trainable
    imgs = np.stack([it.images for it in items]).transpose(1, 0, 4, 2, 3)  # (3, N, C, H, W)
    prev, center, nxt = (ad.const(np.ascontiguousarray(imgs[k]), dtype=dtype) for k in range(3))
    n = len(items)

    depth, _ = nets.depth(center)
    twists = nets.pose(ad.concat([prev, center], axis=0), ad.concat([center, nxt], axis=0))
    if not rotation:
        twists = twists * ad.const(np.array([0, 0, 0, 1, 1, 1]), dtype=dtype)
    rot, trans = twist_to_transform(twists)
    # target is the centre frame; O_{t-2->t-1} must be inverted to map it into t-2
    r_prev, t_prev = invert_transform(rot[0:n], trans[0:n])
    w_prev, m_prev = inverse_warp(prev, depth, (r_prev, t_prev), cam)
    w_next, m_next = inverse_warp(nxt, depth, (rot[n:], trans[n:]), cam)

    l_pr = ad.mean(photometric_loss(center, w_prev, w_next, (m_prev, m_next), per_item=True))
    l_sm = smoothness_loss(depth, center)
    speeds = np.array([it.speeds[0] for it in items] + [it.speeds[1] for it in items])
    dts = np.array([it.dt[0] for it in items] + [it.dt[1] for it in items])
    l_vel = velocity_loss(twists, speeds, dts)
    return BatchOutput(total_loss(l_pr, l_sm, l_vel, weights), l_pr, l_sm, l_vel, depth, twists)


def train_step(nets: Networks, items, cam: Camera, weights: LossWeights, opt: ad.OptState,
               rotation: bool = True):
    """Forward, backward and one Adam update; returns the evaluated batch output."""
    out = batch_graph(nets, items, cam, weights, rotation)
    ad.forward(out.loss)
    grads = ad.backward(out.loss)
    groups = nets.param_groups()
    trainable_ids = {t.id for g in groups if g.trainable for t in g.tensors}
    missing = trainable_ids - grads.keys()
    if missing:
        raise ad.GraphStateError(f"{len(missing)} trainable tensors received no gradient")
    ad.optimizer_step(groups, grads, opt)
    return out


# ----------------------------------------------------------------- pretrain

@dataclass
class PretrainConfig:
    epochs: int = 20
    batch_size: int = 4
    lr: float = 1e-3
    lr_final: float = 1e-4          # geometric decay from ``lr`` over all steps
    rotation_warmup: int = 500      # leading steps with rotations held at zero
    seed: int = 0


def sequence_triplets(seq) -> list:
    """Every consecutive frame triplet of a rendered/loaded sequence."""
    items = []
    ts = np.asarray(seq.timestamps)
    for t in range(2, len(seq.frames)):
        dts = (ts[t - 1] - ts[t - 2], ts[t] - ts[t - 1])
        items.append(TripletBatchItem(seq.frames[t - 2:t + 1], (seq.speeds[t - 2], seq.speeds[t - 1]), dts))
    return items


def pretrain(nets: Networks, seq, cfg: PretrainConfig = PretrainConfig(),
             weights: LossWeights = LossWeights(), callback=None) -> list:
    """Offline training of both networks (encoders included) on one sequence.

    Rotations are held at zero for the first ``rotation_warmup`` steps:
    sideways motion past fronto-parallel planes lets a yaw mimic the far-field
    flow, and starting with translation only keeps training out of that trap.
    Returns the mean loss of every epoch.
    """
    for g in nets.param_groups():
        g.trainable = True
    items = sequence_triplets(seq)
    rng = np.random.default_rng(cfg.seed)
    opt = ad.OptState(lr=cfg.lr)
    per_epoch = -(-len(items) // cfg.batch_size)
    total = max(cfg.epochs * per_epoch, 1)
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(items))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            opt.lr = cfg.lr * (cfg.lr_final / cfg.lr) ** (step / total)
            batch = [items[i] for i in order[start:start + cfg.batch_size]]
            out = train_step(nets, batch, seq.camera, weights, opt, rotation=step >= cfg.rotation_warmup)
            losses.append(float(out.loss.value))
            step += 1
        history.append(float(np.mean(losses)))
        log.info("pretrain epoch %d loss %.5f", epoch, history[-1])
        if callback is not None:
            callback(epoch, history[-1])
    return history
