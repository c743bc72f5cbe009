"""Fixed-size replay buffer that keeps its samples as mutually dissimilar as possible.

A sample is admitted only if its feature is less similar than ``threshold``
to every stored feature.  When an admission overflows the capacity, the
sample with the largest summed cosine similarity to all others (the new one
included) is evicted, which keeps the remaining set maximally diverse.

Stored features are never recomputed.  That is exact while the encoder is
frozen; a variant that trains the encoder would have to refresh them.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .training import TripletBatchItem

EMPTY = float("-inf")
_UNIT_TOL = 1e-5


def _unit(f) -> np.ndarray:
    f = np.asarray(f, dtype=np.float64).ravel()
    if abs(np.linalg.norm(f) - 1.0) > _UNIT_TOL:
        raise ValueError("feature vectors must have unit norm")
    return f


def cosine_similarity(f1, f2) -> float:
    a, b = _unit(f1), _unit(f2)
    # identical vectors are exactly similar, whatever the dot product rounds to
    return 1.0 if np.array_equal(a, b) else float(np.clip(np.dot(a, b), -1.0, 1.0))


@dataclass
class ReplaySample:
    item: TripletBatchItem
    feature: np.ndarray               # unit feature of the newest image I_t
    id: int = -1                      # assigned by the buffer on admission
    domain_tag: str = ""

    def __post_init__(self):
        self.feature = _unit(self.feature)


@dataclass
class AdmissionReport:
    admitted: bool
    max_sim: float                    # -inf when the buffer was empty
    evicted_id: int | None = None
    sample_id: int | None = None

    def to_dict(self) -> dict:
        return {
            "admitted": self.admitted,
            "max_sim": "empty" if self.max_sim == EMPTY else self.max_sim,
            "evicted_id": self.evicted_id,
            "sample_id": self.sample_id,
        }


@dataclass
class Buffer:
    capacity: int = 100
    threshold: float = 0.95
    samples: list = field(default_factory=list)
    next_id: int = 0

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("capacity must be at least 1")
        if not -1.0 <= self.threshold <= 1.0:
            raise ValueError("threshold must lie in [-1, 1]")

    def __len__(self):
        return len(self.samples)

    def features(self) -> np.ndarray:
        if not self.samples:
            return np.zeros((0, 0))
        return np.stack([s.feature for s in self.samples])

    def ids(self) -> list:
        return [s.id for s in self.samples]


def max_similarity(buf: Buffer, f) -> float:
    if not buf.samples:
        return EMPTY
    f = _unit(f)
    feats = buf.features()
    sims = np.clip(feats @ f, -1.0, 1.0)
    sims[np.all(feats == f, axis=1)] = 1.0
    return float(np.max(sims))


def eviction_index(features: np.ndarray, ids) -> int:
    """Index of the row with the largest similarity sum to the other rows.

    Ties go to the smallest id.
    """
    sim = features @ features.T
    sums = sim.sum(axis=1) - np.diag(sim)
    best = sums.max()
    # exact float ties only; the sums of identical inputs are bit-identical
    cands = np.flatnonzero(sums == best)
    return int(min(cands, key=lambda i: ids[i]))


def maybe_add(buf: Buffer, s: ReplaySample) -> AdmissionReport:
    ms = max_similarity(buf, s.feature)
    if not ms < buf.threshold:
        return AdmissionReport(False, ms)
    s.id = buf.next_id
    buf.next_id += 1
    buf.samples.append(s)
    evicted = None
    if len(buf.samples) > buf.capacity:
        k = eviction_index(buf.features(), buf.ids())
        evicted = buf.samples.pop(k).id
    return AdmissionReport(True, ms, evicted, s.id)


def sample_batch(buf: Buffer, n: int, rng_seed=None, exclude_ids=()) -> list:
    """``min(n, eligible)`` distinct samples drawn uniformly without replacement.

    ``rng_seed`` may be an int, a seed sequence or a ``numpy`` Generator.
    """
    if n < 0:
        raise ValueError("n must be non-negative")
    eligible = [s for s in buf.samples if s.id not in set(exclude_ids)]
    k = min(n, len(eligible))
    if k == 0:
        return []
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    picks = rng.choice(len(eligible), size=k, replace=False)
    return [eligible[i] for i in picks]


# -------------------------------------------------------------- persistence

def save_buffer(buf: Buffer, root: str) -> None:
    """Write ``root/<id>/frame{0,1,2}.png`` plus ``meta.json`` per sample and
    ``root/buffer.json`` with the buffer settings."""
    from .io import write_png

    os.makedirs(root, exist_ok=True)
    keep = {str(s.id) for s in buf.samples}
    for name in os.listdir(root):
        path = os.path.join(root, name)
        if os.path.isdir(path) and name.isdigit() and name not in keep:
            for f in os.listdir(path):
                os.remove(os.path.join(path, f))
            os.rmdir(path)
    for s in buf.samples:
        d = os.path.join(root, str(s.id))
        os.makedirs(d, exist_ok=True)
        for k in range(3):
            write_png(os.path.join(d, f"frame{k}.png"), s.item.images[k])
        meta = {"id": s.id, "speeds": list(s.item.speeds), "dt": list(s.item.dt),
                "feature": s.feature.tolist(), "domain_tag": s.domain_tag}
        with open(os.path.join(d, "meta.json"), "w") as fh:
            json.dump(meta, fh)
    with open(os.path.join(root, "buffer.json"), "w") as fh:
        json.dump({"capacity": buf.capacity, "threshold": buf.threshold,
                   "next_id": buf.next_id, "order": buf.ids()}, fh)


def load_buffer(root: str) -> Buffer:
    from .io import read_png

    with open(os.path.join(root, "buffer.json")) as fh:
        head = json.load(fh)
    buf = Buffer(head["capacity"], head["threshold"], next_id=head["next_id"])
    for sid in head["order"]:
        d = os.path.join(root, str(sid))
        with open(os.path.join(d, "meta.json")) as fh:
            meta = json.load(fh)
        imgs = np.stack([read_png(os.path.join(d, f"frame{k}.png")) for k in range(3)])
        item = TripletBatchItem(imgs, meta["speeds"], meta["dt"])
        buf.samples.append(ReplaySample(item, np.asarray(meta["feature"]), meta["id"], meta["domain_tag"]))
    if len(buf) > buf.capacity or any(a >= b for a, b in zip(buf.ids(), buf.ids()[1:])):
        raise ValueError("stored buffer violates its capacity or id order")
    return buf


def pairwise_min_gap(buf: Buffer) -> float:
    """``threshold - max off-diagonal similarity``; positive when diverse."""
    if len(buf) < 2:
        return math.inf
    f = buf.features()
    sim = f @ f.T
    np.fill_diagonal(sim, -np.inf)
    return buf.threshold - float(sim.max())
