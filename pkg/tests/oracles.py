"""Independent reference implementations used as test oracles."""

from __future__ import annotations

import numpy as np


def central_difference(f, arrays, h=1e-5):
    """Numerical gradient of scalar ``f(*arrays)`` w.r.t. each array."""
    grads = []
    for k, a in enumerate(arrays):
        g = np.zeros_like(a, dtype=np.float64)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = a[idx]
            a[idx] = orig + h
            fp = f(*arrays)
            a[idx] = orig - h
            fm = f(*arrays)
            a[idx] = orig
            g[idx] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def rel_error(a, b, floor=1e-6):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), floor))


# ------------------------------------------------------------ replay buffer

class BruteForceBuffer:
    """Diversity buffer written from the definition with explicit loops."""

    def __init__(self, capacity, threshold):
        self.capacity = capacity
        self.threshold = threshold
        self.items = []          # (id, feature)
        self.next_id = 0

    def offer(self, f):
        """Returns ``(admitted, evicted_id)``."""
        best = -np.inf
        for _, g in self.items:
            if all(x == y for x, y in zip(f, g)):
                s = 1.0
            else:
                s = min(max(sum(float(x) * float(y) for x, y in zip(f, g)), -1.0), 1.0)
            best = max(best, s)
        if best >= self.threshold:
            return False, None
        self.items.append((self.next_id, f))
        self.next_id += 1
        if len(self.items) <= self.capacity:
            return True, None
        sums = []
        for i, (id_i, fi) in enumerate(self.items):
            total = 0.0
            for j, (_, fj) in enumerate(self.items):
                if i != j:
                    total += float(np.dot(fi, fj))
            sums.append((total, id_i, i))
        top = max(s for s, _, _ in sums)
        # candidates within rounding of the maximum, then the oldest
        cands = [(id_i, i) for s, id_i, i in sums if abs(s - top) <= 1e-9 * max(1.0, abs(top))]
        id_out, i_out = min(cands)
        self.items.pop(i_out)
        return True, id_out


# ---------------------------------------------------------------- metrics

def brute_force_segment_errors(gt, est, lengths):
    """Segment errors with explicit 4x4 matrices and a linear arclength scan."""
    G = [np.vstack([np.hstack([p.rotation, p.translation[:, None]]), [0, 0, 0, 1]]) for p in gt]
    E = [np.vstack([np.hstack([p.rotation, p.translation[:, None]]), [0, 0, 0, 1]]) for p in est]
    n = len(G)
    arc = [0.0]
    for k in range(1, n):
        arc.append(arc[-1] + float(np.sqrt(np.sum((G[k][:3, 3] - G[k - 1][:3, 3]) ** 2))))
    terr, rerr = [], []
    for L in lengths:
        for i in range(n):
            j = None
            for k in range(i, n):
                if arc[k] - arc[i] >= L:
                    j = k
                    break
            if j is None:
                continue
            dg = np.linalg.inv(G[i]) @ G[j]
            de = np.linalg.inv(E[i]) @ E[j]
            err = np.linalg.inv(de) @ dg
            terr.append(np.sqrt(np.sum(err[:3, 3] ** 2)) / L)
            c = np.clip((np.trace(err[:3, :3]) - 1.0) / 2.0, -1.0, 1.0)
            rerr.append(np.degrees(np.arccos(c)) / L)
    return 100.0 * float(np.mean(terr)), float(np.mean(rerr))


# ------------------------------------------------------------ async runtime

def simulate_drops(arrivals, costs):
    """Discrete-event model of a single learner fed by a latest-wins slot.

    ``arrivals`` are frame times; ``costs(k)`` the duration of the k-th step.
    At equal times a finishing step frees the learner before the arrival is
    handled.  A frame still waiting at the end counts as dropped.
    Returns ``(processed_indices, drops)``.
    """
    processed, drops = [], 0
    slot = None
    free_at = -np.inf
    busy = False
    k = 0
    i = 0
    n = len(arrivals)
    while i < n or busy:
        next_arrival = arrivals[i] if i < n else np.inf
        if busy and free_at <= next_arrival:
            busy = False
            if slot is not None:
                processed.append(slot)
                busy, free_at, slot = True, free_at + costs(k), None
                k += 1
            continue
        if i >= n:
            break
        if busy:
            if slot is not None:
                drops += 1
            slot = i
        else:
            processed.append(i)
            busy, free_at = True, arrivals[i] + costs(k)
            k += 1
        i += 1
    if slot is not None:
        drops += 1
    return processed, drops
