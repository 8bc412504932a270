"""Dynamic history-fused prediction.

Every unlabeled sample keeps a FIFO of its past predicted class ids. The
FIFO capacity grows exponentially from ``l_min`` to ``l_max`` over training,
and the normalized class counts are blended with the current softmax output
using a weight that ramps linearly after a warm-up epoch.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import EmptyHistory


@dataclass(frozen=True)
class DhpSchedule:
    l_min: int = 50
    l_max: int = 300
    alpha_min: float = 0.1
    alpha_max: float = 0.4
    t0: float = 20
    t_max_epoch: int = 200

    def __post_init__(self):
        if not 1 <= self.l_min <= self.l_max:
            raise ValueError("need 1 <= l_min <= l_max")
        if not 0 <= self.alpha_min <= self.alpha_max <= 1:
            raise ValueError("need 0 <= alpha_min <= alpha_max <= 1")
        if not 0 <= self.t0 < self.t_max_epoch:
            raise ValueError("need 0 <= t0 < t_max_epoch")


def queue_length(t: float, sched: DhpSchedule) -> int:
    """``floor(l_min * (l_max / l_min) ** (t / T))``."""
    ratio = sched.l_max / sched.l_min
    length = sched.l_min * ratio ** (t / sched.t_max_epoch)
    # guard against 299.99999 at the exact endpoint
    return int(math.floor(length + 1e-9))


def alpha_at(t: float, sched: DhpSchedule) -> float:
    """History weight: 0 before ``t0``, then a clamped linear ramp."""
    if t < sched.t0:
        return 0.0
    span = sched.t_max_epoch - sched.t0
    a = sched.alpha_min + (sched.alpha_max - sched.alpha_min) * (t - sched.t0) / span
    return min(sched.alpha_max, a)


class HistoryQueue:
    """Past predictions of one sample, with per-class counts."""

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.entries: deque[int] = deque()
        self.counts = np.zeros(num_classes, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.entries)

    def record(self, class_id: int, capacity: int) -> "HistoryQueue":
        if not 1 <= class_id <= self.num_classes:
            raise ValueError(f"class id {class_id} outside 1..{self.num_classes}")
        self.entries.append(class_id)
        self.counts[class_id - 1] += 1
        while len(self.entries) > capacity:
            old = self.entries.popleft()
            self.counts[old - 1] -= 1
        return self


def record_prediction(queue: HistoryQueue, class_id: int, t: float, sched: DhpSchedule) -> HistoryQueue:
    return queue.record(class_id, queue_length(t, sched))


def history_distribution(queue_or_counts) -> np.ndarray:
    counts = queue_or_counts.counts if isinstance(queue_or_counts, HistoryQueue) else queue_or_counts
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum(axis=-1, keepdims=True)
    if np.any(total == 0):
        raise EmptyHistory("no recorded predictions; fall back to the current distribution")
    return counts / total


def fuse(p_cur, p_hist, alpha):
    """``(1 - alpha) * p_cur + alpha * p_hist``; alpha may be per-sample."""
    alpha = np.asarray(alpha, dtype=np.float64)
    if np.any((alpha < 0) | (alpha > 1)):
        raise ValueError("alpha must lie in [0, 1]")
    if alpha.ndim == 1:
        alpha = alpha[:, None]
    return (1.0 - alpha) * np.asarray(p_cur, dtype=np.float64) + alpha * np.asarray(p_hist, dtype=np.float64)


class HistoryBank:
    """Vectorized ring buffers for many samples at once.

    Behaves like one :class:`HistoryQueue` per sample; class ids are 1-based.
    """

    def __init__(self, num_samples: int, num_classes: int, max_len: int):
        self.num_classes = num_classes
        self.max_len = max_len
        self.buf = np.zeros((num_samples, max_len), dtype=np.int32)
        self.start = np.zeros(num_samples, dtype=np.int64)
        self.size = np.zeros(num_samples, dtype=np.int64)
        self.counts = np.zeros((num_samples, num_classes), dtype=np.int64)

    def record(self, idx: np.ndarray, class_ids: np.ndarray, capacity: int) -> None:
        idx = np.asarray(idx, dtype=np.int64)
        cls = np.asarray(class_ids, dtype=np.int64)
        if len(np.unique(idx)) != len(idx):
            raise ValueError("sample indices in one record call must be distinct")
        capacity = min(capacity, self.max_len)
        pos = (self.start[idx] + self.size[idx]) % self.max_len
        full = self.size[idx] >= self.max_len
        # overwriting the oldest slot when the buffer itself is full
        if full.any():
            old = self.buf[idx[full], pos[full]]
            np.subtract.at(self.counts, (idx[full], old - 1), 1)
            self.start[idx[full]] = (self.start[idx[full]] + 1) % self.max_len
            self.size[idx[full]] -= 1
        self.buf[idx, pos] = cls
        self.size[idx] += 1
        np.add.at(self.counts, (idx, cls - 1), 1)
        while True:
            over = self.size[idx] > capacity
            if not over.any():
                break
            j = idx[over]
            old = self.buf[j, self.start[j]]
            np.subtract.at(self.counts, (j, old - 1), 1)
            self.start[j] = (self.start[j] + 1) % self.max_len
            self.size[j] -= 1

    def distribution(self, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(p_hist, has_history)``; rows without history are zeros."""
        c = self.counts[idx].astype(np.float64)
        tot = c.sum(axis=1)
        has = tot > 0
        p = np.zeros_like(c)
        p[has] = c[has] / tot[has, None]
        return p, has
