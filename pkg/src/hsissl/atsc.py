"""Tripartite sample categorization with EMA-adapted thresholds."""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import IntEnum

import numpy as np

from .errors import EmptyBatch


class SampleCategory(IntEnum):
    EASY = 0
    AMBIGUOUS = 1
    HARD = 2


@dataclass(frozen=True)
class ThresholdState:
    tau_conf: float = 0.9
    tau_gap: float = 12.5
    momentum: float = 0.99

    def __post_init__(self):
        if not 0 <= self.tau_conf <= 1:
            raise ValueError("tau_conf must lie in [0, 1]")
        if self.tau_gap < 0:
            raise ValueError("tau_gap must be >= 0")
        if not 0 <= self.momentum <= 1:
            raise ValueError("momentum must lie in [0, 1]")


def count_gap(counts) -> np.ndarray | int:
    """Top-1 minus top-2 class count along the last axis.

    Accepts a single count vector, a ``(n, K)`` array, or anything with a
    ``counts`` attribute. With fewer than two classes the runner-up count is 0.
    """
    c = np.asarray(getattr(counts, "counts", counts), dtype=np.int64)
    if c.shape[-1] < 2:
        gap = c[..., 0] if c.shape[-1] else np.zeros(c.shape[:-1], dtype=np.int64)
    else:
        top2 = np.partition(c, c.shape[-1] - 2, axis=-1)[..., -2:]
        gap = top2[..., 1] - top2[..., 0]
    return int(gap) if np.ndim(gap) == 0 else gap


def confidence(p_fuse) -> np.ndarray | float:
    conf = np.max(np.asarray(p_fuse, dtype=np.float64), axis=-1)
    return float(conf) if np.ndim(conf) == 0 else conf


def categorize(conf, gap, thresholds: ThresholdState):
    """Easy when both measures clear their thresholds, Hard when neither does.

    Equality counts as clearing. Everything else (one of the two passes) is
    Ambiguous.
    """
    conf_ok = np.asarray(conf) >= thresholds.tau_conf
    gap_ok = np.asarray(gap) >= thresholds.tau_gap
    cat = np.where(conf_ok & gap_ok, SampleCategory.EASY,
                   np.where(~conf_ok & ~gap_ok, SampleCategory.HARD, SampleCategory.AMBIGUOUS))
    if cat.ndim == 0:
        return SampleCategory(int(cat))
    return cat.astype(np.int64)


def categorize_fixed(conf, threshold: float = 0.95):
    """Binary confidence gate used when tripartite categorization is disabled."""
    ok = np.asarray(conf) >= threshold
    return np.where(ok, SampleCategory.EASY, SampleCategory.HARD).astype(np.int64)


def update_thresholds(state: ThresholdState, confidences, gaps) -> ThresholdState:
    """EMA step toward the batch mean confidence and the batch mean count gap."""
    conf = np.asarray(confidences, dtype=np.float64).ravel()
    gap = np.asarray(gaps, dtype=np.float64).ravel()
    if conf.size == 0 or gap.size == 0:
        raise EmptyBatch("threshold update needs a nonempty batch")
    m = state.momentum
    tau_conf = m * state.tau_conf + (1.0 - m) * float(conf.mean())
    tau_gap = m * state.tau_gap + (1.0 - m) * float(gap.mean())
    return replace(state, tau_conf=min(1.0, max(0.0, tau_conf)), tau_gap=max(0.0, tau_gap))
