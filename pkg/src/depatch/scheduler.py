"""Decoupling schedules: the progressive strategy and the fixed-granularity ablations.

``schedule(epoch, total_epochs, mode)`` returns the ``(n, r)`` pair used for
that epoch.  The progressive default splits training into five equal stages
with n = 2..6 and, inside every stage, ramps r through 0.2, 0.3, 0.4, 0.5 in
four equal sub-steps (r restarts at 0.2 whenever n changes).
"""
import math
from dataclasses import dataclass, field
from typing import Optional

NO_MASK = (0, 0.0)

PDS = "pds"
FIXED_N = "fixed_n"
NONE = "none"

PROGRESSIVE = "progressive"
UNIFORM_RANDOM = "uniform_random"
FIXED = "fixed"

DEFAULT_STAGES = (2, 3, 4, 5, 6)


@dataclass
class StrategyMode:
    mode: str = PDS
    n: Optional[int] = None
    r_policy: str = PROGRESSIVE
    r: Optional[float] = None
    r_range: tuple = (0.2, 0.5)
    r_steps: int = 4
    # optional explicit table of (epoch_span, n, r_start, r_end)
    stage_table: Optional[list] = field(default=None)

    def __post_init__(self):
        if self.mode not in (PDS, FIXED_N, NONE):
            raise ValueError(f"unknown strategy mode {self.mode!r}")
        if self.r_policy not in (PROGRESSIVE, UNIFORM_RANDOM, FIXED):
            raise ValueError(f"unknown r policy {self.r_policy!r}")
        if self.mode == FIXED_N and (self.n is None or int(self.n) < 1):
            raise ValueError("fixed_n strategy requires n >= 1")
        if self.r_policy == FIXED and (self.r is None or not 0 <= self.r <= 1):
            raise ValueError("fixed r policy requires r in [0, 1]")
        lo, hi = self.r_range
        if not 0 <= lo <= hi <= 1:
            raise ValueError(f"bad r_range {self.r_range}")
        if self.r_steps < 1:
            raise ValueError("r_steps must be >= 1")
        self.r_range = (float(lo), float(hi))
        if self.stage_table is not None:
            self.stage_table = [tuple(row) for row in self.stage_table]
            for span, n, r0, r1 in self.stage_table:
                if span < 1 or n < 1 or not (0 <= r0 <= 1 and 0 <= r1 <= 1):
                    raise ValueError(f"bad stage table row {(span, n, r0, r1)}")

    @classmethod
    def fixed(cls, n, r_policy=UNIFORM_RANDOM, r=None):
        """The S_n ablations: constant n, r uniform in [0.2, 0.5] each epoch by default."""
        return cls(mode=FIXED_N, n=n, r_policy=r_policy, r=r)

    @classmethod
    def none(cls):
        return cls(mode=NONE)

    @property
    def is_random(self):
        return self.r_policy == UNIFORM_RANDOM

    def to_dict(self):
        return {"mode": self.mode, "n": self.n, "r_policy": self.r_policy, "r": self.r,
                "r_range": list(self.r_range), "r_steps": self.r_steps,
                "stage_table": [list(r) for r in self.stage_table] if self.stage_table else None}


def _stages(total_epochs, mode):
    """List of (start, length, n, r_start, r_end) covering [0, total_epochs)."""
    lo, hi = mode.r_range
    if mode.stage_table is not None:
        spans = [row[0] for row in mode.stage_table]
        if sum(spans) != total_epochs:
            raise ValueError(f"stage table covers {sum(spans)} epochs, run has {total_epochs}")
        out, start = [], 0
        for span, n, r0, r1 in mode.stage_table:
            out.append((start, int(span), int(n), float(r0), float(r1)))
            start += span
        return out
    if mode.mode == FIXED_N:
        return [(0, total_epochs, int(mode.n), lo, hi)]
    k = len(DEFAULT_STAGES)
    bounds = [math.ceil(i * total_epochs / k) for i in range(k + 1)]
    return [(bounds[i], bounds[i + 1] - bounds[i], n, lo, hi)
            for i, n in enumerate(DEFAULT_STAGES) if bounds[i + 1] > bounds[i]]


def _ramp(local, length, r0, r1, steps):
    if steps == 1:
        return r0
    sub = min(steps - 1, (local * steps) // length)
    return round(r0 + (r1 - r0) * sub / (steps - 1), 10)


def schedule(epoch, total_epochs, mode, rng=None):
    """``(n, r)`` for ``epoch``; :data:`NO_MASK` when ``mode`` disables decoupling.

    The uniform-random r policy needs ``rng``.
    """
    if not 0 <= epoch < total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs})")
    if mode.mode == NONE:
        return NO_MASK
    for start, length, n, r0, r1 in _stages(total_epochs, mode):
        if start <= epoch < start + length:
            break
    if mode.r_policy == FIXED:
        return n, float(mode.r)
    if mode.r_policy == UNIFORM_RANDOM:
        if rng is None:
            raise ValueError("uniform-random r policy needs an rng")
        return n, float(rng.uniform(*mode.r_range))
    return n, _ramp(epoch - start, length, r0, r1, mode.r_steps)


def snapshot_schedule(total_epochs, mode):
    """Schedule table for audit and plotting.

    Progressive and fixed policies give one ``(epoch, n, r)`` row per epoch.
    Random policies give one row per stage with r replaced by its range.
    NONE gives one sentinel row per epoch.
    """
    if total_epochs < 1:
        raise ValueError("total_epochs must be >= 1")
    if mode.mode == NONE:
        return [(e,) + NO_MASK for e in range(total_epochs)]
    if mode.r_policy == UNIFORM_RANDOM:
        return [(start, n, mode.r_range) for start, _, n, _, _ in _stages(total_epochs, mode)]
    return [(e,) + schedule(e, total_epochs, mode) for e in range(total_epochs)]
