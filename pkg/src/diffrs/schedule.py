"""Discrete variance-preserving noise schedules.

A schedule holds the per-step noise variances ``beta_t`` for ``t = 1..T``
and the cumulative signal fractions ``alpha_bar_t = prod_{s<=t}(1 - beta_s)``.
Timestep 0 is clean data, timestep T is (close to) the standard-normal prior.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SCHEDULE_RULES = ("linear", "constant")


@dataclass(eq=False)
class NoiseSchedule:
    """Per-step variances and cumulative products of a discrete VP chain.

    ``betas[i]`` is the variance added on the step from t=i to t=i+1, i.e.
    beta_{i+1}; ``alpha_bars[i]`` is alpha_bar_{i+1}.  Use :meth:`beta` and
    :meth:`alpha_bar` to index by timestep without the off-by-one.
    """

    betas: np.ndarray
    alpha_bars: np.ndarray

    def __post_init__(self):
        self.betas = np.asarray(self.betas, dtype=float)
        self.alpha_bars = np.asarray(self.alpha_bars, dtype=float)
        if self.betas.ndim != 1 or self.alpha_bars.shape != self.betas.shape:
            raise ValueError("betas and alpha_bars must be 1-d arrays of equal length")
        if np.any(self.betas < 0.0) or np.any(self.betas > 1.0):
            raise ValueError("betas must lie in [0, 1]")
        expected = np.cumprod(1.0 - self.betas)
        # relative check; alpha_bar can legitimately reach 0 only when beta hits 1
        scale = np.maximum(np.abs(expected), 1e-300)
        if np.any(np.abs(self.alpha_bars - expected) / scale > 1e-14):
            raise ValueError("alpha_bars do not match the cumulative product of (1 - beta)")
        if np.all(self.betas > 0.0) and np.any(np.diff(self.alpha_bars) >= 0.0):
            raise ValueError("alpha_bars must be strictly decreasing when all betas are positive")
        self.betas.setflags(write=False)
        self.alpha_bars.setflags(write=False)

    @property
    def T(self) -> int:
        return len(self.betas)

    def beta(self, t: int) -> float:
        """beta_t for 1 <= t <= T."""
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")
        return float(self.betas[t - 1])

    def alpha_bar(self, t: int) -> float:
        """alpha_bar_t for 0 <= t <= T, with alpha_bar_0 = 1."""
        if not 0 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [0, {self.T}]")
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])


def make_vp_schedule(
    T: int,
    beta_start: float,
    beta_end: float,
    rule: str = "linear",
) -> NoiseSchedule:
    """Construct a VP schedule with ``T`` steps.

    ``rule="linear"`` interpolates beta from ``beta_start`` to ``beta_end``;
    ``rule="constant"`` uses ``beta_start`` for every step.
    """
    if T < 1:
        raise ValueError("T must be at least 1")
    if not 0.0 <= beta_start <= beta_end < 1.0:
        raise ValueError("need 0 <= beta_start <= beta_end < 1")
    if rule == "linear":
        betas = np.linspace(beta_start, beta_end, T)
    elif rule == "constant":
        betas = np.full(T, beta_start, dtype=float)
    else:
        raise ValueError(f"unknown schedule rule {rule!r}; expected one of {SCHEDULE_RULES}")
    return NoiseSchedule(betas=betas, alpha_bars=np.cumprod(1.0 - betas))
