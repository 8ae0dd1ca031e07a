"""Discrete VP diffusion machinery: forward perturbation, the model's
reverse transition kernel in two modes, and the plain ancestral sampler.

The "model" is a Gaussian mixture playing the role of a pre-trained
generator's implied data distribution; its reverse kernel is either the
exact mixture conditional or the usual Gaussian approximation built from
the analytic score of its perturbed marginal.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .gmm import GaussianMixture, MarginalTable, ReversePosterior
from .schedule import NoiseSchedule

KERNEL_MODES = ("exact_reverse", "gaussian_approx")
VARIANCE_RULES = ("beta", "posterior_matched")

_LOG_2PI = float(np.log(2.0 * np.pi))


class Event(NamedTuple):
    """One entry of a chain's event log."""

    t: int
    kind: str      # propose | accept | reject | reinit_fwd | reinit_accept | restart
    log_L: float
    depth: int = 0


@dataclass
class ChainRecord:
    """State and accounting of one sampling trajectory."""

    x: np.ndarray
    t: int
    log_L: float = 0.0
    nfe_model: int = 0
    nfe_disc: int = 0
    events: list = field(default_factory=list)
    violations: int = 0    # accept decisions whose raw probability exceeded 1
    decisions: int = 0     # accept/reject decisions taken


@dataclass(eq=False)
class DiffusionModel:
    """A fixed generator: implied data distribution plus reverse-kernel mode."""

    p0: GaussianMixture
    kernel_mode: str = "exact_reverse"
    kernel_variance_rule: str = "beta"
    _kernels: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.kernel_mode not in KERNEL_MODES:
            raise ValueError(f"kernel_mode must be one of {KERNEL_MODES}")
        if self.kernel_variance_rule not in VARIANCE_RULES:
            raise ValueError(f"kernel_variance_rule must be one of {VARIANCE_RULES}")

    def kernel(self, schedule: NoiseSchedule) -> "_TransitionKernel":
        k = self._kernels.get(schedule)
        if k is None:
            k = _TransitionKernel(self, schedule)
            self._kernels[schedule] = k
        return k


def chain_streams(seed, chain_index: int):
    """(noise, accept) generator pair for one chain.

    Noise draws and acceptance uniforms come from separate streams so a run
    that accepts everything consumes exactly the base sampler's noise
    sequence; chains are independent and order-insensitive.
    """
    entropy = list(seed) if isinstance(seed, (list, tuple)) else [seed]
    root = np.random.SeedSequence(entropy + [chain_index])
    noise_ss, accept_ss = root.spawn(2)
    return np.random.default_rng(noise_ss), np.random.default_rng(accept_ss)


# ----------------------------------------------------------------------
# forward process
# ----------------------------------------------------------------------

def forward_perturb(x0: np.ndarray, t: int, schedule: NoiseSchedule, rng) -> np.ndarray:
    """x_t = sqrt(ab_t) x_0 + sqrt(1 - ab_t) eps for 1 <= t <= T."""
    if not 1 <= t <= schedule.T:
        raise ValueError(f"timestep {t} outside [1, {schedule.T}]")
    x0 = np.asarray(x0, dtype=float)
    ab = schedule.alpha_bar(t)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * rng.standard_normal(x0.shape)


def forward_perturb_batch(
    x0: np.ndarray, t: np.ndarray, schedule: NoiseSchedule, rng
) -> np.ndarray:
    """Row-wise forward perturbation with a per-row timestep array."""
    x0 = np.asarray(x0, dtype=float)
    t = np.asarray(t, dtype=int)
    if np.any(t < 1) or np.any(t > schedule.T):
        raise ValueError(f"timesteps outside [1, {schedule.T}]")
    ab_by_t = np.concatenate([[1.0], schedule.alpha_bars])
    ab = ab_by_t[t][:, None]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * rng.standard_normal(x0.shape)


def one_step_forward(x_t: np.ndarray, t: int, schedule: NoiseSchedule, rng) -> np.ndarray:
    """x_{t+1} = sqrt(1 - beta_{t+1}) x_t + sqrt(beta_{t+1}) eps for 0 <= t < T."""
    if not 0 <= t < schedule.T:
        raise ValueError(f"timestep {t} outside [0, {schedule.T})")
    x_t = np.asarray(x_t, dtype=float)
    beta = schedule.beta(t + 1)
    return np.sqrt(1.0 - beta) * x_t + np.sqrt(beta) * rng.standard_normal(x_t.shape)


# ----------------------------------------------------------------------
# reverse transition kernel
# ----------------------------------------------------------------------

class _TransitionKernel:
    """Cached per-schedule machinery behind model_transition."""

    def __init__(self, model: DiffusionModel, schedule: NoiseSchedule):
        self.model = model
        self.schedule = schedule
        self.posterior = ReversePosterior(model.p0, schedule)
        self.marginals = MarginalTable(model.p0, schedule)

    def _gaussian_params(self, t: int, x_next: np.ndarray):
        sched = self.schedule
        beta = sched.beta(t + 1)
        score = self.marginals.at(t + 1).score(x_next)
        mean = (x_next + beta * score) / np.sqrt(1.0 - beta)
        if self.model.kernel_variance_rule == "beta":
            var = beta
        else:
            # forward-posterior-matched variance; the t=0 step degenerates
            # under this rule, so it falls back to beta there
            ab_t = sched.alpha_bar(t)
            ab_next = sched.alpha_bar(t + 1)
            var = beta * (1.0 - ab_t) / (1.0 - ab_next) if t > 0 else beta
        return mean, var

    def propose(self, t: int, x_next: np.ndarray, rng) -> tuple[np.ndarray, float]:
        if self.model.kernel_mode == "exact_reverse":
            return self.posterior.sample_one(t, x_next, rng)
        mean, var = self._gaussian_params(t, x_next)
        d = len(mean)
        x = mean + np.sqrt(var) * rng.standard_normal(d)
        logpdf = -0.5 * np.sum((x - mean) ** 2) / var - 0.5 * d * (
            _LOG_2PI + np.log(var)
        )
        return x, float(logpdf)

    def propose_batch(self, t: int, x_next: np.ndarray, rng) -> np.ndarray:
        if self.model.kernel_mode == "exact_reverse":
            return self.posterior.sample_batch(t, x_next, rng)
        sched = self.schedule
        beta = sched.beta(t + 1)
        score = self.marginals.at(t + 1).score(x_next)
        mean = (x_next + beta * score) / np.sqrt(1.0 - beta)
        if self.model.kernel_variance_rule == "beta":
            var = beta
        else:
            ab_t = sched.alpha_bar(t)
            ab_next = sched.alpha_bar(t + 1)
            var = beta * (1.0 - ab_t) / (1.0 - ab_next) if t > 0 else beta
        return mean + np.sqrt(var) * rng.standard_normal(x_next.shape)

    def log_density(self, t: int, x_t: np.ndarray, x_next: np.ndarray) -> np.ndarray:
        """Batched transition log density p(x_t | x_next)."""
        if self.model.kernel_mode == "exact_reverse":
            return self.posterior.log_density(t, x_t, x_next)
        x_t = np.atleast_2d(np.asarray(x_t, dtype=float))
        x_next = np.atleast_2d(np.asarray(x_next, dtype=float))
        out = np.empty(len(x_t))
        for i, (xt, xn) in enumerate(zip(x_t, x_next)):
            mean, var = self._gaussian_params(t, xn)
            d = len(mean)
            out[i] = -0.5 * np.sum((xt - mean) ** 2) / var - 0.5 * d * (
                _LOG_2PI + np.log(var)
            )
        return out


def model_transition(
    model: DiffusionModel,
    schedule: NoiseSchedule,
    t: int,
    x_next: np.ndarray,
    rng,
) -> tuple[np.ndarray, float]:
    """Draw x_t from the model's reverse kernel at x_{t+1}; also reports the
    kernel's log density at the drawn point."""
    if not 0 <= t < schedule.T:
        raise ValueError(f"timestep {t} outside [0, {schedule.T})")
    return model.kernel(schedule).propose(t, np.asarray(x_next, dtype=float), rng)


# ----------------------------------------------------------------------
# base ancestral sampler
# ----------------------------------------------------------------------

def base_sample(
    model: DiffusionModel,
    schedule: NoiseSchedule,
    n_chains: int,
    seed,
) -> list[ChainRecord]:
    """Plain ancestral sampling from N(0, I) down to t = 0, one record per
    chain, with per-chain RNG streams derived from (seed, chain_index)."""
    if n_chains < 1:
        raise ValueError("n_chains must be at least 1")
    kernel = model.kernel(schedule)
    d = model.p0.dim
    records = []
    for i in range(n_chains):
        noise, _ = chain_streams(seed, i)
        x = noise.standard_normal(d)
        rec = ChainRecord(x=x, t=schedule.T)
        for t in range(schedule.T - 1, -1, -1):
            x, _ = kernel.propose(t, x, noise)
            rec.nfe_model += 1
        rec.x = x
        rec.t = 0
        records.append(rec)
    return records


def base_sample_batch(
    model: DiffusionModel, schedule: NoiseSchedule, n: int, rng
) -> list[np.ndarray]:
    """Vectorized ancestral trajectories [x_T, ..., x_0] (single stream);
    used where per-chain reproducibility is not part of the contract."""
    kernel = model.kernel(schedule)
    xs = [rng.standard_normal((n, model.p0.dim))]
    for t in range(schedule.T - 1, -1, -1):
        xs.append(kernel.propose_batch(t, xs[-1], rng))
    return xs
