"""Sequential rejection sampling on the reverse transitions.

The transition from t+1 to t proposes from the model kernel and accepts with
probability L_t / (M_t * L_{t+1}) where L_t is the marginal density ratio of
data to model at time t; a rejected proposal is pushed forward in time and
re-screened against the marginals before the transition is retried (mutual
recursion realized as an explicit frame stack so deep rejection cascades
cannot overflow).  Chains start from N(0, I) filtered by a marginal test at
time T, and a per-attempt cap on kernel evaluations forces a restart from the
prior when a chain loops.

Rejection constants come from percentiles of ratios recorded along plain
base-sampler trajectories, floored at one.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple

import numpy as np

from .diffusion import (
    ChainRecord,
    DiffusionModel,
    Event,
    base_sample_batch,
    chain_streams,
    one_step_forward,
)
from .discriminator import DiscriminatorModel, LOGIT_CLAMP, disc_logit_batch
from .gmm import (
    LOG_DENSITY_FLOOR,
    GaussianMixture,
    forward_marginal,
    standard_normal,
)
from .schedule import NoiseSchedule

TERMINAL_RATIO_MODES = ("prior", "model")


# ----------------------------------------------------------------------
# density-ratio estimators
# ----------------------------------------------------------------------

class OracleRatio:
    """Analytic log ratio of the data and model perturbed marginals.

    ``terminal`` picks the denominator at t = T: the sampler's actual
    N(0, I) prior ("prior", the default) or the model's own terminal
    marginal ("model").
    """

    mode = "oracle"

    def __init__(
        self,
        q0: GaussianMixture,
        p0: GaussianMixture | DiffusionModel,
        schedule: NoiseSchedule,
        terminal: str = "prior",
    ):
        if isinstance(p0, DiffusionModel):
            p0 = p0.p0
        if q0.dim != p0.dim:
            raise ValueError("data and model mixtures must share a dimension")
        if terminal not in TERMINAL_RATIO_MODES:
            raise ValueError(f"terminal must be one of {TERMINAL_RATIO_MODES}")
        self.q0 = q0
        self.p0 = p0
        self.schedule = schedule
        self.terminal = terminal
        self._tables: dict[int, tuple] = {}

    def _table(self, t: int) -> tuple:
        tab = self._tables.get(t)
        if tab is not None:
            return tab
        q_t = forward_marginal(self.q0, self.schedule, t)
        if t == self.schedule.T and self.terminal == "prior":
            p_t = standard_normal(self.p0.dim)
        else:
            p_t = forward_marginal(self.p0, self.schedule, t)
        chol_inv = np.concatenate([q_t._chol_inv, p_t._chol_inv])
        means = np.concatenate([q_t.means, p_t.means])
        log_norm = np.concatenate([q_t._log_norm, p_t._log_norm])
        log_w = np.concatenate([q_t._log_weights, p_t._log_weights])
        m, d = means.shape
        # one stacked (m*d, d) operator turns all Mahalanobis terms into a
        # single matrix-vector product
        tab = (
            chol_inv.reshape(m * d, d),
            np.einsum("kij,kj->ki", chol_inv, means).reshape(m * d),
            log_norm,
            log_w,
            q_t.n_components,
            m,
            d,
        )
        self._tables[t] = tab
        return tab

    def log_ratio(self, x: np.ndarray, t: int) -> float:
        flat, shift, log_norm, log_w, kq, m, d = self._table(t)
        z = flat @ x
        z -= shift
        z *= z
        comp = log_norm - 0.5 * z.reshape(m, d).sum(axis=1)
        np.maximum(comp, LOG_DENSITY_FLOOR, out=comp)
        comp += log_w
        cq = comp[:kq]
        cp = comp[kq:]
        mq = cq.max()
        mp = cp.max()
        return float(
            mq + math.log(np.exp(cq - mq).sum()) - mp - math.log(np.exp(cp - mp).sum())
        )

    def log_ratio_batch(self, x: np.ndarray, t: int) -> np.ndarray:
        flat, shift, log_norm, log_w, kq, m, d = self._table(t)
        z = x @ flat.T - shift[None, :]
        z *= z
        comp = log_norm[None, :] - 0.5 * z.reshape(len(x), m, d).sum(axis=2)
        np.maximum(comp, LOG_DENSITY_FLOOR, out=comp)
        comp += log_w[None, :]

        def lse(a):
            mm = a.max(axis=1, keepdims=True)
            return mm[:, 0] + np.log(np.exp(a - mm).sum(axis=1))

        return lse(comp[:, :kq]) - lse(comp[:, kq:])


class DiscriminatorRatio:
    """Log ratio read off a trained discriminator's logit, clamped so its
    exponential stays finite."""

    mode = "disc"

    def __init__(self, model: DiscriminatorModel, schedule: NoiseSchedule):
        self.model = model
        self.schedule = schedule
        self._emb: dict[int, np.ndarray] = {}

    def _embedding(self, t: int) -> np.ndarray:
        emb = self._emb.get(t)
        if emb is None:
            freqs = self.model.freq_scale * 2.0 ** np.arange(self.model.num_frequencies)
            phase = self.schedule.alpha_bar(t) * freqs
            emb = np.concatenate([np.sin(phase), np.cos(phase)])
            self._emb[t] = emb
        return emb

    def log_ratio(self, x: np.ndarray, t: int) -> float:
        h = np.concatenate([x, self._embedding(t)])
        weights = self.model.weights
        biases = self.model.biases
        for i in range(len(weights) - 1):
            z = h @ weights[i] + biases[i]
            h = z / (1.0 + np.exp(-z))
        z = float(h @ weights[-1][:, 0] + biases[-1][0])
        return min(max(z, -LOGIT_CLAMP), LOGIT_CLAMP)

    def log_ratio_batch(self, x: np.ndarray, t: int) -> np.ndarray:
        z = disc_logit_batch(self.model, x, t, self.schedule)
        return np.clip(z, -LOGIT_CLAMP, LOGIT_CLAMP)


class ConstantRatio:
    """Fixed log ratio; zero models a discriminator that cannot tell the
    streams apart, which must reduce the sampler to the plain one."""

    mode = "constant"

    def __init__(self, value: float = 0.0):
        if not math.isfinite(value):
            raise ValueError("log ratio must be finite")
        self.value = float(value)

    def log_ratio(self, x: np.ndarray, t: int) -> float:
        return self.value

    def log_ratio_batch(self, x: np.ndarray, t: int) -> np.ndarray:
        return np.full(len(x), self.value)


# ----------------------------------------------------------------------
# rejection constants
# ----------------------------------------------------------------------

@dataclass
class RejectionConstants:
    """Per-timestep envelope constants, stored in log space.

    ``log_m[t]`` bounds the transition ratio for the step to time t
    (t = 0..T-1); ``log_m_marginal[t]`` bounds the marginal ratio at time t
    (t = 0..T, the last entry screening prior draws).  ``max_evals`` is the
    per-attempt cap on kernel evaluations (None = unbounded).
    """

    gamma: float
    log_m: np.ndarray
    log_m_marginal: np.ndarray
    max_evals: int | None = None

    def __post_init__(self):
        self.log_m = np.asarray(self.log_m, dtype=float)
        self.log_m_marginal = np.asarray(self.log_m_marginal, dtype=float)
        if not 0.0 <= self.gamma <= 100.0:
            raise ValueError("gamma is a percentile in [0, 100]")
        if len(self.log_m_marginal) != len(self.log_m) + 1:
            raise ValueError("need T transition constants and T+1 marginal constants")
        if np.any(self.log_m < 0.0) or np.any(self.log_m_marginal < 0.0):
            raise ValueError("rejection constants must be at least 1 (log at least 0)")
        if not (np.all(np.isfinite(self.log_m)) and np.all(np.isfinite(self.log_m_marginal))):
            raise ValueError("rejection constants must be finite")
        if self.max_evals is not None and self.max_evals < 1:
            raise ValueError("max_evals must be positive or None")

    @property
    def T(self) -> int:
        return len(self.log_m)


def trivial_constants(T: int, max_evals: int | None = None) -> RejectionConstants:
    """All constants one; with a flat ratio this reduces to the base sampler."""
    return RejectionConstants(
        gamma=100.0,
        log_m=np.zeros(T),
        log_m_marginal=np.zeros(T + 1),
        max_evals=max_evals,
    )


def constants_to_dict(c: RejectionConstants) -> dict:
    return {
        "gamma": c.gamma,
        "K": c.max_evals,
        "logM": c.log_m.tolist(),
        "logM_marginal": c.log_m_marginal.tolist(),
    }


def constants_from_dict(obj: dict) -> RejectionConstants:
    try:
        return RejectionConstants(
            gamma=float(obj["gamma"]),
            log_m=np.array(obj["logM"], dtype=float),
            log_m_marginal=np.array(obj["logM_marginal"], dtype=float),
            max_evals=None if obj["K"] is None else int(obj["K"]),
        )
    except KeyError as exc:
        raise ValueError(f"malformed constants file: missing {exc}") from exc


def save_constants(c: RejectionConstants, path) -> None:
    with open(path, "w") as fh:
        json.dump(constants_to_dict(c), fh)


def load_constants(path) -> RejectionConstants:
    with open(path) as fh:
        return constants_from_dict(json.load(fh))


# ----------------------------------------------------------------------
# calibration
# ----------------------------------------------------------------------

def nearest_rank_percentile(values: np.ndarray, gamma: float) -> float:
    """The gamma-th percentile by the nearest-rank rule."""
    values = np.sort(np.asarray(values, dtype=float))
    if len(values) == 0:
        raise ValueError("cannot take a percentile of nothing")
    rank = max(int(math.ceil(gamma / 100.0 * len(values))), 1)
    return float(values[rank - 1])


@dataclass
class CalibrationTrace:
    """Raw ratio records from base-sampler trajectories.

    Row t of ``transition_log_ratios`` holds log L_t(x_t) - log L_{t+1}(x_{t+1})
    over chains; row t of ``marginal_log_ratios`` holds log L_t at the visited
    state (row T coming from the prior draws themselves).
    """

    transition_log_ratios: np.ndarray   # (T, n)
    marginal_log_ratios: np.ndarray     # (T+1, n)


def collect_calibration_ratios(
    model: DiffusionModel,
    schedule: NoiseSchedule,
    estimator,
    n_calib: int,
    seed,
) -> CalibrationTrace:
    """Run base-sampler trajectories and record the ratios the sampler will
    later test against.  Uses the same estimator mode as sampling so the
    constants bound the ratios actually used."""
    if n_calib < 2:
        raise ValueError("need at least two calibration chains")
    rng = np.random.default_rng(seed)
    xs = base_sample_batch(model, schedule, n_calib, rng)   # [x_T, ..., x_0]
    T = schedule.T
    marginal = np.empty((T + 1, n_calib))
    for i, x in enumerate(xs):
        marginal[T - i] = estimator.log_ratio_batch(x, T - i)
    transition = marginal[:T] - marginal[1:]
    return CalibrationTrace(
        transition_log_ratios=transition, marginal_log_ratios=marginal
    )


def constants_from_trace(
    trace: CalibrationTrace, gamma: float, max_evals: int | None = None
) -> RejectionConstants:
    """Percentile-with-floor constants from recorded ratios."""
    T = trace.transition_log_ratios.shape[0]
    log_m = np.array(
        [
            max(0.0, nearest_rank_percentile(trace.transition_log_ratios[t], gamma))
            for t in range(T)
        ]
    )
    log_m_marg = np.array(
        [
            max(0.0, nearest_rank_percentile(trace.marginal_log_ratios[t], gamma))
            for t in range(T + 1)
        ]
    )
    return RejectionConstants(
        gamma=gamma, log_m=log_m, log_m_marginal=log_m_marg, max_evals=max_evals
    )


def calibrate_constants(
    model: DiffusionModel,
    schedule: NoiseSchedule,
    estimator,
    n_calib: int,
    gamma: float,
    seed,
    max_evals: int | None = None,
) -> RejectionConstants:
    trace = collect_calibration_ratios(model, schedule, estimator, n_calib, seed)
    return constants_from_trace(trace, gamma, max_evals)


# ----------------------------------------------------------------------
# acceptance
# ----------------------------------------------------------------------

def acceptance_prob(log_L_t: float, log_L_next: float, log_m_t: float) -> float:
    """min(1, L_t / (M_t * L_{t+1})); values above one are clamped."""
    return math.exp(min(0.0, log_L_t - log_L_next - log_m_t))


# ----------------------------------------------------------------------
# the engine
# ----------------------------------------------------------------------

class Strategy(Enum):
    """Sampler variants: the full method, its ablations, and the plain sampler."""

    FULL_DIFFRS = "FullDiffRS"
    MARGINAL_ONLY_T0 = "MarginalOnlyT0"
    MARGINAL_SEQUENTIAL = "MarginalSequential"
    REINIT_ONE_STEP_FORWARD_ONLY = "ReinitOneStepForwardOnly"
    REINIT_FROM_PRIOR = "ReinitFromPrior"
    NO_REJECTION = "NoRejection"


class BudgetExhausted(RuntimeError):
    """A chain attempt hit the kernel-evaluation cap; restart from the prior."""


class _RestartChain(Exception):
    """Internal: the strategy demands a restart from the prior."""


class SampleStreams(NamedTuple):
    noise: object
    accept: object


@dataclass
class EvalBudget:
    """Per-attempt count of model-kernel evaluations against a cap."""

    limit: int | None = None
    used: int = 0

    def charge(self) -> None:
        if self.limit is not None and self.used >= self.limit:
            raise BudgetExhausted(f"attempt exceeded {self.limit} kernel evaluations")
        self.used += 1

    def reset(self) -> None:
        self.used = 0


@dataclass
class _OsdFrame:
    t: int
    x_next: np.ndarray | None
    log_L_next: float


@dataclass
class _ReinitFrame:
    t1: int
    x_rej: np.ndarray
    depth: int


@dataclass(eq=False)
class _EngineCtx:
    kernel: object
    schedule: NoiseSchedule
    estimator: object
    constants: RejectionConstants
    streams: SampleStreams
    budget: EvalBudget
    record: ChainRecord
    strategy: Strategy = Strategy.FULL_DIFFRS


def _run_engine(stack: list, ctx: _EngineCtx):
    """Drive the transition/re-initialization frames to one accepted value.

    A completed frame leaves its (x, log_L) in ``result``; the frame below
    consumes it as its (new) parent state.  Transition frames loop in place,
    re-initialization frames either finish or expand into a deeper climb
    followed by a transition retry at their own level.
    """
    rec = ctx.record
    noise, accept = ctx.streams
    constants = ctx.constants
    estimator = ctx.estimator
    T = ctx.schedule.T
    marginal_acceptance = ctx.strategy is Strategy.MARGINAL_SEQUENTIAL
    result = None
    while stack:
        frame = stack[-1]
        if type(frame) is _OsdFrame:
            if result is not None:
                frame.x_next, frame.log_L_next = result
                result = None
            ctx.budget.charge()
            x_prop, _ = ctx.kernel.propose(frame.t, frame.x_next, noise)
            rec.nfe_model += 1
            log_L = estimator.log_ratio(x_prop, frame.t)
            rec.nfe_disc += 1
            rec.events.append(Event(frame.t, "propose", log_L))
            if marginal_acceptance:
                log_A = log_L - constants.log_m_marginal[frame.t]
            else:
                log_A = log_L - frame.log_L_next - constants.log_m[frame.t]
            rec.decisions += 1
            if log_A > 0.0:
                rec.violations += 1
            if accept.random() < math.exp(min(0.0, log_A)):
                rec.events.append(Event(frame.t, "accept", log_L))
                stack.pop()
                result = (x_prop, log_L)
            else:
                rec.events.append(Event(frame.t, "reject", log_L))
                if ctx.strategy is Strategy.REINIT_FROM_PRIOR:
                    raise _RestartChain
                if ctx.strategy is Strategy.REINIT_ONE_STEP_FORWARD_ONLY:
                    x_up = one_step_forward(x_prop, frame.t, ctx.schedule, noise)
                    log_L_up = estimator.log_ratio(x_up, frame.t + 1)
                    rec.nfe_disc += 1
                    rec.events.append(Event(frame.t + 1, "reinit_fwd", log_L_up, 1))
                    frame.x_next, frame.log_L_next = x_up, log_L_up
                else:
                    stack.append(_ReinitFrame(frame.t + 1, x_prop, 1))
        else:
            x_fwd = one_step_forward(frame.x_rej, frame.t1 - 1, ctx.schedule, noise)
            log_L = estimator.log_ratio(x_fwd, frame.t1)
            rec.nfe_disc += 1
            rec.events.append(Event(frame.t1, "reinit_fwd", log_L, frame.depth))
            u = accept.random()
            if frame.t1 == T:
                accepted = True
            else:
                log_A = log_L - constants.log_m_marginal[frame.t1]
                rec.decisions += 1
                if log_A > 0.0:
                    rec.violations += 1
                accepted = u < math.exp(min(0.0, log_A))
            if accepted:
                rec.events.append(Event(frame.t1, "reinit_accept", log_L, frame.depth))
                stack.pop()
                result = (x_fwd, log_L)
            else:
                stack.pop()
                stack.append(_OsdFrame(frame.t1, None, math.nan))
                stack.append(_ReinitFrame(frame.t1 + 1, x_fwd, frame.depth + 1))
    return result


def one_step_diffrs(
    t: int,
    x_next: np.ndarray,
    log_L_next: float,
    model: DiffusionModel,
    schedule: NoiseSchedule,
    estimator,
    constants: RejectionConstants,
    streams: SampleStreams,
    budget: EvalBudget,
    record: ChainRecord,
    strategy: Strategy = Strategy.FULL_DIFFRS,
):
    """Accepted (x_t, log_L_t) given the parent state at t+1.

    Rejections re-initialize the parent before the transition is retried;
    counters and the event log accumulate on ``record``.  Raises
    BudgetExhausted when the attempt cap is hit.
    """
    if not 0 <= t < schedule.T:
        raise ValueError(f"timestep {t} outside [0, {schedule.T})")
    ctx = _EngineCtx(
        kernel=model.kernel(schedule),
        schedule=schedule,
        estimator=estimator,
        constants=constants,
        streams=streams,
        budget=budget,
        record=record,
        strategy=strategy,
    )
    return _run_engine([_OsdFrame(t, np.asarray(x_next, dtype=float), log_L_next)], ctx)


def reinitialize(
    t_plus_1: int,
    x_rejected: np.ndarray,
    model: DiffusionModel,
    schedule: NoiseSchedule,
    estimator,
    constants: RejectionConstants,
    streams: SampleStreams,
    budget: EvalBudget,
    record: ChainRecord,
    strategy: Strategy = Strategy.FULL_DIFFRS,
):
    """Push a rejected sample one step forward and screen it against the
    marginals, climbing further on rejection; returns (x_{t+1}, log_L_{t+1})."""
    if not 1 <= t_plus_1 <= schedule.T:
        raise ValueError(f"timestep {t_plus_1} outside [1, {schedule.T}]")
    ctx = _EngineCtx(
        kernel=model.kernel(schedule),
        schedule=schedule,
        estimator=estimator,
        constants=constants,
        streams=streams,
        budget=budget,
        record=record,
        strategy=strategy,
    )
    return _run_engine(
        [_ReinitFrame(t_plus_1, np.asarray(x_rejected, dtype=float), 1)], ctx
    )


# ----------------------------------------------------------------------
# full sampler
# ----------------------------------------------------------------------

def _sample_prior(ctx: _EngineCtx, dim: int):
    """Marginal rejection sampling of the N(0, I) prior draw at time T."""
    rec = ctx.record
    noise, accept = ctx.streams
    T = ctx.schedule.T
    while True:
        x = noise.standard_normal(dim)
        log_L = ctx.estimator.log_ratio(x, T)
        rec.nfe_disc += 1
        rec.events.append(Event(T, "propose", log_L))
        log_A = log_L - ctx.constants.log_m_marginal[T]
        rec.decisions += 1
        if log_A > 0.0:
            rec.violations += 1
        if accept.random() < math.exp(min(0.0, log_A)):
            rec.events.append(Event(T, "accept", log_L))
            return x, log_L
        rec.events.append(Event(T, "reject", log_L))


def diffrs_sample(
    model: DiffusionModel,
    schedule: NoiseSchedule,
    estimator,
    constants: RejectionConstants,
    strategy: Strategy,
    n_chains: int,
    seed,
) -> tuple[np.ndarray, list[ChainRecord]]:
    """Rejection-refined samples at t = 0 plus per-chain records.

    Per-chain RNG streams derive from (seed, chain_index); noise draws and
    acceptance uniforms are separated so an all-accept run reproduces the
    plain sampler's trajectories bit for bit.
    """
    if n_chains < 1:
        raise ValueError("n_chains must be at least 1")
    if isinstance(strategy, str):
        strategy = Strategy(strategy)
    T = schedule.T
    if constants.T != T:
        raise ValueError(
            f"constants were calibrated for T={constants.T}, schedule has T={T}"
        )
    if constants.max_evals is not None and constants.max_evals < T:
        raise ValueError("max_evals below T can never finish a descent")
    kernel = model.kernel(schedule)
    d = model.p0.dim
    records: list[ChainRecord] = []
    samples = np.empty((n_chains, d))
    for i in range(n_chains):
        noise, accept = chain_streams(seed, i)
        rec = ChainRecord(x=np.empty(d), t=T)
        if strategy is Strategy.NO_REJECTION:
            x = noise.standard_normal(d)
            for t in range(T - 1, -1, -1):
                x, _ = kernel.propose(t, x, noise)
                rec.nfe_model += 1
            log_L = 0.0
        elif strategy is Strategy.MARGINAL_ONLY_T0:
            while True:
                x = noise.standard_normal(d)
                for t in range(T - 1, -1, -1):
                    x, _ = kernel.propose(t, x, noise)
                    rec.nfe_model += 1
                log_L = estimator.log_ratio(x, 0)
                rec.nfe_disc += 1
                rec.events.append(Event(0, "propose", log_L))
                log_A = log_L - constants.log_m_marginal[0]
                rec.decisions += 1
                if log_A > 0.0:
                    rec.violations += 1
                if accept.random() < math.exp(min(0.0, log_A)):
                    rec.events.append(Event(0, "accept", log_L))
                    break
                rec.events.append(Event(0, "reject", log_L))
                rec.events.append(Event(T, "restart", math.nan))
        else:
            ctx = _EngineCtx(
                kernel=kernel,
                schedule=schedule,
                estimator=estimator,
                constants=constants,
                streams=SampleStreams(noise, accept),
                budget=EvalBudget(constants.max_evals),
                record=rec,
                strategy=strategy,
            )
            while True:
                try:
                    ctx.budget.reset()
                    x, log_L = _sample_prior(ctx, d)
                    for t in range(T - 1, -1, -1):
                        x, log_L = _run_engine([_OsdFrame(t, x, log_L)], ctx)
                    break
                except (BudgetExhausted, _RestartChain):
                    rec.events.append(Event(T, "restart", math.nan))
        rec.x = x
        rec.t = 0
        rec.log_L = log_L
        samples[i] = x
        records.append(rec)
    return samples, records
