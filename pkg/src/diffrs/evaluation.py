"""Sample-quality distances, bound estimators, and run summaries.

Sliced Wasserstein and energy distance stand in for feature-space metrics at
desk scale.  The bound estimators Monte-Carlo the KL upper bound of the base
sampler and the discriminator-dependent correction term; with exact reverse
kernels and analytic ratios the two cancel, which the acceptance suite checks
numerically.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .gmm import GaussianMixture, ReversePosterior, forward_marginal, standard_normal
from .schedule import NoiseSchedule

# Pooled-size cap for the permutation null in >=2 dimensions, where the exact
# statistic needs the full pairwise-distance matrix.  One dimension uses an
# O(n log n) path and is never capped.
ENERGY_TEST_MAX_POOLED = 10_000


# ----------------------------------------------------------------------
# distances
# ----------------------------------------------------------------------

def wasserstein1_1d(a: np.ndarray, b: np.ndarray) -> float:
    """Order-statistic W1 between two 1-d samples (quantile interpolation
    when sizes differ)."""
    a = np.sort(np.asarray(a, dtype=float).ravel())
    b = np.sort(np.asarray(b, dtype=float).ravel())
    if len(a) == len(b):
        return float(np.mean(np.abs(a - b)))
    m = max(len(a), len(b))
    qs = (np.arange(m) + 0.5) / m
    qa = a[np.minimum((qs * len(a)).astype(np.intp), len(a) - 1)]
    qb = b[np.minimum((qs * len(b)).astype(np.intp), len(b) - 1)]
    return float(np.mean(np.abs(qa - qb)))


def sliced_wasserstein(
    a: np.ndarray,
    b: np.ndarray,
    n_projections: int = 128,
    rng: np.random.Generator | None = None,
) -> float:
    """Mean 1-d W1 distance over random unit projections."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    if len(a) == 0 or len(b) == 0:
        raise ValueError("both sample sets must be nonempty")
    rng = rng if rng is not None else np.random.default_rng(0)
    d = a.shape[1]
    dirs = rng.standard_normal((n_projections, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    total = 0.0
    for u in dirs:
        total += wasserstein1_1d(a @ u, b @ u)
    return total / n_projections


def _cross_distance_sum_1d(a: np.ndarray, b: np.ndarray) -> float:
    """sum_{i,j} |a_i - b_j| in O((n+m) log(n+m)) via merged prefix sums."""
    a = np.sort(a)
    b = np.sort(b)
    # positions of each a_i within b
    idx = np.searchsorted(b, a, side="left")
    csum_b = np.concatenate([[0.0], np.cumsum(b)])
    below = csum_b[idx]          # sum of b_j <= a_i
    n_below = idx
    total_b = csum_b[-1]
    m = len(b)
    # sum_j |a_i - b_j| = a_i*n_below - below + (total_b - below) - a_i*(m - n_below)
    per_a = a * n_below - below + (total_b - below) - a * (m - n_below)
    return float(per_a.sum())


def _pairwise_distance_sum(x: np.ndarray, y: np.ndarray, chunk: int = 2048) -> float:
    total = 0.0
    for start in range(0, len(x), chunk):
        block = x[start : start + chunk]
        diff = block[:, None, :] - y[None, :, :]
        total += float(np.sqrt((diff**2).sum(axis=2)).sum())
    return total


def energy_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Energy distance 2 E|X-Y| - E|X-X'| - E|Y-Y'| with Euclidean norms."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    n, m = len(a), len(b)
    if n == 0 or m == 0:
        raise ValueError("both sample sets must be nonempty")
    if a.shape[1] == 1:
        av, bv = a.ravel(), b.ravel()
        e_xy = _cross_distance_sum_1d(av, bv) / (n * m)
        e_xx = _cross_distance_sum_1d(av, av) / (n * n)
        e_yy = _cross_distance_sum_1d(bv, bv) / (m * m)
    else:
        e_xy = _pairwise_distance_sum(a, b) / (n * m)
        e_xx = _pairwise_distance_sum(a, a) / (n * n)
        e_yy = _pairwise_distance_sum(b, b) / (m * m)
    return 2.0 * e_xy - e_xx - e_yy


def energy_two_sample_test(
    a: np.ndarray,
    b: np.ndarray,
    n_permutations: int = 199,
    rng: np.random.Generator | None = None,
) -> tuple[float, float]:
    """Permutation test of H0: same distribution.  Returns (statistic, p).

    In one dimension the exact statistic is recomputed per permutation via
    sorting.  In higher dimensions the pooled pairwise-distance matrix is
    precomputed and label permutations reduce to indicator quadratic forms;
    groups are subsampled so the pool stays within ENERGY_TEST_MAX_POOLED.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    observed = energy_distance(a, b)
    if a.shape[1] == 1:
        pooled = np.concatenate([a, b])
        n = len(a)
        count = 0
        for _ in range(n_permutations):
            perm = rng.permutation(len(pooled))
            stat = energy_distance(pooled[perm[:n]], pooled[perm[n:]])
            if stat >= observed:
                count += 1
        return observed, (1 + count) / (n_permutations + 1)

    cap = ENERGY_TEST_MAX_POOLED // 2
    asub = a if len(a) <= cap else a[rng.choice(len(a), cap, replace=False)]
    bsub = b if len(b) <= cap else b[rng.choice(len(b), cap, replace=False)]
    n, m = len(asub), len(bsub)
    pooled = np.concatenate([asub, bsub]).astype(np.float32)
    diff = pooled[:, None, :] - pooled[None, :, :]
    D = np.sqrt((diff**2).sum(axis=2))
    del diff
    total = float(D.sum())

    def stat_from_indicator(z: np.ndarray) -> float:
        dz = D @ z
        s_xx = float(z @ dz)
        s_yy = total - 2.0 * float(dz.sum()) + s_xx
        s_xy = (total - s_xx - s_yy) / 2.0
        return 2.0 * s_xy / (n * m) - s_xx / (n * n) - s_yy / (m * m)

    base = np.zeros(n + m, dtype=np.float32)
    base[:n] = 1.0
    observed_sub = stat_from_indicator(base)
    count = 0
    for _ in range(n_permutations):
        z = np.zeros(n + m, dtype=np.float32)
        z[rng.choice(n + m, n, replace=False)] = 1.0
        if stat_from_indicator(z) >= observed_sub:
            count += 1
    return observed, (1 + count) / (n_permutations + 1)


# ----------------------------------------------------------------------
# bound estimators
# ----------------------------------------------------------------------

@dataclass
class BoundEstimate:
    value: float
    mc_std_error: float
    n_samples: int

    def __post_init__(self):
        if self.mc_std_error < 0:
            raise ValueError("standard error must be nonnegative")
        if self.n_samples < 1:
            raise ValueError("need at least one sample")


def _forward_trajectories(
    q0: GaussianMixture, schedule: NoiseSchedule, n: int, rng: np.random.Generator
) -> list[np.ndarray]:
    """[x_0, ..., x_T] batches, each (n, d), chained one step at a time."""
    xs = [q0.sample(rng, n)]
    for t in range(schedule.T):
        beta = schedule.beta(t + 1)
        xs.append(
            np.sqrt(1.0 - beta) * xs[-1]
            + np.sqrt(beta) * rng.standard_normal(xs[-1].shape)
        )
    return xs


def _mean_se(per_sample: np.ndarray) -> BoundEstimate:
    n = len(per_sample)
    se = float(per_sample.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return BoundEstimate(value=float(per_sample.mean()), mc_std_error=se, n_samples=n)


def estimate_kl_bound(
    q0: GaussianMixture,
    model,
    schedule: NoiseSchedule,
    n_mc: int,
    seed: int | list = 0,
    prior: GaussianMixture | None = None,
) -> BoundEstimate:
    """KL upper bound of the base sampler: prior mismatch plus summed
    transition KLs, Monte-Carlo'd over forward trajectories of q0.

    Requires the exact-reverse kernel (transition densities in closed form).
    ``prior`` defaults to the sampler's N(0, I).
    """
    if model.kernel_mode != "exact_reverse":
        raise ValueError("the bound estimator needs exact-reverse kernel densities")
    if n_mc < 100:
        raise ValueError("n_mc must be at least 100")
    rng = np.random.default_rng(seed)
    prior = prior if prior is not None else standard_normal(q0.dim)
    xs = _forward_trajectories(q0, schedule, n_mc, rng)
    rev_q = ReversePosterior(q0, schedule)
    rev_p = ReversePosterior(model.p0, schedule)
    q_T = forward_marginal(q0, schedule, schedule.T)
    total = q_T.log_density(xs[-1]) - prior.log_density(xs[-1])
    for t in range(schedule.T):
        total += rev_q.log_density(t, xs[t], xs[t + 1])
        total -= rev_p.log_density(t, xs[t], xs[t + 1])
    return _mean_se(total)


def estimate_acceptance_term(
    q0: GaussianMixture,
    model,
    schedule: NoiseSchedule,
    estimator,
    n_mc: int,
    seed: int | list = 0,
) -> BoundEstimate:
    """Expected negative log of the unnormalized acceptance (no constants,
    no clamping) along forward trajectories of q0; the correction term that
    the KL bound of the refined sampler adds to the base bound."""
    if n_mc < 100:
        raise ValueError("n_mc must be at least 100")
    rng = np.random.default_rng(seed)
    xs = _forward_trajectories(q0, schedule, n_mc, rng)
    log_l = [estimator.log_ratio_batch(xs[t], t) for t in range(schedule.T + 1)]
    total = -log_l[schedule.T].copy()
    for t in range(schedule.T):
        total -= log_l[t] - log_l[t + 1]
    return _mean_se(total)


# ----------------------------------------------------------------------
# run summaries
# ----------------------------------------------------------------------

@dataclass
class RunSummary:
    n_chains: int
    mean_nfe_model: float
    std_nfe_model: float
    mean_nfe_disc: float
    std_nfe_disc: float
    acceptance_rate: np.ndarray          # (T+1,) transition + prior rates, nan if untested
    reinit_depth_hist: Counter = field(default_factory=Counter)
    violation_rate: float = 0.0
    n_restarts: int = 0

    def __post_init__(self):
        rates = self.acceptance_rate[np.isfinite(self.acceptance_rate)]
        if np.any(rates < 0) or np.any(rates > 1):
            raise ValueError("acceptance rates must lie in [0, 1]")


def summarize_run(records) -> RunSummary:
    """Aggregate chain counters and event logs."""
    if not records:
        raise ValueError("no chain records to summarize")
    t_max = max((ev.t for rec in records for ev in rec.events), default=0)
    accepts = np.zeros(t_max + 1)
    rejects = np.zeros(t_max + 1)
    depth_hist: Counter = Counter()
    violations = 0
    decisions = 0
    restarts = 0
    for rec in records:
        violations += rec.violations
        decisions += rec.decisions
        for ev in rec.events:
            if ev.kind == "accept":
                accepts[ev.t] += 1
            elif ev.kind == "reject":
                rejects[ev.t] += 1
            elif ev.kind == "reinit_fwd":
                depth_hist[ev.depth] += 1
            elif ev.kind == "restart":
                restarts += 1
    tested = accepts + rejects
    with np.errstate(invalid="ignore"):
        rate = np.where(tested > 0, accepts / np.maximum(tested, 1), np.nan)
    nfe_model = np.array([rec.nfe_model for rec in records], dtype=float)
    nfe_disc = np.array([rec.nfe_disc for rec in records], dtype=float)
    return RunSummary(
        n_chains=len(records),
        mean_nfe_model=float(nfe_model.mean()),
        std_nfe_model=float(nfe_model.std(ddof=0)),
        mean_nfe_disc=float(nfe_disc.mean()),
        std_nfe_disc=float(nfe_disc.std(ddof=0)),
        acceptance_rate=rate,
        reinit_depth_hist=depth_hist,
        violation_rate=violations / decisions if decisions else 0.0,
        n_restarts=restarts,
    )
