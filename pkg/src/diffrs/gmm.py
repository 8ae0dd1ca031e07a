"""Exact probability computations for Gaussian mixtures under the VP forward chain.

Everything else in the package is validated against this module: mixture
densities are computed in closed form, the forward chain maps a mixture to
another mixture, and the reverse-time conditional given the next noisier
state is again a mixture with conjugate-Gaussian components.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .schedule import NoiseSchedule


def _lse(a: np.ndarray):
    """log-sum-exp over the last axis; scipy's version has ~10us dispatch
    overhead per call, far too slow for the per-transition hot path."""
    m = a.max(axis=-1, keepdims=True)
    out = m[..., 0] + np.log(np.exp(a - m).sum(axis=-1))
    return out

# Per-component log densities are clamped here before log-sum-exp so that
# log ratios stay finite even in deep tails (double underflow boundary).
LOG_DENSITY_FLOOR = -745.0

# Fallback jitter for Cholesky; lets near-degenerate components through
# without special-casing while keeping healthy covariances exact.
COV_REGULARIZATION = 1e-9

_LOG_2PI = float(np.log(2.0 * np.pi))


def _chol_psd(mats: np.ndarray) -> np.ndarray:
    """Cholesky factors of a stack of PSD matrices, jittered only on failure."""
    try:
        return np.linalg.cholesky(mats)
    except np.linalg.LinAlgError:
        pass
    eye = COV_REGULARIZATION * np.eye(mats.shape[-1])
    try:
        return np.linalg.cholesky(mats + eye)
    except np.linalg.LinAlgError as exc:
        raise ValueError("covariance not positive semidefinite within tolerance") from exc


@dataclass(eq=False)
class GaussianMixture:
    """Weighted mixture of full-covariance Gaussians.

    Treated as immutable after construction: arrays are copied and marked
    read-only, so instances are safe to share across threads.
    """

    weights: np.ndarray  # (k,)
    means: np.ndarray    # (k, d)
    covs: np.ndarray     # (k, d, d)

    def __post_init__(self):
        self.weights = np.array(self.weights, dtype=float)
        self.means = np.array(self.means, dtype=float)
        self.covs = np.array(self.covs, dtype=float)
        if self.means.ndim != 2:
            raise ValueError("means must have shape (k, d)")
        k, d = self.means.shape
        if self.weights.shape != (k,):
            raise ValueError("weights must have shape (k,)")
        if self.covs.shape != (k, d, d):
            raise ValueError("covs must have shape (k, d, d)")
        if np.any(self.weights < 0.0):
            raise ValueError("weights must be nonnegative")
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights must sum to 1 (got {self.weights.sum()!r})")
        if not np.allclose(self.covs, np.swapaxes(self.covs, 1, 2), atol=1e-10):
            raise ValueError("covariances must be symmetric")
        for cov in self.covs:
            if np.linalg.eigvalsh(cov).min() < -1e-8:
                raise ValueError("covariances must be positive semidefinite")
        for arr in (self.weights, self.means, self.covs):
            arr.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    # ------------------------------------------------------------------
    # cached factorizations
    # ------------------------------------------------------------------

    @cached_property
    def _chol(self) -> np.ndarray:
        """(k, d, d) Cholesky factors, jittered only for degenerate covariances."""
        return _chol_psd(self.covs)

    @cached_property
    def _chol_inv(self) -> np.ndarray:
        """(k, d, d) inverses of the Cholesky factors."""
        eye = np.eye(self.dim)
        return np.stack([np.linalg.solve(L, eye) for L in self._chol])

    @cached_property
    def _precisions(self) -> np.ndarray:
        """(k, d, d) inverse covariances (of the regularized covs)."""
        return np.einsum("kji,kjl->kil", self._chol_inv, self._chol_inv)

    @cached_property
    def _log_norm(self) -> np.ndarray:
        """(k,) Gaussian normalizers: -0.5*logdet - d/2 * log(2 pi)."""
        logdets = 2.0 * np.log(np.einsum("kii->ki", self._chol)).sum(axis=1)
        return -0.5 * logdets - 0.5 * self.dim * _LOG_2PI

    @cached_property
    def _log_weights(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.weights)

    @cached_property
    def _sample_factor(self) -> np.ndarray:
        """(k, d, d) PSD square roots via eigh; exact for singular covariances."""
        vals, vecs = np.linalg.eigh(self.covs)
        return vecs * np.sqrt(np.clip(vals, 0.0, None))[:, None, :]

    # ------------------------------------------------------------------
    # densities
    # ------------------------------------------------------------------

    def component_log_densities(self, x: np.ndarray) -> np.ndarray:
        """Per-component log N(x; mu_i, Sigma_i), floored.  (k,) or (n, k)."""
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim:
            raise ValueError(f"point dimension {x.shape[-1]} != mixture dimension {self.dim}")
        if x.ndim == 1:
            diff = x[None, :] - self.means                       # (k, d)
            y = (self._chol_inv @ diff[:, :, None])[:, :, 0]
            quad = (y * y).sum(axis=1)
        elif x.ndim == 2:
            diff = x[:, None, :] - self.means[None, :, :]        # (n, k, d)
            y = np.einsum("kij,nkj->nki", self._chol_inv, diff)
            quad = np.einsum("nki,nki->nk", y, y)
        else:
            raise ValueError("x must be a point (d,) or a batch (n, d)")
        return np.maximum(self._log_norm - 0.5 * quad, LOG_DENSITY_FLOOR)

    def log_density(self, x: np.ndarray):
        """log sum_i w_i N(x; mu_i, Sigma_i); scalar for (d,), array for (n, d)."""
        comp = self.component_log_densities(x)
        out = _lse(comp + self._log_weights)
        return float(out) if np.ndim(out) == 0 else out

    def score(self, x: np.ndarray):
        """Gradient of log density; (d,) for a point, (n, d) for a batch."""
        comp = self.component_log_densities(x) + self._log_weights
        if comp.ndim == 1:
            resp = np.exp(comp - _lse(comp))
            diff = self.means - np.asarray(x, dtype=float)[None, :]
            return np.einsum("k,kij,kj->i", resp, self._precisions, diff)
        resp = np.exp(comp - _lse(comp)[:, None])                      # (n, k)
        diff = self.means[None, :, :] - np.asarray(x, dtype=float)[:, None, :]
        return np.einsum("nk,kij,nkj->ni", resp, self._precisions, diff)

    # ------------------------------------------------------------------
    # sampling
    # ------------------------------------------------------------------

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """(n, d) i.i.d. draws; deterministic given the generator state."""
        if n < 1:
            raise ValueError("n must be at least 1")
        idx = rng.choice(self.n_components, size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        return self.means[idx] + np.einsum("nij,nj->ni", self._sample_factor[idx], z)


def oracle_log_ratio(q: GaussianMixture, p: GaussianMixture, x: np.ndarray):
    """log q(x) - log p(x); antisymmetric in (q, p) and finite by the floor."""
    if q.dim != p.dim:
        raise ValueError(f"dimension mismatch: q has {q.dim}, p has {p.dim}")
    return q.log_density(x) - p.log_density(x)


def standard_normal(dim: int) -> GaussianMixture:
    """N(0, I_d) as a one-component mixture."""
    return GaussianMixture(
        weights=np.ones(1), means=np.zeros((1, dim)), covs=np.eye(dim)[None]
    )


# ----------------------------------------------------------------------
# forward chain pushforward
# ----------------------------------------------------------------------

def forward_marginal(gmm0: GaussianMixture, schedule: NoiseSchedule, t: int) -> GaussianMixture:
    """Marginal of x_t when x_0 ~ gmm0 under the VP forward chain.

    Component-wise pushforward: (w, mu, Sigma) -> (w, sqrt(ab)*mu,
    ab*Sigma + (1-ab)*I) with ab = alpha_bar_t.  t = 0 returns gmm0 itself.
    """
    if not 0 <= t <= schedule.T:
        raise ValueError(f"timestep {t} outside [0, {schedule.T}]")
    if t == 0:
        return gmm0
    ab = schedule.alpha_bar(t)
    eye = np.eye(gmm0.dim)
    return GaussianMixture(
        weights=gmm0.weights,
        means=np.sqrt(ab) * gmm0.means,
        covs=ab * gmm0.covs + (1.0 - ab) * eye,
    )


class MarginalTable:
    """Forward marginals of one mixture at every timestep, built lazily."""

    def __init__(self, gmm0: GaussianMixture, schedule: NoiseSchedule):
        self.gmm0 = gmm0
        self.schedule = schedule
        self._cache: dict[int, GaussianMixture] = {}

    def at(self, t: int) -> GaussianMixture:
        marg = self._cache.get(t)
        if marg is None:
            marg = forward_marginal(self.gmm0, self.schedule, t)
            self._cache[t] = marg
        return marg

    def log_density(self, t: int, x: np.ndarray):
        return self.at(t).log_density(x)


# ----------------------------------------------------------------------
# reverse-time conditional
# ----------------------------------------------------------------------

class ReversePosterior:
    """Exact conditional of x_t given x_{t+1} when x_0 ~ gmm0.

    For each component the chain (x_t, x_{t+1}) is jointly Gaussian, so the
    conditional is a mixture whose covariances and gain matrices depend on t
    only; they are cached per timestep.  Mixture weights follow the
    responsibilities of x_{t+1} under the (t+1)-marginal components.
    """

    def __init__(self, gmm0: GaussianMixture, schedule: NoiseSchedule):
        self.gmm0 = gmm0
        self.schedule = schedule
        self._cache: dict[int, dict] = {}

    def _params(self, t: int) -> dict:
        p = self._cache.get(t)
        if p is not None:
            return p
        sched = self.schedule
        if not 0 <= t < sched.T:
            raise ValueError(f"timestep {t} outside [0, {sched.T})")
        beta = sched.beta(t + 1)
        if beta == 0.0:
            raise ValueError(
                "one-step variance beta_{t+1} is zero; the reverse conditional "
                "degenerates to a point mass"
            )
        a = np.sqrt(1.0 - beta)
        marg_t = forward_marginal(self.gmm0, sched, t)
        d = marg_t.dim
        eye = np.eye(d)
        S = marg_t.covs                                  # (k, d, d)
        pred_cov = a * a * S + beta * eye                # == (t+1)-marginal covs
        pred_chol = _chol_psd(pred_cov)
        pred_chol_inv = np.stack([np.linalg.solve(L, eye) for L in pred_chol])
        pred_log_norm = (
            -np.log(np.einsum("kii->ki", pred_chol)).sum(axis=1) - 0.5 * d * _LOG_2PI
        )
        pred_prec = np.einsum("kji,kjl->kil", pred_chol_inv, pred_chol_inv)
        gain = a * np.einsum("kij,kjl->kil", S, pred_prec)   # a * S * pred_cov^{-1}
        post_cov = S - a * np.einsum("kij,kjl->kil", gain, S)
        post_cov = 0.5 * (post_cov + np.swapaxes(post_cov, 1, 2))
        post_chol = _chol_psd(post_cov)
        post_chol_inv = np.stack([np.linalg.solve(L, eye) for L in post_chol])
        post_log_norm = (
            -np.log(np.einsum("kii->ki", post_chol)).sum(axis=1) - 0.5 * d * _LOG_2PI
        )
        p = {
            "a": a,
            "means_t": marg_t.means,
            "log_w": marg_t._log_weights,
            "pred_means": a * marg_t.means,
            "pred_chol_inv": pred_chol_inv,
            "pred_log_norm": pred_log_norm,
            "resp_const": marg_t._log_weights + pred_log_norm,
            "gain": gain,
            "post_cov": post_cov,
            "post_chol": post_chol,
            "post_chol_inv": post_chol_inv,
            "post_log_norm": post_log_norm,
        }
        # flattened single-GEMV forms for the per-proposal fast path:
        # responsibilities need ||Lpred_i^{-1}(x - a m_i)||^2, the posterior
        # density needs ||Lpost_i^{-1}(x_t - base_i - G_i x)||^2; stacking the
        # k (d, d) operators into (k*d, d) turns both into one matrix-vector
        # product each
        k, d = marg_t.means.shape
        base_mean = marg_t.means - np.einsum("kij,kj->ki", gain, p["pred_means"])
        p["fast"] = (
            pred_chol_inv.reshape(k * d, d),
            np.einsum("kij,kj->ki", pred_chol_inv, p["pred_means"]).reshape(k * d),
            p["resp_const"],
            base_mean,
            gain.reshape(k * d, d),
            post_chol,
            post_chol_inv.reshape(k * d, d),
            np.einsum("kij,kjl->kil", post_chol_inv, gain).reshape(k * d, d),
            np.einsum("kij,kj->ki", post_chol_inv, base_mean).reshape(k * d),
            post_log_norm,
            k,
            d,
        )
        self._cache[t] = p
        return p

    def _log_resp(self, p: dict, x_next: np.ndarray) -> np.ndarray:
        """Unnormalized log responsibilities of x_next; (k,) or (n, k)."""
        if x_next.shape[-1] != self.gmm0.dim:
            raise ValueError(
                f"point dimension {x_next.shape[-1]} != mixture dimension {self.gmm0.dim}"
            )
        if x_next.ndim == 1:
            diff = x_next[None, :] - p["pred_means"]
            y = np.einsum("kij,kj->ki", p["pred_chol_inv"], diff)
            quad = np.einsum("ki,ki->k", y, y)
        else:
            diff = x_next[:, None, :] - p["pred_means"][None, :, :]
            y = np.einsum("kij,nkj->nki", p["pred_chol_inv"], diff)
            quad = np.einsum("nki,nki->nk", y, y)
        return p["log_w"] + p["pred_log_norm"] - 0.5 * quad

    def mixture(self, t: int, x_next: np.ndarray) -> GaussianMixture:
        """The conditional as an explicit GaussianMixture."""
        p = self._params(t)
        x_next = np.asarray(x_next, dtype=float)
        log_resp = self._log_resp(p, x_next)
        w = np.exp(log_resp - _lse(log_resp))
        w = w / w.sum()
        means = p["means_t"] + np.einsum(
            "kij,kj->ki", p["gain"], x_next[None, :] - p["pred_means"]
        )
        return GaussianMixture(weights=w, means=means, covs=p["post_cov"])

    def sample_one(self, t: int, x_next: np.ndarray, rng: np.random.Generator):
        """Draw x_t | x_{t+1} and report its conditional log density.

        Fused single-point path; this runs once per proposal inside the
        samplers, so it avoids generic helpers.
        """
        (
            pred_flat,
            pred_shift,
            resp_const,
            base_mean,
            gain_flat,
            post_chol,
            post_flat,
            post_gain_flat,
            post_shift,
            post_log_norm,
            k,
            d,
        ) = self._params(t)["fast"]
        x_next = np.asarray(x_next, dtype=float)
        z = pred_flat @ x_next
        z -= pred_shift
        z *= z
        logits = resp_const - 0.5 * z.reshape(k, d).sum(axis=1)    # (k,)
        m = logits.max()
        w = np.exp(logits - m)
        cum = np.cumsum(w)
        c = int(np.searchsorted(cum, rng.random() * cum[-1]))
        c = min(c, k - 1)
        # all-component posterior means; component c is the draw's center
        means = base_mean + (gain_flat @ x_next).reshape(k, d)
        x = means[c] + post_chol[c] @ rng.standard_normal(d)
        z2 = post_flat @ x
        z2 -= post_shift
        z2 -= post_gain_flat @ x_next
        z2 *= z2
        comp = post_log_norm - 0.5 * z2.reshape(k, d).sum(axis=1)
        np.maximum(comp, LOG_DENSITY_FLOOR, out=comp)
        total = comp + logits - (m + np.log(cum[-1]))
        m2 = total.max()
        return x, float(m2 + np.log(np.exp(total - m2).sum()))

    def log_density(self, t: int, x_t: np.ndarray, x_next: np.ndarray) -> np.ndarray:
        """Batched conditional log density over pairs; (n,) for (n, d) inputs."""
        p = self._params(t)
        x_t = np.atleast_2d(np.asarray(x_t, dtype=float))
        x_next = np.atleast_2d(np.asarray(x_next, dtype=float))
        log_resp = self._log_resp(p, x_next)                              # (n, k)
        log_resp = log_resp - _lse(log_resp)[:, None]
        means = p["means_t"][None, :, :] + np.einsum(
            "kij,nkj->nki", p["gain"], x_next[:, None, :] - p["pred_means"][None, :, :]
        )
        diff = x_t[:, None, :] - means
        y = np.einsum("kij,nkj->nki", p["post_chol_inv"], diff)
        quad = np.einsum("nki,nki->nk", y, y)
        comp = np.maximum(p["post_log_norm"][None, :] - 0.5 * quad, LOG_DENSITY_FLOOR)
        return _lse(log_resp + comp)

    def sample_batch(self, t: int, x_next: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Draw x_t | x_{t+1} for a batch of parents; (n, d)."""
        p = self._params(t)
        x_next = np.asarray(x_next, dtype=float)
        log_resp = self._log_resp(p, x_next)
        log_resp = log_resp - _lse(log_resp)[:, None]
        resp = np.exp(log_resp)
        resp /= resp.sum(axis=1, keepdims=True)
        cum = np.cumsum(resp, axis=1)
        u = rng.random((len(x_next), 1))
        c = np.minimum((u > cum).sum(axis=1), resp.shape[1] - 1)
        means = p["means_t"][c] + np.einsum(
            "nij,nj->ni", p["gain"][c], x_next - p["pred_means"][c]
        )
        z = rng.standard_normal(x_next.shape)
        return means + np.einsum("nij,nj->ni", p["post_chol"][c], z)


def reverse_posterior(
    gmm0: GaussianMixture, schedule: NoiseSchedule, t: int, x_next: np.ndarray
) -> GaussianMixture:
    """Exact mixture posterior of x_t given x_{t+1} = x_next, x_0 ~ gmm0."""
    return ReversePosterior(gmm0, schedule).mixture(t, np.asarray(x_next, dtype=float))


# ----------------------------------------------------------------------
# serialization
# ----------------------------------------------------------------------

def gmm_to_dict(gmm: GaussianMixture) -> dict:
    return {
        "dim": gmm.dim,
        "components": [
            {"weight": float(w), "mean": m.tolist(), "cov": c.tolist()}
            for w, m, c in zip(gmm.weights, gmm.means, gmm.covs)
        ],
    }


def gmm_from_dict(obj: dict) -> GaussianMixture:
    try:
        dim = int(obj["dim"])
        comps = obj["components"]
        weights = np.array([c["weight"] for c in comps], dtype=float)
        means = np.array([c["mean"] for c in comps], dtype=float)
        covs = np.array([c["cov"] for c in comps], dtype=float)
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed mixture serialization: {exc}") from exc
    if means.shape[1] != dim:
        raise ValueError(f"declared dim {dim} does not match component means")
    return GaussianMixture(weights=weights, means=means, covs=covs)


def save_gmm(gmm: GaussianMixture, path) -> None:
    with open(path, "w") as fh:
        json.dump(gmm_to_dict(gmm), fh, indent=1)


def load_gmm(path) -> GaussianMixture:
    with open(path) as fh:
        return gmm_from_dict(json.load(fh))
