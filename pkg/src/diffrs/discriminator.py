"""Time-conditioned binary discriminator and its density-ratio estimate.

A small MLP reads a point concatenated with a sinusoidal embedding of the
schedule's cumulative signal fraction and emits one logit z.  Under the
weighted cross-entropy objective the optimum satisfies sigmoid(z) =
q_t / (q_t + p_t), so z itself estimates the log marginal density ratio.

Training is plain full-precision gradient descent with a global norm clip:
deterministic given the seed, no optimizer state to serialize.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .diffusion import forward_perturb_batch
from .schedule import NoiseSchedule

CHECKPOINT_VERSION = "diffrs-disc-v1"
LOGIT_CLAMP = 30.0
LAMBDA_RULES = ("beta_over_var", "uniform")

_LOG2 = float(np.log(2.0))


@dataclass(eq=False)
class DiscriminatorModel:
    """MLP parameters plus the time-embedding configuration.

    ``widths`` lists the input width followed by the hidden widths; the
    scalar output layer is implicit.  The input width must leave room for
    the 2*num_frequencies embedding features.
    """

    widths: list
    weights: list
    biases: list
    num_frequencies: int = 8
    freq_scale: float = float(np.pi)
    version: str = CHECKPOINT_VERSION

    @property
    def data_dim(self) -> int:
        return self.widths[0] - 2 * self.num_frequencies

    def parameters(self):
        for w, b in zip(self.weights, self.biases):
            yield w
            yield b


def init_discriminator(
    widths,
    num_frequencies: int = 8,
    freq_scale: float = float(np.pi),
    seed: int = 0,
) -> DiscriminatorModel:
    """Fresh model with 1/sqrt(fan_in) weights; the output layer is shrunk
    so an untrained logit stays well inside (-1, 1)."""
    widths = [int(w) for w in widths]
    if not widths:
        raise ValueError("widths must be nonempty")
    if widths[0] <= 2 * num_frequencies:
        raise ValueError(
            f"input width {widths[0]} leaves no room for the data point "
            f"(embedding uses {2 * num_frequencies} features)"
        )
    rng = np.random.default_rng(seed)
    dims = widths + [1]
    weights, biases = [], []
    for i in range(len(dims) - 1):
        scale = 1.0 / np.sqrt(dims[i])
        if i == len(dims) - 2:
            scale *= 0.1
        weights.append(rng.normal(0.0, scale, size=(dims[i], dims[i + 1])))
        biases.append(np.zeros(dims[i + 1]))
    return DiscriminatorModel(
        widths=widths,
        weights=weights,
        biases=biases,
        num_frequencies=num_frequencies,
        freq_scale=freq_scale,
    )


# ----------------------------------------------------------------------
# forward pass
# ----------------------------------------------------------------------

def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _silu(x):
    return x * _sigmoid(x)


def _time_features(model: DiscriminatorModel, alpha_bar: np.ndarray) -> np.ndarray:
    """(n, 2F) sinusoidal features of the signal fraction."""
    freqs = model.freq_scale * 2.0 ** np.arange(model.num_frequencies)
    phase = np.asarray(alpha_bar, dtype=float)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(phase), np.cos(phase)], axis=1)


def _features(model: DiscriminatorModel, x: np.ndarray, t, schedule: NoiseSchedule):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != model.data_dim:
        raise ValueError(f"point dimension {x.shape[1]} != model input {model.data_dim}")
    if np.isscalar(t):
        ab = np.full(len(x), schedule.alpha_bar(int(t)))
    else:
        ab_by_t = np.concatenate([[1.0], schedule.alpha_bars])
        ab = ab_by_t[np.asarray(t, dtype=int)]
    return np.concatenate([x, _time_features(model, ab)], axis=1)


def _forward(model: DiscriminatorModel, feats: np.ndarray, keep_acts: bool = False):
    h = feats
    acts = [feats]
    n_layers = len(model.weights)
    pre_acts = []
    for i in range(n_layers - 1):
        z = h @ model.weights[i] + model.biases[i]
        pre_acts.append(z)
        h = _silu(z)
        acts.append(h)
    logits = (h @ model.weights[-1] + model.biases[-1])[:, 0]
    if keep_acts:
        return logits, acts, pre_acts
    return logits


def disc_logit(model: DiscriminatorModel, x: np.ndarray, t: int, schedule: NoiseSchedule) -> float:
    """Scalar logit for one point; its exponential is the ratio estimate."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite input point")
    return float(_forward(model, _features(model, x, t, schedule))[0])


def disc_logit_batch(model: DiscriminatorModel, x: np.ndarray, t, schedule: NoiseSchedule) -> np.ndarray:
    return _forward(model, _features(model, x, t, schedule))


def log_ratio_from_logit(z):
    """Estimated log density ratio: the logit clamped for finite exp."""
    return np.clip(z, -LOGIT_CLAMP, LOGIT_CLAMP)


# ----------------------------------------------------------------------
# training
# ----------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 40
    batch: int = 256
    lr: float = 0.05
    lambda_rule: str = "beta_over_var"
    seed: int = 0
    clip_norm: float = 10.0
    n_time_buckets: int = 4

    def __post_init__(self):
        if self.lambda_rule not in LAMBDA_RULES:
            raise ValueError(f"lambda_rule must be one of {LAMBDA_RULES}")
        if self.epochs < 1 or self.batch < 2:
            raise ValueError("need at least one epoch and a batch of two")


@dataclass
class TrainReport:
    epoch_losses: list = field(default_factory=list)
    real_accuracy: np.ndarray | None = None   # (epochs, buckets)
    fake_accuracy: np.ndarray | None = None
    bucket_edges: np.ndarray | None = None
    logit_oracle_corr: float | None = None

    def __post_init__(self):
        if any(l < 0 for l in self.epoch_losses):
            raise ValueError("cross-entropy losses cannot be negative")


def _lambda_weights(t: np.ndarray, schedule: NoiseSchedule, rule: str) -> np.ndarray:
    if rule == "uniform":
        return np.ones(len(t))
    betas = np.concatenate([[0.0], schedule.betas])
    ab = np.concatenate([[1.0], schedule.alpha_bars])
    t = np.asarray(t, dtype=int)
    return betas[t] / (1.0 - ab[t])


def _loss_and_grads(model, feats_real, lam_real, feats_fake, lam_fake):
    """Weighted BCE and parameter gradients, in layer order (W0, b0, ...)."""
    z_r, acts_r, pre_r = _forward(model, feats_real, keep_acts=True)
    z_f, acts_f, pre_f = _forward(model, feats_fake, keep_acts=True)
    # -log sigmoid(z) = softplus(-z); -log(1 - sigmoid(z)) = softplus(z)
    loss = float(
        np.mean(lam_real * np.logaddexp(0.0, -z_r))
        + np.mean(lam_fake * np.logaddexp(0.0, z_f))
    )
    dz_r = lam_real * (_sigmoid(z_r) - 1.0) / len(z_r)
    dz_f = lam_fake * _sigmoid(z_f) / len(z_f)

    grads = [np.zeros_like(w) for w in model.weights], [
        np.zeros_like(b) for b in model.biases
    ]

    def backprop(acts, pre, dz):
        gw, gb = grads
        delta = dz[:, None]                              # (n, 1)
        gw[-1] += acts[-1].T @ delta
        gb[-1] += delta.sum(axis=0)
        for i in range(len(model.weights) - 2, -1, -1):
            delta = delta @ model.weights[i + 1].T
            s = _sigmoid(pre[i])
            delta = delta * (s * (1.0 + pre[i] * (1.0 - s)))  # d silu / d z
            gw[i] += acts[i].T @ delta
            gb[i] += delta.sum(axis=0)

    backprop(acts_r, pre_r, dz_r)
    backprop(acts_f, pre_f, dz_f)
    return loss, grads


def train_discriminator(
    model: DiscriminatorModel,
    real_x0: np.ndarray,
    fake_x0: np.ndarray,
    schedule: NoiseSchedule,
    cfg: TrainConfig,
    oracle_log_ratio_fn=None,
) -> tuple[DiscriminatorModel, TrainReport]:
    """Gradient descent on the time-weighted cross entropy.

    Every example gets a fresh uniform timestep in {1..T} and a fresh forward
    perturbation each epoch.  ``oracle_log_ratio_fn(x_batch, t) -> array``
    optionally scores the final logits against the analytic log ratio at the
    schedule midpoint.
    """
    real_x0 = np.atleast_2d(np.asarray(real_x0, dtype=float))
    fake_x0 = np.atleast_2d(np.asarray(fake_x0, dtype=float))
    if len(real_x0) == 0 or len(fake_x0) == 0:
        raise ValueError("both training streams must be nonempty")
    if real_x0.shape[1] != fake_x0.shape[1]:
        raise ValueError("real and generated streams must share a dimension")
    rng = np.random.default_rng(cfg.seed)
    model = DiscriminatorModel(
        widths=list(model.widths),
        weights=[w.copy() for w in model.weights],
        biases=[b.copy() for b in model.biases],
        num_frequencies=model.num_frequencies,
        freq_scale=model.freq_scale,
        version=model.version,
    )
    T = schedule.T
    half = cfg.batch // 2
    edges = np.linspace(1, T + 1, cfg.n_time_buckets + 1)
    report = TrainReport(bucket_edges=edges)
    real_acc = np.zeros((cfg.epochs, cfg.n_time_buckets))
    fake_acc = np.zeros((cfg.epochs, cfg.n_time_buckets))

    for epoch in range(cfg.epochs):
        order_r = rng.permutation(len(real_x0))
        order_f = rng.permutation(len(fake_x0))
        n_batches = max(min(len(order_r), len(order_f)) // half, 1)
        losses = []
        hits = np.zeros((2, cfg.n_time_buckets))
        totals = np.zeros((2, cfg.n_time_buckets))
        for b in range(n_batches):
            idx_r = order_r[b * half : (b + 1) * half]
            idx_f = order_f[b * half : (b + 1) * half]
            t_r = rng.integers(1, T + 1, size=len(idx_r))
            t_f = rng.integers(1, T + 1, size=len(idx_f))
            xr = forward_perturb_batch(real_x0[idx_r], t_r, schedule, rng)
            xf = forward_perturb_batch(fake_x0[idx_f], t_f, schedule, rng)
            fr = _features(model, xr, t_r, schedule)
            ff = _features(model, xf, t_f, schedule)
            lam_r = _lambda_weights(t_r, schedule, cfg.lambda_rule)
            lam_f = _lambda_weights(t_f, schedule, cfg.lambda_rule)
            loss, (gw, gb) = _loss_and_grads(model, fr, lam_r, ff, lam_f)
            if not np.isfinite(loss):
                raise RuntimeError(
                    f"non-finite loss at epoch {epoch}, batch {b}; "
                    "lower the learning rate or check the data"
                )
            norm = np.sqrt(sum(float((g**2).sum()) for g in gw + gb))
            scale = cfg.lr * (cfg.clip_norm / norm if norm > cfg.clip_norm else 1.0)
            for w, g in zip(model.weights, gw):
                w -= scale * g
            for bias, g in zip(model.biases, gb):
                bias -= scale * g
            losses.append(loss)
            # bucketed sign accuracy on the training minibatch
            z_r = _forward(model, fr)
            z_f = _forward(model, ff)
            for row, (ts, zs, want_pos) in enumerate(
                [(t_r, z_r, True), (t_f, z_f, False)]
            ):
                buckets = np.clip(
                    np.searchsorted(edges, ts, side="right") - 1,
                    0,
                    cfg.n_time_buckets - 1,
                )
                correct = zs > 0 if want_pos else zs < 0
                np.add.at(hits[row], buckets, correct.astype(float))
                np.add.at(totals[row], buckets, 1.0)
        report.epoch_losses.append(float(np.mean(losses)))
        with np.errstate(invalid="ignore"):
            real_acc[epoch] = hits[0] / np.maximum(totals[0], 1)
            fake_acc[epoch] = hits[1] / np.maximum(totals[1], 1)

    report.real_accuracy = real_acc
    report.fake_accuracy = fake_acc
    if oracle_log_ratio_fn is not None:
        t_mid = max(T // 2, 1)
        probe = forward_perturb_batch(
            np.concatenate([real_x0, fake_x0])[:2000],
            np.full(min(len(real_x0) + len(fake_x0), 2000), t_mid),
            schedule,
            rng,
        )
        z = disc_logit_batch(model, probe, t_mid, schedule)
        target = oracle_log_ratio_fn(probe, t_mid)
        report.logit_oracle_corr = float(np.corrcoef(z, target)[0, 1])
    return model, report


# ----------------------------------------------------------------------
# checkpointing
# ----------------------------------------------------------------------

def save_checkpoint(model: DiscriminatorModel, path) -> None:
    payload = {
        "version": model.version,
        "widths": list(model.widths),
        "time_embedding": {
            "num_frequencies": model.num_frequencies,
            "scale": model.freq_scale,
        },
        "params": [p.ravel().tolist() for p in model.parameters()],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_checkpoint(path) -> DiscriminatorModel:
    with open(path) as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"corrupt discriminator checkpoint: {exc}") from exc
    version = payload.get("version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unknown checkpoint version tag {version!r}")
    try:
        widths = [int(w) for w in payload["widths"]]
        emb = payload["time_embedding"]
        flat = payload["params"]
        dims = widths + [1]
        weights, biases = [], []
        it = iter(flat)
        for i in range(len(dims) - 1):
            w = np.array(next(it), dtype=float)
            b = np.array(next(it), dtype=float)
            weights.append(w.reshape(dims[i], dims[i + 1]))
            biases.append(b.reshape(dims[i + 1]))
        leftovers = list(it)
    except (KeyError, StopIteration, ValueError) as exc:
        raise ValueError(f"corrupt discriminator checkpoint: {exc}") from exc
    if leftovers:
        raise ValueError("corrupt discriminator checkpoint: trailing parameter arrays")
    return DiscriminatorModel(
        widths=widths,
        weights=weights,
        biases=biases,
        num_frequencies=int(emb["num_frequencies"]),
        freq_scale=float(emb["scale"]),
        version=version,
    )
