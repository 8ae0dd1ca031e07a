"""Discriminator training, ratio algebra, gradients, and checkpoints."""

import numpy as np
import pytest

from diffrs.discriminator import (
    TrainConfig,
    _features,
    _loss_and_grads,
    _sigmoid,
    disc_logit,
    disc_logit_batch,
    init_discriminator,
    load_checkpoint,
    log_ratio_from_logit,
    save_checkpoint,
    train_discriminator,
)
from diffrs.gmm import GaussianMixture, forward_marginal, standard_normal
from diffrs.schedule import make_vp_schedule


def mixture_1d(weights, means, variances):
    return GaussianMixture(
        weights=np.asarray(weights, dtype=float),
        means=np.asarray(means, dtype=float)[:, None],
        covs=np.asarray(variances, dtype=float)[:, None, None],
    )


@pytest.fixture
def sched():
    return make_vp_schedule(8, 0.05, 0.6)


# ----------------------------------------------------------------------
# init and forward
# ----------------------------------------------------------------------

def test_init_deterministic():
    a = init_discriminator([17, 64, 64], seed=3)
    b = init_discriminator([17, 64, 64], seed=3)
    for wa, wb in zip(a.weights, b.weights):
        np.testing.assert_array_equal(wa, wb)


def test_init_rejects_too_narrow_input():
    with pytest.raises(ValueError, match="input width"):
        init_discriminator([16, 64], num_frequencies=8)


def test_fresh_logits_are_small_and_finite(sched):
    model = init_discriminator([1 + 16, 64, 64], seed=0)
    xs = np.random.default_rng(1).standard_normal((500, 1))
    z = disc_logit_batch(model, xs, 4, sched)
    assert np.all(np.isfinite(z))
    assert np.abs(z).mean() < 1.0


def test_logit_rejects_nonfinite_input(sched):
    model = init_discriminator([1 + 16, 8], seed=0)
    with pytest.raises(ValueError, match="non-finite"):
        disc_logit(model, np.array([np.nan]), 1, sched)


def test_logit_rejects_wrong_dimension(sched):
    model = init_discriminator([1 + 16, 8], seed=0)
    with pytest.raises(ValueError, match="dimension"):
        disc_logit(model, np.array([0.0, 1.0]), 1, sched)


# ----------------------------------------------------------------------
# ratio algebra
# ----------------------------------------------------------------------

def test_ratio_identity_zero_logit():
    assert np.exp(log_ratio_from_logit(0.0)) == 1.0


def test_ratio_identity_log2():
    z = np.log(2.0)
    d = _sigmoid(np.array([z]))[0]
    assert d == pytest.approx(2.0 / 3.0, rel=1e-12)
    assert np.exp(log_ratio_from_logit(z)) == pytest.approx(2.0, rel=1e-12)


def test_ratio_equals_odds_across_clamp_range():
    # d/(1-d) with 1-d computed stably as sigmoid(-z)
    zs = np.linspace(-30.0, 30.0, 121)
    d = _sigmoid(zs)
    one_minus_d = _sigmoid(-zs)
    odds = d / one_minus_d
    np.testing.assert_allclose(odds, np.exp(log_ratio_from_logit(zs)), rtol=1e-12)


def test_logit_clamped_beyond_range():
    assert log_ratio_from_logit(100.0) == 30.0
    assert log_ratio_from_logit(-100.0) == -30.0


# ----------------------------------------------------------------------
# loss and gradients
# ----------------------------------------------------------------------

def test_loss_at_indifference_is_weighted_log2(sched):
    model = init_discriminator([1 + 16, 8], seed=0)
    model.weights[-1][:] = 0.0
    model.biases[-1][:] = 0.0
    rng = np.random.default_rng(0)
    t = rng.integers(1, sched.T + 1, size=64)
    x = rng.standard_normal((64, 1))
    feats = _features(model, x, t, sched)
    from diffrs.discriminator import _lambda_weights

    lam = _lambda_weights(t, sched, "beta_over_var")
    loss, _ = _loss_and_grads(model, feats, lam, feats, lam)
    assert loss == pytest.approx(2.0 * lam.mean() * np.log(2.0), rel=1e-12)


def test_gradients_match_finite_differences(sched):
    model = init_discriminator([1 + 4, 6, 5], num_frequencies=2, seed=7)
    rng = np.random.default_rng(2)
    xr = rng.standard_normal((5, 1))
    xf = rng.standard_normal((4, 1)) + 1.0
    tr = rng.integers(1, sched.T + 1, size=5)
    tf = rng.integers(1, sched.T + 1, size=4)
    fr = _features(model, xr, tr, sched)
    ff = _features(model, xf, tf, sched)
    lam_r = np.ones(5)
    lam_f = np.ones(4)
    _, (gw, gb) = _loss_and_grads(model, fr, lam_r, ff, lam_f)

    def loss_only():
        return _loss_and_grads(model, fr, lam_r, ff, lam_f)[0]

    h = 1e-5
    for grads, params in ((gw, model.weights), (gb, model.biases)):
        for g, p in zip(grads, params):
            flat_g = g.ravel()
            flat_p = p.ravel()
            for idx in range(flat_p.size):
                orig = flat_p[idx]
                flat_p[idx] = orig + h
                up = loss_only()
                flat_p[idx] = orig - h
                down = loss_only()
                flat_p[idx] = orig
                fd = (up - down) / (2 * h)
                assert abs(flat_g[idx] - fd) <= 1e-5 * max(1.0, abs(fd))


def test_training_is_deterministic(sched):
    rng = np.random.default_rng(0)
    real = rng.standard_normal((200, 1))
    fake = rng.standard_normal((200, 1)) + 1.0
    model = init_discriminator([1 + 16, 32], seed=1)
    cfg = TrainConfig(epochs=3, batch=64, lr=0.05, seed=9)
    m1, _ = train_discriminator(model, real, fake, sched, cfg)
    m2, _ = train_discriminator(model, real, fake, sched, cfg)
    for a, b in zip(m1.weights, m2.weights):
        np.testing.assert_array_equal(a, b)
    # the input model is untouched
    np.testing.assert_array_equal(model.weights[0], init_discriminator([1 + 16, 32], seed=1).weights[0])


def test_training_rejects_empty_stream(sched):
    model = init_discriminator([1 + 16, 8], seed=0)
    with pytest.raises(ValueError, match="nonempty"):
        train_discriminator(model, np.empty((0, 1)), np.ones((4, 1)), sched, TrainConfig(epochs=1))


def test_identical_streams_keep_logits_near_zero(sched):
    rng = np.random.default_rng(4)
    data = rng.standard_normal((600, 1))
    train, held = data[:500], data[500:]
    model = init_discriminator([1 + 16, 64, 64], seed=2)
    cfg = TrainConfig(epochs=20, batch=128, lr=0.05, seed=5)
    trained, report = train_discriminator(model, train, train, sched, cfg)
    z = disc_logit_batch(trained, held, max(sched.T // 2, 1), sched)
    assert np.abs(z).mean() < 0.2
    assert all(np.isfinite(l) for l in report.epoch_losses)


def test_separable_streams_classified(sched):
    rng = np.random.default_rng(8)
    real = rng.normal(0.0, 0.1, size=(1200, 1))
    fake = rng.normal(5.0, 0.1, size=(1200, 1))
    model = init_discriminator([1 + 16, 64, 64], seed=3)
    cfg = TrainConfig(epochs=25, batch=128, lr=0.08, seed=6)
    trained, _ = train_discriminator(model, real[:1000], fake[:1000], sched, cfg)
    zr = disc_logit_batch(trained, real[1000:], 1, sched)
    zf = disc_logit_batch(trained, fake[1000:], 1, sched)
    acc = 0.5 * ((zr > 0).mean() + (zf < 0).mean())
    assert acc > 0.95


def test_logit_tracks_analytic_ratio(sched):
    # N(0,1) data vs N(1,1) model: the optimal logit is linear in x
    q0 = standard_normal(1)
    p0 = mixture_1d([1.0], [1.0], [1.0])
    rng = np.random.default_rng(11)
    real = q0.sample(rng, 4000)
    fake = p0.sample(rng, 4000)
    model = init_discriminator([1 + 16, 64, 64], seed=4)
    cfg = TrainConfig(epochs=30, batch=256, lr=0.08, seed=7)

    def oracle(x, t):
        qt = forward_marginal(q0, sched, t)
        pt = forward_marginal(p0, sched, t)
        return qt.log_density(x) - pt.log_density(x)

    trained, report = train_discriminator(
        model, real, fake, sched, cfg, oracle_log_ratio_fn=oracle
    )
    assert report.logit_oracle_corr is not None
    assert report.logit_oracle_corr > 0.9
    for t in (sched.T // 2, sched.T // 2 + 1):
        grid = np.linspace(-3, 3, 200)[:, None]
        z = disc_logit_batch(trained, grid, t, sched)
        target = oracle(grid, t)
        corr = np.corrcoef(z, target)[0, 1]
        assert corr > 0.9, f"correlation {corr:.3f} at t={t}"


# ----------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------

def test_checkpoint_roundtrip_bit_exact(tmp_path, sched):
    model = init_discriminator([2 + 16, 32, 16], seed=5)
    path = tmp_path / "disc.json"
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)
    probe = np.random.default_rng(0).standard_normal((50, 2))
    z0 = disc_logit_batch(model, probe, 3, sched)
    z1 = disc_logit_batch(loaded, probe, 3, sched)
    np.testing.assert_array_equal(z0, z1)


def test_checkpoint_corruption_detected(tmp_path):
    model = init_discriminator([1 + 16, 8], seed=0)
    path = tmp_path / "disc.json"
    save_checkpoint(model, path)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(ValueError, match="corrupt"):
        load_checkpoint(path)


def test_checkpoint_unknown_version(tmp_path):
    model = init_discriminator([1 + 16, 8], seed=0)
    path = tmp_path / "disc.json"
    save_checkpoint(model, path)
    import json

    payload = json.loads(path.read_text())
    payload["version"] = "diffrs-disc-v99"
    path.write_text(json.dumps(payload))
    with pytest.raises(ValueError, match="version"):
        load_checkpoint(path)


def test_checkpoint_wrong_param_shape(tmp_path):
    model = init_discriminator([1 + 16, 8], seed=0)
    path = tmp_path / "disc.json"
    save_checkpoint(model, path)
    import json

    payload = json.loads(path.read_text())
    payload["params"][0] = payload["params"][0][:-3]
    path.write_text(json.dumps(payload))
    with pytest.raises(ValueError, match="corrupt"):
        load_checkpoint(path)
