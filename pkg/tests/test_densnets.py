import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from clfi.densnets import (
    MafModel,
    Standardizer,
    TrainConfig,
    classifier_inputs,
    classifier_logit,
    classifier_logit_ops,
    init_classifier,
    init_maf,
    made_forward,
    made_masks,
    maf_forward_from_noise,
    maf_log_prob,
    maf_sample,
    train,
)
from clfi.diffcore import ContractViolation, NumericFailure, Tape, grad_rel_error, np_ops, numeric_grad, value_and_grad

LOG_2PI = math.log(2 * math.pi)


def _random_maf(dim, ctx_dim, seed, scale=0.3, **kw):
    return init_maf(dim, ctx_dim, np.random.default_rng(seed), head_scale=scale, **kw)


# --- masks and the autoregressive property


@pytest.mark.parametrize("dim", [1, 2, 3, 5])
@pytest.mark.parametrize("reverse", [False, True])
def test_masks_are_binary(dim, reverse):
    for m in made_masks(dim, 50, reverse):
        assert set(np.unique(m)) <= {0.0, 1.0}


@pytest.mark.parametrize("dim,ctx", [(2, 0), (3, 2), (5, 8)])
def test_made_jacobian_zeros_are_exact(dim, ctx):
    model = _random_maf(dim, ctx, seed=dim, scale=0.5, n_layers=2)
    for point in range(10):
        rng = np.random.default_rng(point)
        z0 = rng.standard_normal((1, dim))
        c = rng.standard_normal((1, ctx))
        for layer in range(model.n_layers):
            deg = np.empty(dim)
            deg[model.order(layer)] = np.arange(1, dim + 1)
            for head in (0, 1):
                for i in range(dim):
                    t = Tape()
                    z = t.param(z0)
                    out = made_forward(t, model.params, model, layer, z, c)[head]
                    onehot = np.zeros((1, dim))
                    onehot[0, i] = 1.0
                    t.backward(t.sum(t.mul(out, onehot)))
                    g = t.grad(z)[0]
                    blocked = deg >= deg[i]
                    assert np.all(g[blocked] == 0.0)


# --- log density values


def test_identity_flow_values():
    model = init_maf(2, 3, np.random.default_rng(0))
    x = np.array([0.4, -1.0, 2.0])
    assert maf_log_prob(model, np.zeros(2), x)[0] == pytest.approx(-LOG_2PI, abs=1e-12)
    assert maf_log_prob(model, np.ones(2), x)[0] == pytest.approx(-LOG_2PI - 1.0, abs=1e-12)


def test_log_prob_dimension_mismatch():
    model = init_maf(2, 3, np.random.default_rng(0))
    with pytest.raises(ContractViolation):
        maf_log_prob(model, np.zeros(3), np.zeros(3))
    with pytest.raises(ContractViolation):
        maf_log_prob(model, np.zeros(2), np.zeros(2))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_1d_normalisation(seed):
    model = _random_maf(1, 2, seed)
    grid = np.arange(-10, 10 + 1e-9, 0.01)
    x = np.random.default_rng(seed).standard_normal(2)
    dens = np.exp(maf_log_prob(model, grid[:, None], x))
    assert abs(integrate.trapezoid(dens, grid) - 1.0) < 0.01


def test_1d_normalisation_with_standardiser():
    model = _random_maf(1, 1, 4)
    model = dataclasses.replace(model, theta_norm=Standardizer(np.array([2.0]), np.array([0.5])))
    grid = np.arange(-3, 7, 0.005)
    dens = np.exp(maf_log_prob(model, grid[:, None], np.array([0.3])))
    assert abs(integrate.trapezoid(dens, grid) - 1.0) < 0.01


@pytest.mark.parametrize("seed", [0, 1])
def test_2d_normalisation(seed):
    model = _random_maf(2, 1, seed)
    x = np.array([0.7])
    # grid spans +-10 of the flow's own scale in each dimension
    s = maf_sample(model, x, 20000, np.random.default_rng(seed))
    ga, gb = (np.linspace(c - 10 * w, c + 10 * w, 401) for c, w in zip(s.mean(axis=0), s.std(axis=0)))
    aa, bb = np.meshgrid(ga, gb, indexing="ij")
    pts = np.stack([aa.ravel(), bb.ravel()], axis=1)
    dens = np.exp(maf_log_prob(model, pts, x)).reshape(aa.shape)
    total = integrate.trapezoid(integrate.trapezoid(dens, gb, axis=1), ga)
    assert abs(total - 1.0) < 0.01


# --- sampling


def test_identity_flow_sample_moments():
    model = init_maf(3, 1, np.random.default_rng(0))
    s = maf_sample(model, np.array([1.0]), 10000, np.random.default_rng(1))
    assert np.all(np.abs(s.mean(axis=0)) < 0.05)
    assert np.all(np.abs(s.var(axis=0) - 1.0) < 0.05)


def test_log_prob_finite_at_own_samples():
    model = _random_maf(3, 2, 7, scale=0.5)
    x = np.array([0.1, -0.2])
    s = maf_sample(model, x, 10000, np.random.default_rng(2))
    assert np.all(np.isfinite(maf_log_prob(model, s, x)))


@pytest.mark.parametrize("seed", [0, 1])
def test_sample_ks_against_quadrature_cdf(seed):
    model = _random_maf(1, 1, 10 + seed, scale=0.4)
    x = np.array([0.5])
    grid = np.arange(-12, 12, 0.001)
    dens = np.exp(maf_log_prob(model, grid[:, None], x))
    cdf = integrate.cumulative_trapezoid(dens, grid, initial=0.0)
    cdf /= cdf[-1]
    s = np.sort(maf_sample(model, x, 10000, np.random.default_rng(seed))[:, 0])
    res = stats.kstest(s, lambda v: np.interp(v, grid, cdf))
    assert res.statistic < 0.02


def test_sampling_is_seed_deterministic():
    model = _random_maf(2, 1, 3)
    a = maf_sample(model, np.array([0.0]), 50, np.random.default_rng(9))
    b = maf_sample(model, np.array([0.0]), 50, np.random.default_rng(9))
    assert np.array_equal(a, b)


def test_sample_count_must_be_positive():
    with pytest.raises(ContractViolation):
        maf_sample(init_maf(1, 0, np.random.default_rng(0)), None, 0, np.random.default_rng(0))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4), st.integers(0, 3))
def test_change_of_variables(seed, dim, ctx):
    # moderate heads keep theta at a scale where float64 round-off stays below the tolerance
    model = _random_maf(dim, ctx, seed, scale=0.25)
    model = dataclasses.replace(model, theta_norm=Standardizer(np.linspace(-1, 1, dim), np.linspace(0.5, 2, dim)))
    rng = np.random.default_rng(seed)
    u = rng.standard_normal((20, dim))
    x = rng.standard_normal(ctx)
    theta, logdet = maf_forward_from_noise(model, u, x)
    base = -0.5 * np.sum(u**2, axis=1) - 0.5 * dim * LOG_2PI
    np.testing.assert_allclose(maf_log_prob(model, theta, x) + logdet, base, rtol=0, atol=1e-8)


# --- classifier


def test_zero_head_gives_zero_logit():
    m = init_classifier(3, 4, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    assert np.all(classifier_logit(m, rng.standard_normal((10, 3)), rng.standard_normal((10, 4))) == 0.0)


def test_classifier_is_deterministic():
    m = init_classifier(2, 2, np.random.default_rng(0), zero_head=False)
    th, x = np.array([0.3, -1.0]), np.array([1.0, 2.0])
    assert classifier_logit(m, th, x)[0] == classifier_logit(m, th, x)[0]


def test_classifier_dimension_mismatch():
    m = init_classifier(2, 2, np.random.default_rng(0))
    with pytest.raises(ContractViolation):
        classifier_logit(m, np.zeros(3), np.zeros(2))


def test_classifier_gradient_matches_finite_differences():
    m = init_classifier(2, 3, np.random.default_rng(0), zero_head=False)
    # non-trivial residual branches so every weight matters
    params = {k: v + 0.3 * np.random.default_rng(1).standard_normal(v.shape) for k, v in m.params.items()}
    rng = np.random.default_rng(2)
    inputs = classifier_inputs(m, rng.standard_normal((6, 2)), rng.standard_normal((6, 3)))
    w = rng.standard_normal(6)

    def f(ops, p):
        return ops.sum(ops.mul(classifier_logit_ops(ops, p, m, inputs), w))

    _, g = value_and_grad(f, params)
    num = numeric_grad(lambda p: float(f(np_ops, p)), params)
    assert grad_rel_error(g, num) < 1e-5


# --- trainer


@dataclasses.dataclass(frozen=True)
class _Box:
    params: dict

    def with_params(self, params):
        return _Box(params)


def _const(ops, params, th, x, rng):
    return ops.add(ops.sum(ops.mul(params["a"], 0.0)), 1.5)


def test_constant_loss_stops_after_patience_plus_one():
    cfg = TrainConfig(patience_epochs=7)
    model = _Box({"a": np.array([1.0, 2.0])})
    fitted, hist = train(model, np.zeros((50, 1)), np.zeros((50, 1)), _const, cfg, np.random.default_rng(0))
    assert hist.epochs == cfg.patience_epochs + 1
    assert np.array_equal(fitted.params["a"], model.params["a"])
    assert hist.best_epoch == 0


def _quadratic(ops, params, th, x, rng):
    # mean squared distance of a scalar parameter to the batch targets
    d = ops.add(ops.mul(params["m"], -1.0), th[:, 0])
    return ops.mul(ops.sum(ops.mul(d, d)), 1.0 / th.shape[0])


def test_stopping_rule_and_never_worse_than_initial():
    rng = np.random.default_rng(0)
    th = rng.normal(2.0, 1.0, (300, 1))
    cfg = TrainConfig(patience_epochs=5, learning_rate=0.05, max_epochs=500)
    fitted, hist = train(_Box({"m": np.array([0.0])}), th, th, _quadratic, cfg, np.random.default_rng(1))
    assert hist.epochs < cfg.max_epochs
    best = int(np.argmin(hist.val_loss))
    assert best <= hist.epochs - 1 - cfg.patience_epochs
    assert min(hist.val_loss) <= hist.initial_val_loss
    assert min(hist.val_loss) < hist.initial_val_loss
    assert abs(fitted.params["m"][0] - 2.0) < 2.0


def test_trainer_keeps_initial_params_when_training_only_hurts():
    # a learning rate so large that every update overshoots
    th = np.random.default_rng(0).normal(0.0, 0.01, (100, 1))
    cfg = TrainConfig(patience_epochs=3, learning_rate=50.0)
    fitted, hist = train(_Box({"m": np.array([0.0])}), th, th, _quadratic, cfg, np.random.default_rng(1))
    assert hist.best_epoch == 0
    assert fitted.params["m"][0] == 0.0


def test_trainer_rejects_small_datasets():
    with pytest.raises(ContractViolation):
        train(_Box({"a": np.zeros(1)}), np.zeros((9, 1)), np.zeros((9, 1)), _const, TrainConfig(), np.random.default_rng(0))


@pytest.mark.filterwarnings("ignore:invalid value encountered in log")
def test_trainer_reports_non_finite_loss_with_epoch():
    # minimising log(a) with a huge step pushes a below zero after the first update
    def loss(ops, params, th, x, rng):
        return ops.sum(ops.log(params["a"]))

    with pytest.raises(NumericFailure, match="epoch 1"):
        train(_Box({"a": np.array([1e-3])}), np.zeros((40, 1)), np.zeros((40, 1)), loss,
              TrainConfig(learning_rate=1.0), np.random.default_rng(0))


def test_train_config_validation():
    with pytest.raises(ContractViolation):
        TrainConfig(validation_fraction=1.0)
    with pytest.raises(ContractViolation):
        TrainConfig(patience_epochs=0)


def test_ml_fit_recovers_gaussian_moments():
    rng = np.random.default_rng(0)
    data = rng.normal(3.0, 0.5, (5000, 1))
    model = init_maf(1, 0, rng)

    def nll(ops, params, th, x, r):
        lp = maf_log_prob_ops_ref(ops, params, model, th)
        return ops.mul(ops.sum(lp), -1.0 / th.shape[0])

    fitted, hist = train(model, data, np.zeros((5000, 0)), nll, TrainConfig(max_epochs=300), rng)
    s = maf_sample(fitted, None, 20000, np.random.default_rng(1))
    assert abs(s.mean() - 3.0) < 0.1
    assert abs(s.std() / 0.5 - 1.0) < 0.2


def maf_log_prob_ops_ref(ops, params, model, th):
    from clfi.densnets import maf_log_prob_ops

    return maf_log_prob_ops(ops, params, model, th, np.zeros((th.shape[0], 0)))
