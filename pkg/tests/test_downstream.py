"""Tests for downstream head fitting and robustness inheritance."""

import numpy as np
import pytest

from sparsegate import (
    AttackNorm,
    AttackSpec,
    GatedNetwork,
    PurifiedSpec,
    ScalarHead,
    SparseModel,
    build_purified,
    fit_head,
    make_downstream_task,
    robustness_gap,
    sample_unitary,
)
from sparsegate.downstream import FALLBACK_RIDGE

SEED = 20260816


def open_net(rng, d=6, H=25, b=0.05):
    """A dense net whose gates are almost always open at unit-scale inputs."""
    return GatedNetwork(np.full(H, b), None, W=rng.standard_normal((d, H)))


class TestDownstreamTask:
    def test_canonical_task_values(self):
        task = make_downstream_task(8)
        assert np.array_equal(task.theta, np.full(8, 0.7))
        assert task.sigma_y == 0.1

    @pytest.mark.parametrize("kwargs", [{"d": 0}, {"d": 5, "sigma_y": -0.1}])
    def test_rejects_bad_parameters(self, kwargs):
        with pytest.raises(ValueError):
            make_downstream_task(**kwargs)

    def test_noiseless_response_is_exact(self):
        task = make_downstream_task(4, sigma_y=0.0, coef=2.0)
        X = np.arange(8.0).reshape(2, 4)
        assert np.array_equal(task.respond(X, np.random.default_rng(SEED)), X @ task.theta)

    def test_noise_scale(self):
        task = make_downstream_task(4, sigma_y=0.3)
        X = np.zeros((20000, 4))
        y = task.respond(X, np.random.default_rng(SEED))
        band = 6.0 * 0.3 / np.sqrt(2.0 * 20000)
        assert abs(np.std(y) - 0.3) <= band


class TestFitHead:
    def test_kernel_route_matches_min_norm_lstsq(self):
        # hidden rows are gated linear images of z, so full row rank needs
        # n at most d; n=5 < d=6 < H=25 exercises the kernel route cleanly
        rng = np.random.default_rng(SEED)
        net = open_net(rng)
        Z = rng.standard_normal((5, 6))
        y = rng.standard_normal(5)
        fit = fit_head(net, Z, y)
        Phi = net.hidden(Z)
        expected, *_ = np.linalg.lstsq(Phi, y, rcond=None)
        assert not fit.degenerate_fallback
        assert fit.lambda_used == 0.0
        assert np.allclose(fit.a, expected, atol=1e-8), "kernel fit must be the min-norm solution"
        assert fit.train_loss == pytest.approx(float(np.mean((Phi @ fit.a - y) ** 2)), abs=1e-12)

    def test_primal_route_matches_lstsq(self):
        rng = np.random.default_rng(SEED)
        net = open_net(rng, H=10)
        Z = rng.standard_normal((40, 6))  # n=40 > H=10: primal route
        y = rng.standard_normal(40)
        fit = fit_head(net, Z, y)
        Phi = net.hidden(Z)
        expected, *_ = np.linalg.lstsq(Phi, y, rcond=None)
        assert np.allclose(fit.a, expected, atol=1e-8)

    def test_explicit_ridge_kernel_route(self):
        rng = np.random.default_rng(SEED)
        net = open_net(rng)
        Z = rng.standard_normal((12, 6))  # rank-deficient kernel, but ridged
        y = rng.standard_normal(12)
        ridge = 0.5
        fit = fit_head(net, Z, y, ridge=ridge)
        Phi = net.hidden(Z)
        expected = Phi.T @ np.linalg.solve(Phi @ Phi.T + ridge * np.eye(12), y)
        assert fit.lambda_used == ridge
        assert np.allclose(fit.a, expected, atol=1e-10)

    def test_explicit_ridge_primal_route(self):
        rng = np.random.default_rng(SEED)
        net = open_net(rng, H=10)
        Z = rng.standard_normal((40, 6))
        y = rng.standard_normal(40)
        ridge = 0.25
        fit = fit_head(net, Z, y, ridge=ridge)
        Phi = net.hidden(Z)
        expected = np.linalg.solve(Phi.T @ Phi + ridge * np.eye(10), Phi.T @ y)
        assert np.allclose(fit.a, expected, atol=1e-10)

    def test_zero_hidden_row_triggers_fallback(self):
        # one sample with every gate shut puts an exactly zero row into the
        # kernel matrix, which the factorization must refuse; the tiny ridge
        # then carries the fit
        rng = np.random.default_rng(SEED)
        net = GatedNetwork(np.full(25, 0.5), None, W=rng.standard_normal((6, 25)))
        Z = np.vstack([rng.standard_normal((8, 6)), np.full((1, 6), 1e-6)])
        y = rng.standard_normal(9)
        fit = fit_head(net, Z, y)
        Phi = net.hidden(Z)
        assert np.array_equal(Phi[-1], np.zeros(25)), "last sample must have all gates shut"
        assert fit.degenerate_fallback
        assert fit.lambda_used == pytest.approx(FALLBACK_RIDGE * float(np.mean(Phi**2)))
        assert np.all(np.isfinite(fit.a))

    def test_rejects_all_zero_hidden(self):
        net = GatedNetwork(np.full(5, 1.0), None, W=np.ones((3, 5)))
        Z = np.full((4, 3), 1e-3)
        with pytest.raises(ValueError, match="hidden activations"):
            fit_head(net, Z, np.zeros(4))

    def test_rejects_shape_mismatch(self):
        rng = np.random.default_rng(SEED)
        net = open_net(rng)
        with pytest.raises(ValueError, match="shape mismatch"):
            fit_head(net, rng.standard_normal((5, 6)), np.zeros(4))

    def test_rejects_negative_ridge(self):
        rng = np.random.default_rng(SEED)
        net = open_net(rng)
        with pytest.raises(ValueError, match="ridge"):
            fit_head(net, rng.standard_normal((5, 6)), np.zeros(5), ridge=-1.0)


class TestRobustnessGap:
    @pytest.fixture()
    def setting(self):
        model = SparseModel(d=20, k=3, zeta=0.005, M=sample_unitary(20, SEED))
        spec = PurifiedSpec.for_model(model, m=1, H=100)
        net = build_purified(model, spec, np.random.default_rng(SEED))
        task = make_downstream_task(20)
        return model, net, task

    def test_zero_budget_gap_is_exactly_zero(self, setting):
        model, net, task = setting
        result = robustness_gap(
            net,
            model,
            task,
            AttackSpec(AttackNorm.L2, 0.0),
            n_train=80,
            n_test=40,
            rng=np.random.default_rng(SEED),
        )
        assert result.gap == 0.0
        assert result.loss_adv == result.loss_clean

    def test_positive_budget_opens_a_gap(self, setting):
        model, net, task = setting
        result = robustness_gap(
            net,
            model,
            task,
            AttackSpec(AttackNorm.L2, 0.05),
            n_train=80,
            n_test=40,
            rng=np.random.default_rng(SEED),
        )
        assert result.gap > 0.0, f"attack at epsilon=0.05 left gap {result.gap}"

    def test_deterministic_under_seed(self, setting):
        model, net, task = setting
        spec = AttackSpec(AttackNorm.L2, 0.02)
        a = robustness_gap(net, model, task, spec, 60, 30, np.random.default_rng(5))
        b = robustness_gap(net, model, task, spec, 60, 30, np.random.default_rng(5))
        assert (a.loss_clean, a.loss_adv) == (b.loss_clean, b.loss_adv)

    def test_fitted_head_learns_the_task(self, setting):
        # sanity: the clean loss should be near the label-noise floor, far
        # below the variance of the raw labels
        model, net, task = setting
        result = robustness_gap(
            net,
            model,
            task,
            AttackSpec(AttackNorm.L2, 0.0),
            n_train=400,
            n_test=200,
            rng=np.random.default_rng(SEED),
        )
        label_var = task.sigma_y**2 + task.theta[0] ** 2 * model.k  # rough scale of Var(y)
        assert result.loss_clean < 0.5 * label_var, (
            f"clean loss {result.loss_clean:.4f} vs label variance {label_var:.4f}"
        )
