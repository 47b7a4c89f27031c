"""Tests for losses and input gradients.

Every analytic gradient is checked against a central finite difference of the
actual loss pipeline, with inputs rejected when they sit too close to a gate
boundary or a kink (where the gradient genuinely does not exist).
"""

import numpy as np
import pytest

from sparsegate import (
    ContrastivePair,
    GatedNetwork,
    HeadMismatchError,
    LossKind,
    Sample,
    ScalarHead,
    forward_supervised,
    grad_z,
    loss_contrastive,
    loss_supervised,
    pseudo_head,
    score_contrastive,
)
from sparsegate.objectives import softplus

from _oracles import fd_gradient, represent_dense

SEED = 20260816
FD_STEP = 1e-6
FD_REL_TOL = 1e-4
GATE_MARGIN = 1e-3


def make_scalar_net(rng, d=6, H=15):
    W = rng.standard_normal((d, H))
    b = rng.uniform(0.1, 0.6, size=H)
    return GatedNetwork(b, ScalarHead(rng.standard_normal(H)), W=W)


def make_contrastive_net(rng, d=5, H=12):
    W = rng.standard_normal((d, H))
    b = rng.uniform(0.1, 0.6, size=H)
    return pseudo_head(GatedNetwork(b, None, W=W))


def away_from_gates(net, rng, margin=GATE_MARGIN, tries=200):
    """Draw a z whose pre-activations all clear the gate boundaries."""
    for _ in range(tries):
        z = rng.standard_normal(net.d)
        if np.min(np.abs(np.abs(net.preacts(z)) - net.b)) > margin:
            return z
    raise AssertionError(f"no z with gate margin {margin} found in {tries} tries")


def rel_err(approx, exact):
    scale = max(float(np.max(np.abs(exact))), 1e-12)
    return float(np.max(np.abs(approx - exact))) / scale


def make_pair(z, z_prime, y):
    return ContrastivePair(
        z=z, z_prime=z_prime, y=y, x=np.zeros_like(z), x_prime=np.zeros_like(z_prime)
    )


class TestLossValues:
    def test_softplus_is_overflow_safe(self):
        assert softplus(1000.0) == 1000.0
        assert softplus(-1000.0) == 0.0
        assert softplus(0.0) == pytest.approx(np.log(2.0))

    def test_square_and_absolute(self):
        assert loss_supervised(LossKind.SQUARE, 2.0, 0.5) == pytest.approx(2.25)
        assert loss_supervised(LossKind.ABSOLUTE, 2.0, 0.5) == pytest.approx(1.5)
        f = np.array([1.0, -1.0])
        y = np.array([0.0, 1.0])
        assert np.allclose(loss_supervised(LossKind.SQUARE, f, y), [1.0, 4.0])
        assert np.allclose(loss_supervised(LossKind.ABSOLUTE, f, y), [1.0, 2.0])

    def test_logistic_values(self):
        assert loss_supervised(LossKind.LOGISTIC, 0.0, 1) == pytest.approx(np.log(2.0))
        assert loss_supervised(LossKind.LOGISTIC, 3.0, -1) == pytest.approx(softplus(3.0))

    def test_logistic_rejects_non_binary_labels(self):
        with pytest.raises(ValueError, match="labels"):
            loss_supervised(LossKind.LOGISTIC, 1.0, 0.5)
        with pytest.raises(ValueError, match="labels"):
            loss_contrastive(1.0, 2)

    def test_contrastive_value(self):
        assert loss_contrastive(0.0, 1) == pytest.approx(np.log(2.0))
        assert loss_contrastive(4.0, -1) == pytest.approx(softplus(4.0))

    def test_contrastive_kind_is_not_supervised(self):
        assert LossKind.SQUARE.supervised
        assert LossKind.ABSOLUTE.supervised
        assert LossKind.LOGISTIC.supervised
        assert not LossKind.CONTRASTIVE_LOGISTIC.supervised
        with pytest.raises(ValueError, match="supervised"):
            loss_supervised(LossKind.CONTRASTIVE_LOGISTIC, 1.0, 1.0)


class TestScoreContrastive:
    def test_matches_dense_representation_product(self):
        rng = np.random.default_rng(SEED)
        net = make_contrastive_net(rng)
        from sparsegate import head_matrix

        A = head_matrix(net)
        z, z_prime = rng.standard_normal(5), rng.standard_normal(5)
        expected = represent_dense(net.W, net.b, A, z) @ represent_dense(
            net.W, net.b, A, z_prime
        )
        got = score_contrastive(net, make_pair(z, z_prime, 1))
        assert isinstance(got, float)
        assert got == pytest.approx(expected, rel=1e-9)

    def test_batched_scores_match_singles(self):
        rng = np.random.default_rng(SEED)
        net = make_contrastive_net(rng)
        Z = rng.standard_normal((6, 5))
        Zp = rng.standard_normal((6, 5))
        batch = score_contrastive(net, make_pair(Z, Zp, -1))
        singles = [score_contrastive(net, make_pair(Z[i], Zp[i], -1)) for i in range(6)]
        assert np.allclose(batch, singles, atol=1e-12)

    def test_requires_matrix_head(self):
        rng = np.random.default_rng(SEED)
        net = make_scalar_net(rng)
        pair = make_pair(np.zeros(6), np.zeros(6), 1)
        with pytest.raises(HeadMismatchError, match="matrix-kind"):
            score_contrastive(net, pair)


class TestGradZSupervised:
    @pytest.mark.parametrize("kind", [LossKind.SQUARE, LossKind.ABSOLUTE, LossKind.LOGISTIC])
    def test_matches_finite_differences(self, kind):
        rng = np.random.default_rng(SEED)
        net = make_scalar_net(rng)
        checked = 0
        while checked < 20:
            z = away_from_gates(net, rng)
            y = float(rng.choice([-1.0, 1.0])) if kind is LossKind.LOGISTIC else rng.normal()
            f = forward_supervised(net, z)
            if kind is LossKind.ABSOLUTE and abs(f - y) < GATE_MARGIN:
                continue  # kink of |f - y|
            analytic = grad_z(kind, net, z, y=y)
            numeric = fd_gradient(
                lambda zz: loss_supervised(kind, forward_supervised(net, zz), y), z, FD_STEP
            )
            err = rel_err(numeric, analytic)
            assert err <= FD_REL_TOL, f"{kind}: fd mismatch {err:.2e} at check {checked}"
            checked += 1

    def test_batch_matches_singles(self):
        rng = np.random.default_rng(SEED)
        net = make_scalar_net(rng)
        Z = rng.standard_normal((8, 6))
        y = rng.normal(size=8)
        batch = grad_z(LossKind.SQUARE, net, Z, y=y)
        singles = np.stack([grad_z(LossKind.SQUARE, net, Z[i], y=y[i]) for i in range(8)])
        assert np.allclose(batch, singles, atol=1e-12)

    def test_accepts_sample_input(self):
        rng = np.random.default_rng(SEED)
        net = make_scalar_net(rng)
        z = rng.standard_normal(6)
        x = np.zeros(6)
        sample = Sample(x=x, z=z, active_set=np.array([], dtype=np.int64))
        direct = grad_z(LossKind.SQUARE, net, z, y=0.3)
        via_sample = grad_z(LossKind.SQUARE, net, sample, y=0.3)
        assert np.array_equal(direct, via_sample)

    def test_absolute_kink_uses_zero_subgradient(self):
        net = GatedNetwork(np.zeros(4), ScalarHead(np.ones(4)), W=np.ones((3, 4)))
        z = np.zeros(3)  # f(z) = 0 exactly
        grad = grad_z(LossKind.ABSOLUTE, net, z, y=0.0)
        assert np.array_equal(grad, np.zeros(3))

    def test_requires_response(self):
        rng = np.random.default_rng(SEED)
        net = make_scalar_net(rng)
        with pytest.raises(ValueError, match="response"):
            grad_z(LossKind.SQUARE, net, rng.standard_normal(6))

    def test_requires_scalar_head(self):
        rng = np.random.default_rng(SEED)
        net = make_contrastive_net(rng)
        with pytest.raises(HeadMismatchError, match="scalar head"):
            grad_z(LossKind.SQUARE, net, rng.standard_normal(5), y=0.0)


class TestGradZContrastive:
    def test_matches_finite_differences(self):
        rng = np.random.default_rng(SEED)
        net = make_contrastive_net(rng)
        checked = 0
        while checked < 20:
            z = away_from_gates(net, rng)
            z_prime = rng.standard_normal(net.d)
            y = int(rng.choice([-1, 1]))
            pair = make_pair(z, z_prime, y)
            analytic = grad_z(LossKind.CONTRASTIVE_LOGISTIC, net, pair)
            numeric = fd_gradient(
                lambda zz: loss_contrastive(
                    score_contrastive(net, make_pair(zz, z_prime, y)), y
                ),
                z,
                FD_STEP,
            )
            err = rel_err(numeric, analytic)
            assert err <= FD_REL_TOL, f"contrastive fd mismatch {err:.2e} at check {checked}"
            checked += 1

    def test_batch_matches_singles(self):
        rng = np.random.default_rng(SEED)
        net = make_contrastive_net(rng)
        Z = rng.standard_normal((6, 5))
        Zp = rng.standard_normal((6, 5))
        batch = grad_z(LossKind.CONTRASTIVE_LOGISTIC, net, make_pair(Z, Zp, 1))
        singles = np.stack(
            [grad_z(LossKind.CONTRASTIVE_LOGISTIC, net, make_pair(Z[i], Zp[i], 1)) for i in range(6)]
        )
        assert np.allclose(batch, singles, atol=1e-12)

    def test_label_override(self):
        rng = np.random.default_rng(SEED)
        net = make_contrastive_net(rng)
        pair = make_pair(rng.standard_normal(5), rng.standard_normal(5), 1)
        with_own_label = grad_z(LossKind.CONTRASTIVE_LOGISTIC, net, pair)
        overridden = grad_z(LossKind.CONTRASTIVE_LOGISTIC, net, pair, y=-1)
        explicit = grad_z(LossKind.CONTRASTIVE_LOGISTIC, net, make_pair(pair.z, pair.z_prime, -1))
        assert np.array_equal(overridden, explicit)
        assert not np.array_equal(with_own_label, overridden)

    def test_requires_pair_input(self):
        rng = np.random.default_rng(SEED)
        net = make_contrastive_net(rng)
        with pytest.raises(TypeError, match="ContrastivePair"):
            grad_z(LossKind.CONTRASTIVE_LOGISTIC, net, rng.standard_normal(5))
