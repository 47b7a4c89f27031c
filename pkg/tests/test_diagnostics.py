"""Tests for the purification and stability diagnostics.

The leakage statistics get a full dual-route check: the package's sparse
incremental path is compared against dense python-loop references from
_oracles on identical random draws.
"""

from dataclasses import replace

import numpy as np
import pytest
import scipy.sparse as sp

from sparsegate import (
    AttackNorm,
    AttackSpec,
    GatedNetwork,
    LossKind,
    PurifiedSpec,
    ScalarHead,
    SingularityError,
    SparseModel,
    build_purified,
    cancellation_prob,
    check_isotropy_optimal,
    gamma_stats,
    gate_stability,
    l2_sandwich_check,
    leakage_matrix,
    linf_sandwich_check,
    pseudo_head,
    psi_rate,
    sample_features,
    sample_unitary,
    theory_epsilon,
)

from _oracles import binomial_bound, gamma_blocks_dense, leakage_dense

SEED = 20260816
BLOCK_TOL = 1e-8


def tiny_model(zeta=0.005, with_mixing=False):
    M = sample_unitary(20, SEED) if with_mixing else None
    return SparseModel(d=20, k=3, zeta=zeta, M=M)


def tiny_net(model, m=1, assignment="grouped", seed=SEED):
    spec = PurifiedSpec.for_model(model, m=m, H=100)
    return build_purified(model, spec, np.random.default_rng(seed), assignment=assignment)


class TestLeakageMatrix:
    def test_matches_dense_oracle(self):
        rng = np.random.default_rng(SEED)
        U = rng.standard_normal((8, 30))
        net = GatedNetwork(np.zeros(30), None, U=U)
        for active in ([0], [2, 5], [1, 3, 7], list(range(8))):
            expected = leakage_dense(U, active)
            got = leakage_matrix(net, np.array(active))
            assert np.allclose(got, expected, atol=1e-9), f"active={active}"

    def test_sparse_and_dense_storage_agree(self):
        rng = np.random.default_rng(SEED)
        model = tiny_model()
        net = tiny_net(model, m=2, assignment="independent")
        dense_net = GatedNetwork(net.b, None, U=net.U.toarray())
        active = np.array([0, 4, 11])
        assert np.allclose(
            leakage_matrix(net, active), leakage_matrix(dense_net, active), atol=1e-12
        )

    def test_empty_active_set_gives_zero(self):
        net = tiny_net(tiny_model(), m=2, assignment="independent")
        assert np.array_equal(leakage_matrix(net, np.array([], dtype=np.int64)), np.zeros((20, 20)))

    def test_all_features_active_gives_identity(self):
        rng = np.random.default_rng(SEED)
        U = rng.standard_normal((6, 25))  # no empty columns almost surely
        net = GatedNetwork(np.zeros(25), None, U=U)
        B = leakage_matrix(net, np.arange(6))
        assert np.allclose(B, np.eye(6), atol=1e-9)

    def test_single_feature_nodes_purify_exactly(self):
        # disjoint one-feature nodes make B diagonal: active coordinates get
        # exactly 1 and everything else exactly 0, no leakage at all
        net = tiny_net(tiny_model(), m=1, assignment="grouped")
        active = np.array([3, 8])
        B = leakage_matrix(net, active)
        expected = np.zeros((20, 20))
        expected[3, 3] = expected[8, 8] = 1.0
        assert np.allclose(B, expected, atol=BLOCK_TOL)

    def test_singular_gram_raises(self):
        U = np.ones((4, 6))
        U[0, 0] = 2.0
        U[1, 0] = 2.0  # rows 2 and 3 stay identical: U U^T is singular
        net = GatedNetwork(np.zeros(6), None, U=U)
        with pytest.raises(SingularityError, match="positive definite|singular"):
            leakage_matrix(net, np.array([0]))


class TestGammaStats:
    def test_matches_dense_dual_route(self):
        """Replay the exact seed streams through the dense oracle."""
        model = tiny_model()
        spec = PurifiedSpec.for_model(model, m=2, H=100)
        samples, reps, seed = 30, 2, 911

        per_rep = np.empty((reps, 2))
        for r in range(reps):
            net_rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(r, 0)))
            data_rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(r, 1)))
            net = build_purified(replace(model, M=None), spec, net_rng, assignment="independent")
            U = net.U.toarray()
            X = sample_features(model, data_rng, samples)
            g1_vals, g2_vals = [], []
            for s in range(samples):
                active = np.flatnonzero(X[s])
                k_hat = active.size
                B = leakage_dense(U, active) if k_hat else np.zeros((model.d, model.d))
                g1, g2 = gamma_blocks_dense(B, active, model.d)
                if 0 < k_hat < model.d:
                    g1_vals.append(g1)
                if k_hat < model.d - 1:
                    g2_vals.append(g2)
            per_rep[r] = (np.mean(g1_vals), np.mean(g2_vals))

        stats = gamma_stats(model, spec, samples=samples, reps=reps, seed=seed)
        assert stats.gamma1 == pytest.approx(per_rep[:, 0].mean(), rel=1e-9)
        assert stats.gamma2 == pytest.approx(per_rep[:, 1].mean(), rel=1e-9)
        assert stats.std1 == pytest.approx(per_rep[:, 0].std(ddof=1), rel=1e-9)
        assert stats.std2 == pytest.approx(per_rep[:, 1].std(ddof=1), rel=1e-9)
        assert stats.m == 2
        assert stats.reps == reps

    def test_grouped_single_feature_leakage_is_zero(self):
        # B is exactly diagonal here; the block averages still pick up last-ulp
        # cancellation noise from summing the same diagonal in two orders
        model = tiny_model()
        spec = PurifiedSpec.for_model(model, m=1, H=100)
        stats = gamma_stats(model, spec, samples=20, reps=2, seed=SEED, assignment="grouped")
        assert abs(stats.gamma1) <= 1e-14
        assert abs(stats.gamma2) <= 1e-14

    def test_grouped_multi_feature_gram_is_singular(self):
        model = tiny_model()
        spec = PurifiedSpec.for_model(model, m=2, H=100)
        with pytest.raises(SingularityError):
            gamma_stats(model, spec, samples=5, reps=1, seed=SEED, assignment="grouped")

    def test_single_rep_reports_zero_std(self):
        model = tiny_model()
        spec = PurifiedSpec.for_model(model, m=1, H=100)
        stats = gamma_stats(model, spec, samples=10, reps=1, seed=SEED)
        assert stats.std1 == 0.0 and stats.std2 == 0.0

    def test_rejects_zero_reps(self):
        model = tiny_model()
        spec = PurifiedSpec.for_model(model, m=1, H=100)
        with pytest.raises(ValueError, match="reps"):
            gamma_stats(model, spec, samples=10, reps=0, seed=SEED)

    def test_deterministic_under_seed(self):
        model = tiny_model()
        spec = PurifiedSpec.for_model(model, m=2, H=100)
        a = gamma_stats(model, spec, samples=10, reps=2, seed=42)
        b = gamma_stats(model, spec, samples=10, reps=2, seed=42)
        assert (a.gamma1, a.gamma2, a.std1, a.std2) == (b.gamma1, b.gamma2, b.std1, b.std2)


class TestGateStability:
    def test_quiet_regime_has_no_flips(self):
        # gates inflated to 30 sigma of the observation noise but still far
        # below the carried-feature signal: every counter must be zero
        model = tiny_model(with_mixing=True)
        net = tiny_net(model, m=1).with_gates(0.0067)
        stability = gate_stability(
            net, model, AttackSpec(AttackNorm.L2, 0.0), LossKind.SQUARE, samples=300, seed=SEED
        )
        assert stability.noise_activations == 0
        assert stability.feature_deactivations == 0
        assert stability.attack_flips == 0
        assert stability.total == 300 * net.H
        assert stability.samples == 300

    def test_loud_noise_opens_spurious_gates(self):
        quiet = tiny_model(with_mixing=True)
        loud = replace(quiet, zeta=0.5)
        net = tiny_net(quiet, m=1)  # gates sized for the quiet model
        stability = gate_stability(
            net, loud, AttackSpec(AttackNorm.L2, 0.0), LossKind.SQUARE, samples=200, seed=SEED
        )
        assert stability.noise_activations > 0
        assert stability.noise_activation_fraction > 0.0

    def test_large_attack_flips_gates(self):
        rng = np.random.default_rng(SEED)
        model = tiny_model(with_mixing=True)
        net = GatedNetwork(
            np.full(30, 0.2), ScalarHead(rng.standard_normal(30)), W=rng.standard_normal((20, 30))
        )
        stability = gate_stability(
            net, model, AttackSpec(AttackNorm.L2, 5.0), LossKind.SQUARE, samples=100, seed=SEED
        )
        assert stability.attack_flips > 0
        assert stability.attack_flip_fraction <= 1.0

    def test_contrastive_path(self):
        model = tiny_model(with_mixing=True)
        net = pseudo_head(tiny_net(model, m=1).with_head(None))
        stability = gate_stability(
            net,
            model,
            AttackSpec(AttackNorm.L2, 0.0),
            LossKind.CONTRASTIVE_LOGISTIC,
            samples=100,
            seed=SEED,
        )
        assert stability.attack_flips == 0
        assert stability.total == 100 * net.H

    def test_deterministic_under_seed(self):
        model = tiny_model(with_mixing=True)
        net = tiny_net(model, m=1)
        kwargs = dict(
            attack=AttackSpec(AttackNorm.L2, 0.01),
            kind=LossKind.SQUARE,
            samples=150,
            seed=77,
        )
        a = gate_stability(net, model, **kwargs)
        b = gate_stability(net, model, **kwargs)
        assert (a.noise_activations, a.feature_deactivations, a.attack_flips) == (
            b.noise_activations,
            b.feature_deactivations,
            b.attack_flips,
        )


class TestCancellationProb:
    def test_zero_window_is_zero(self):
        net = tiny_net(tiny_model(), m=2, assignment="independent")
        assert cancellation_prob(net, tiny_model(), 0.0, samples=10, seed=SEED) == 0.0

    def test_rejects_negative_window(self):
        net = tiny_net(tiny_model(), m=1)
        with pytest.raises(ValueError, match="non-negative"):
            cancellation_prob(net, tiny_model(), -1.0, samples=10, seed=SEED)

    def test_single_feature_nodes_cannot_cancel(self):
        # a one-feature node's pre-activation is at least entry/sqrt(k), so a
        # window below entry^2/sqrt(k) can never trigger
        model = tiny_model()
        net = tiny_net(model, m=1)
        entry = 20.0 / 100.0
        v = 0.5 * entry**2 / np.sqrt(model.k)
        assert cancellation_prob(net, model, v, samples=500, seed=SEED) == 0.0

    def test_huge_window_hits_whenever_support_is_nonempty(self):
        model = tiny_model()
        net = tiny_net(model, m=2, assignment="independent")
        n = 2000
        prob = cancellation_prob(net, model, 1e6, samples=n, seed=SEED)
        p_nonempty = 1.0 - (1.0 - model.k / model.d) ** model.d
        band = binomial_bound(n, p_nonempty)
        assert abs(prob - p_nonempty) <= band, (
            f"huge-window probability {prob:.4f} vs nonempty-support {p_nonempty:.4f}"
        )


class TestIsotropy:
    def test_rejects_large_dimension(self):
        with pytest.raises(ValueError, match="d <= 16"):
            check_isotropy_optimal(17, 4, 8.0, trials=5, samples=10, seed=SEED)

    def test_rejects_negative_trace(self):
        with pytest.raises(ValueError, match="non-negative"):
            check_isotropy_optimal(8, 4, -1.0, trials=5, samples=10, seed=SEED)

    def test_isotropic_score_mostly_wins_at_desk_scale(self):
        frac = check_isotropy_optimal(6, 2, 3.0, trials=10, samples=4000, seed=SEED)
        assert 0.6 <= frac <= 1.0, f"isotropic win fraction {frac}"

    def test_deterministic_under_seed(self):
        a = check_isotropy_optimal(6, 2, 3.0, trials=5, samples=500, seed=3)
        b = check_isotropy_optimal(6, 2, 3.0, trials=5, samples=500, seed=3)
        assert a == b


class TestSandwiches:
    def test_l2_sandwich_holds_under_mixing(self):
        model = tiny_model(with_mixing=True)
        net = tiny_net(model, m=1)
        rate = l2_sandwich_check(net, model, samples=1000, seed=SEED)
        assert rate >= 0.99, f"L2 sandwich pass rate {rate}"

    def test_linf_sandwich_holds_without_mixing(self):
        model = tiny_model(with_mixing=False)
        net = tiny_net(model, m=1)
        rate = linf_sandwich_check(net, model, samples=1000, seed=SEED)
        assert rate >= 0.99, f"L1 sandwich pass rate {rate}"

    def test_linf_sandwich_requires_identity_mixing(self):
        model = tiny_model(with_mixing=True)
        net = tiny_net(model, m=1)
        with pytest.raises(ValueError, match="identity mixing"):
            linf_sandwich_check(net, model, samples=10, seed=SEED)


class TestClosedFormAnnotations:
    def test_psi_rate_value(self):
        expected = 10.0 * np.log(10.0) ** 2 + np.sqrt(10.0 / 1000.0)
        assert psi_rate(1000, 10, 10000, 1) == pytest.approx(expected, rel=1e-12)

    def test_psi_rate_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            psi_rate(0, 10, 100, 1)

    def test_theory_epsilon_value(self):
        assert theory_epsilon(1000, 10) == pytest.approx(
            1.0 / (np.log(1000.0) * np.sqrt(10.0)), rel=1e-12
        )

    def test_theory_epsilon_scales_with_sqrt_m(self):
        assert theory_epsilon(1000, 10, 4) == pytest.approx(theory_epsilon(1000, 10) / 2.0)

    def test_theory_epsilon_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            theory_epsilon(10, 0)
