"""Purification and stability diagnostics.

The central object is the leakage matrix
``B = U D U^T (U U^T)^{-1}`` with ``D_h = 1`` iff node ``h`` carries some
active feature: its off-support magnitudes say how much inactive features
bleed into the representation. On top of that live Monte Carlo counters for
gate flips (noise- and attack-induced), near-cancellation probability inside
multi-feature nodes, an isotropy-optimality check for diagonal pair scores,
an L1 analog of the attack-effectiveness sandwich for identity mixing, and a
closed-form error-rate annotation.

Everything here is noise-convention-agnostic unless it draws observations.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp
from scipy.linalg import cho_factor, cho_solve
from scipy.linalg.lapack import dpocon

from sparsegate.attack import AttackSpec, perturb
from sparsegate.gated_net import (
    GRAM_COND_LIMIT,
    GatedNetwork,
    PurifiedSpec,
    SingularityError,
    build_purified,
    _require_scalar_head,
)
from sparsegate.objectives import LossKind, softplus
from sparsegate.sparse_model import (
    ContrastivePair,
    SparseModel,
    observe,
    respond,
    sample_features,
    sample_pair,
    sample_unitary,
)

__all__ = [
    "PurificationStats",
    "GateStability",
    "leakage_matrix",
    "gamma_stats",
    "gate_stability",
    "cancellation_prob",
    "check_isotropy_optimal",
    "l2_sandwich_check",
    "linf_sandwich_check",
    "psi_rate",
    "theory_epsilon",
]

#: Comparison slack for the deterministic block-structure and sandwich checks.
BLOCK_TOL = 1e-8

#: Row-batch size for Monte Carlo loops that materialize (n, H) intermediates.
CHUNK = 256


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def _factor_gram(G: np.ndarray):
    """Cholesky-factor U U^T, refusing numerically singular Gram matrices.

    An exactly singular Gram can survive the raw factorization when its zero
    pivot rounds to a tiny positive number, so the reciprocal condition
    estimate is checked as well.
    """
    try:
        chol = cho_factor(G, lower=True)
    except np.linalg.LinAlgError as exc:
        raise SingularityError(f"U U^T is not positive definite: {exc}") from exc
    rcond, info = dpocon(chol[0], np.linalg.norm(G, 1), uplo=b"L")
    if info != 0 or rcond <= 1.0 / GRAM_COND_LIMIT:
        raise SingularityError(
            f"U U^T is numerically singular: reciprocal condition estimate {rcond:.3e}"
        )
    return chol


# ---------------------------------------------------------------------------
# leakage matrix and the gamma statistics
# ---------------------------------------------------------------------------


def _flagged_nodes(U_csr: sp.csr_matrix, active_set: np.ndarray) -> np.ndarray:
    """Indices of nodes carrying at least one feature from ``active_set``."""
    if len(active_set) == 0:
        return np.empty(0, dtype=np.int64)
    rows = U_csr[np.asarray(active_set, dtype=np.int64)]
    return np.unique(rows.indices)


def leakage_matrix(net: GatedNetwork, active_set) -> np.ndarray:
    """The d x d matrix B = U D U^T (U U^T)^{-1}.

    ``D`` is diagonal with ``D_h = 1`` iff some ``i`` in ``active_set`` has
    ``U_{i,h} != 0``. Raises :class:`SingularityError` when the Gram matrix
    ``U U^T`` is numerically singular.
    """
    U = net.U
    U_csr = U if sp.issparse(U) else sp.csr_matrix(U)
    G = (U_csr @ U_csr.T).toarray()
    chol = _factor_gram(G)

    active_set = np.asarray(active_set, dtype=np.int64)
    flags = _flagged_nodes(U_csr, active_set)
    if flags.size == 0:
        return np.zeros((net.d, net.d))
    Ucols = U_csr.tocsc()[:, flags]
    K = (Ucols @ Ucols.T).toarray()  # U D U^T
    return cho_solve(chol, K).T  # K G^{-1}, using symmetry of K and G


@dataclass(frozen=True)
class PurificationStats:
    """Across-repetition summary of the two leakage block averages."""

    gamma1: float  # mean |B_ij| over i inactive, j active
    gamma2: float  # mean |B_ij| over i != j, both inactive
    std1: float
    std2: float
    m: int
    reps: int


def _gamma_one_rep(
    model: SparseModel,
    spec: PurifiedSpec,
    assignment: str,
    n_samples: int,
    net_rng: np.random.Generator,
    data_rng: np.random.Generator,
) -> tuple[float, float]:
    """Block-averaged |B| over fresh active sets for one fresh assignment.

    The leakage matrix depends on neither the mixing nor the observation
    noise, so this draws supports only and never touches M.
    """
    net = build_purified(replace(model, M=None), spec, net_rng, assignment=assignment)
    U_csr = net.U
    G = (U_csr @ U_csr.T).toarray()
    Ginv = cho_solve(_factor_gram(G), np.eye(model.d))
    U_csc = U_csr.tocsc()

    d = model.d
    g1_sum = g1_n = g2_sum = g2_n = 0.0
    X = sample_features(model, data_rng, n_samples)
    for s in range(n_samples):
        active = np.flatnonzero(X[s])
        k_hat = active.size
        flags = _flagged_nodes(U_csr, active)
        if flags.size == 0:
            # no flagged node: B = 0, so both block averages contribute zero
            if 0 < k_hat < d:
                g1_n += 1
            if k_hat < d - 1:
                g2_n += 1
            continue
        Ucols = U_csc[:, flags]
        B = Ucols @ (Ucols.T @ Ginv)  # (d, d) dense
        absB = np.abs(B)

        total = absB.sum()
        col_active = absB[:, active].sum()
        row_active = absB[active, :].sum()
        block_aa = absB[np.ix_(active, active)].sum()
        diag_all = np.abs(np.einsum("ii->i", B)).sum()
        diag_active = np.abs(B[active, active]).sum()

        if 0 < k_hat < d:
            g1_sum += (col_active - block_aa) / ((d - k_hat) * k_hat)
            g1_n += 1
        if k_hat < d - 1:
            off_cc = total - col_active - row_active + block_aa - (diag_all - diag_active)
            g2_sum += off_cc / ((d - k_hat) * (d - k_hat - 1))
            g2_n += 1
    return g1_sum / max(g1_n, 1), g2_sum / max(g2_n, 1)


def gamma_stats(
    model: SparseModel,
    spec: PurifiedSpec,
    samples: int,
    reps: int,
    seed,
    assignment: str = "independent",
) -> PurificationStats:
    """Monte Carlo means and stds of the two leakage block averages.

    Each repetition draws a fresh purified assignment and ``samples`` fresh
    active sets, averages |B_ij| over the (inactive, active) block (gamma1)
    and the off-diagonal (inactive, inactive) block (gamma2), and the
    across-repetition mean and sample std (ddof=1) are reported.

    The default ``assignment="independent"`` is the randomized construction;
    the grouped one has identically zero leakage at m = 1 and a singular Gram
    matrix for m >= 2, so it is not usable here.
    """
    if reps < 1:
        raise ValueError("reps must be at least 1")
    per_rep = np.empty((reps, 2))
    for r in range(reps):
        net_rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(r, 0)))
        data_rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(r, 1)))
        per_rep[r] = _gamma_one_rep(model, spec, assignment, samples, net_rng, data_rng)
    means = per_rep.mean(axis=0)
    stds = per_rep.std(axis=0, ddof=1) if reps > 1 else np.zeros(2)
    return PurificationStats(
        gamma1=float(means[0]),
        gamma2=float(means[1]),
        std1=float(stds[0]),
        std2=float(stds[1]),
        m=spec.m,
        reps=reps,
    )


# ---------------------------------------------------------------------------
# gate stability
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GateStability:
    """Flip counts over (node, sample) pairs.

    ``noise_activations``: gate open although the node carries no active
    feature. ``feature_deactivations``: gate closed although it carries one.
    ``attack_flips``: gate state differs between z and z + delta.
    """

    noise_activations: int
    feature_deactivations: int
    attack_flips: int
    total: int  # samples x H
    samples: int

    @property
    def noise_activation_fraction(self) -> float:
        return self.noise_activations / self.total

    @property
    def feature_deactivation_fraction(self) -> float:
        return self.feature_deactivations / self.total

    @property
    def attack_flip_fraction(self) -> float:
        return self.attack_flips / self.total


def _carried_active(U_pattern: sp.csr_matrix, X: np.ndarray) -> np.ndarray:
    """Boolean (n, H): node h carries some feature active in row i of X."""
    counts = (X != 0).astype(np.float64) @ U_pattern
    return np.asarray(counts) > 0


def gate_stability(
    net: GatedNetwork,
    model: SparseModel,
    attack: AttackSpec,
    kind: LossKind,
    samples: int,
    seed,
) -> GateStability:
    """Monte Carlo gate-flip counters under noise and under the attack.

    Draws fresh inputs from ``model`` (dissimilar pairs for the contrastive
    loss, single samples with responses otherwise), compares the actual gate
    pattern of z against the idealized noise-free carried-feature pattern,
    and counts gates flipped by the attack step.
    """
    rng = _rng(seed)
    U = net.U
    U_csr = U if sp.issparse(U) else sp.csr_matrix(U)
    pattern = U_csr.copy()
    pattern.data = np.ones_like(pattern.data)

    noise_act = feat_deact = flips = 0
    done = 0
    while done < samples:
        n = min(CHUNK, samples - done)
        if kind is LossKind.CONTRASTIVE_LOGISTIC:
            pair = sample_pair(model, -1, rng, n)
            X, Z, inp, y = pair.x, pair.z, pair, None
        else:
            X = sample_features(model, rng, n)
            Z = observe(model, X, rng)
            y = respond(model, X, rng)
            inp = Z
        carried = _carried_active(pattern, X)
        open_ = net.gates(Z)
        noise_act += int((open_ & ~carried).sum())
        feat_deact += int((~open_ & carried).sum())
        delta = perturb(attack, kind, net, inp, y)
        flips += int((net.gates(Z + delta) != open_).sum())
        done += n

    return GateStability(
        noise_activations=noise_act,
        feature_deactivations=feat_deact,
        attack_flips=flips,
        total=samples * net.H,
        samples=samples,
    )


# ---------------------------------------------------------------------------
# near-cancellation inside multi-feature nodes
# ---------------------------------------------------------------------------


def cancellation_prob(net: GatedNetwork, model: SparseModel, v: float, samples: int, seed) -> float:
    """P(some carrying node has 0 < |x^T U_h| < v / ||U_h||).

    Only nodes carrying at least one active feature count; the window is
    open on both ends, so a node with a single carried feature can never
    land in it once v is at the gate scale (its pre-activation magnitude is
    at least entry_value / sqrt(k)).
    """
    if v < 0:
        raise ValueError(f"window v must be non-negative, got {v}")
    if v == 0:
        return 0.0
    rng = _rng(seed)
    U = net.U
    U_csr = U if sp.issparse(U) else sp.csr_matrix(U)
    pattern = U_csr.copy()
    pattern.data = np.ones_like(pattern.data)
    col_norms = np.sqrt(np.asarray(U_csr.multiply(U_csr).sum(axis=0)).ravel())
    with np.errstate(divide="ignore"):
        thresh = np.where(col_norms > 0, v / np.maximum(col_norms, 1e-300), 0.0)

    hits = 0
    done = 0
    while done < samples:
        n = min(CHUNK, samples - done)
        X = sample_features(model, rng, n)
        pre = np.abs(np.asarray(X @ U_csr))  # feature-space pre-activations, noise-free
        carried = _carried_active(pattern, X)
        event = carried & (pre > 0) & (pre < thresh)
        hits += int(event.any(axis=1).sum())
        done += n
    return hits / samples


# ---------------------------------------------------------------------------
# isotropy optimality of diagonal pair scores
# ---------------------------------------------------------------------------


def _diag_score_loss(Xp: np.ndarray, Xp_sim: np.ndarray, Xp_dis: np.ndarray, w: np.ndarray) -> float:
    """Balanced contrastive loss of g(x, x') = (x P) diag(w) (x' P)^T, inputs pre-rotated."""
    g_sim = np.einsum("ij,j,ij->i", Xp, w, Xp_sim)
    g_dis = np.einsum("ij,j,ij->i", Xp, w, Xp_dis)
    return float(np.mean(0.5 * (softplus(-g_sim) + softplus(g_dis))))


def check_isotropy_optimal(d: int, k: int, trace: float, trials: int, samples: int, seed) -> float:
    """Fraction of random trace-matched diagonals beaten by the isotropic one.

    For each trial, draws a Haar rotation P and a random non-uniform diagonal
    ``w`` with sum(w) = trace, then estimates the contrastive loss of the
    pair score ``x^T P diag(w) P^T x'`` on a shared sample bank (common
    random numbers) against the isotropic score with ``w = (trace/d) * 1``.
    Returns the fraction of trials in which the isotropic loss is strictly
    lower. Desk-scale only: d is capped at 16.
    """
    if d > 16:
        raise ValueError(f"isotropy check is desk-scale only (d <= 16), got d={d}")
    if trace < 0:
        raise ValueError("trace budget must be non-negative")
    rng = _rng(seed)
    model = SparseModel(d=d, k=k, zeta=0.0, M=None, sigma_y=0.0)
    X = sample_features(model, rng, samples)
    X_dis = sample_features(model, rng, samples)

    # isotropic score is rotation-invariant: P diag(c) P^T = c I
    w_iso = np.full(d, trace / d)
    loss_iso = _diag_score_loss(X, X, X_dis, w_iso)

    wins = 0
    for _ in range(trials):
        P = sample_unitary(d, rng)
        w = rng.dirichlet(np.ones(d)) * trace
        Xp = X @ P
        loss_trial = _diag_score_loss(Xp, Xp, X_dis @ P, w)
        if loss_iso < loss_trial:
            wins += 1
    return wins / trials


# ---------------------------------------------------------------------------
# effectiveness sandwiches
# ---------------------------------------------------------------------------


def l2_sandwich_check(net: GatedNetwork, model: SparseModel, samples: int, seed) -> float:
    """Fraction of samples with ||theta_X||_2 <= attack_effectiveness <= ||theta||_2.

    ``theta_X`` is the target vector restricted to the sample's active set.
    Both bounds carry a 1e-8 slack. Unlike the L1 variant this works under
    any unitary mixing because L2 norms are rotation-invariant.
    """
    head = _require_scalar_head(net)
    rng = _rng(seed)
    theta_sq = model.theta0**2
    upper = float(np.sqrt(theta_sq.sum()))

    passed = 0
    done = 0
    while done < samples:
        n = min(CHUNK, samples - done)
        X = sample_features(model, rng, n)
        Z = observe(model, X, rng)
        open_ = net.gates(Z)
        va = np.where(open_, head.a, 0.0)
        eff = np.linalg.norm(net.matmul_w(va.T), axis=0)
        lower = np.sqrt((X != 0) @ theta_sq)
        ok = (eff >= lower - BLOCK_TOL) & (eff <= upper + BLOCK_TOL)
        passed += int(ok.sum())
        done += n
    return passed / samples


def linf_sandwich_check(net: GatedNetwork, model: SparseModel, samples: int, seed) -> float:
    """Fraction of samples with ||theta_X||_1 <= ||a^T diag(gates) W^T||_1 <= ||theta||_1.

    The L1 effectiveness norm governs the sign attack the way the L2 norm
    governs the gradient attack, but bounding it needs the mixing out of the
    way: the model must have identity mixing (M is None or exactly I).
    """
    if model.M is not None and not np.array_equal(model.M, np.eye(model.d)):
        raise ValueError("the L1 sandwich check requires identity mixing")
    head = _require_scalar_head(net)
    rng = _rng(seed)
    theta_abs = np.abs(model.theta0)
    upper = theta_abs.sum()

    passed = 0
    done = 0
    while done < samples:
        n = min(CHUNK, samples - done)
        X = sample_features(model, rng, n)
        Z = observe(model, X, rng)
        open_ = net.gates(Z)
        va = np.where(open_, head.a, 0.0)
        eff_l1 = np.abs(net.matmul_w(va.T)).sum(axis=0)
        lower = (X != 0) @ theta_abs
        ok = (eff_l1 >= lower - BLOCK_TOL) & (eff_l1 <= upper + BLOCK_TOL)
        passed += int(ok.sum())
        done += n
    return passed / samples


# ---------------------------------------------------------------------------
# closed-form annotations
# ---------------------------------------------------------------------------


def psi_rate(d: int, k: int, H: int, m: int) -> float:
    """Report-only error-rate annotation H m^3 k^3 ln(k)^2 / d^2 + sqrt(k/d).

    At desk scale this exceeds 1, which is exactly why the package verifies
    trends rather than absolute closeness to the idealized limits.
    """
    if min(d, k, H, m) <= 0:
        raise ValueError("all arguments must be positive")
    return H * m**3 * k**3 * np.log(k) ** 2 / d**2 + np.sqrt(k / d)


def theory_epsilon(d: int, k: int, m_star: int = 1) -> float:
    """The attack-budget scale 1 / (ln(d) sqrt(m_star k)) the theory works at."""
    if min(d, k, m_star) <= 0:
        raise ValueError("all arguments must be positive")
    return 1.0 / (np.log(d) * np.sqrt(m_star * k))
