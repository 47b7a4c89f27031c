"""Downstream linear tasks on top of a frozen gated representation.

A downstream task is a fresh linear target on the same sparse features. The
hidden layer of a trained (here: constructed) network is frozen, a linear
head is fitted on clean observations by least squares, and the robustness
question becomes: how much does the attack on the *original* network's input
hurt the *new* head? The gap between adversarial and clean loss is the
robustness inheritance measure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from sparsegate.attack import AttackSpec, perturb
from sparsegate.gated_net import GatedNetwork, ScalarHead, forward_supervised
from sparsegate.objectives import LossKind, loss_supervised
from sparsegate.sparse_model import SparseModel, observe, respond, sample_features

__all__ = [
    "DownstreamTask",
    "FitResult",
    "RobustnessGap",
    "make_downstream_task",
    "fit_head",
    "robustness_gap",
]

#: Ridge added to a rank-deficient normal/kernel matrix, relative to mean(phi^2).
FALLBACK_RIDGE = 1e-8

#: Default coefficient magnitude of the canonical downstream target.
DOWNSTREAM_COEF = 0.7


@dataclass(frozen=True)
class DownstreamTask:
    """A linear target theta^T x + noise on the shared feature vector."""

    theta: np.ndarray
    sigma_y: float

    def respond(self, X: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        clean = X @ self.theta
        if self.sigma_y == 0:
            return np.asarray(clean, dtype=np.float64)
        return clean + self.sigma_y * rng.standard_normal(np.shape(clean))


def make_downstream_task(d: int, sigma_y: float = 0.1, coef: float = DOWNSTREAM_COEF) -> DownstreamTask:
    """The canonical downstream target: every coefficient equal to ``coef``."""
    if d <= 0:
        raise ValueError("d must be positive")
    if sigma_y < 0:
        raise ValueError("sigma_y must be non-negative")
    return DownstreamTask(theta=np.full(d, float(coef)), sigma_y=float(sigma_y))


@dataclass(frozen=True)
class FitResult:
    """Least-squares head fit on frozen gated hidden activations."""

    a: np.ndarray  # (H,) fitted head
    lambda_used: float
    degenerate_fallback: bool  # True when the tiny ridge had to be added
    train_loss: float
    n_samples: int


def _solve_psd(A: np.ndarray, B: np.ndarray, scale: float) -> tuple[np.ndarray, float, bool]:
    """Solve A x = B for symmetric PSD A, adding a tiny ridge only on failure."""
    try:
        return cho_solve(cho_factor(A, lower=True), B), 0.0, False
    except np.linalg.LinAlgError:
        lam = FALLBACK_RIDGE * scale
        A_reg = A + lam * np.eye(A.shape[0])
        return cho_solve(cho_factor(A_reg, lower=True), B), lam, True


def fit_head(
    net: GatedNetwork,
    Z: np.ndarray,
    y: np.ndarray,
    ridge: float = 0.0,
) -> FitResult:
    """Min-norm least-squares fit of a scalar head on frozen hidden activations.

    Uses the kernel route ``a = Phi^T (Phi Phi^T + lam I)^{-1} y`` when the
    sample count is below the width (the common case) and the primal normal
    equations otherwise. With ``ridge=0`` the system can be exactly singular,
    purified hidden layers have many duplicated columns, so a tiny ridge
    relative to mean(phi^2) is added on factorization failure and the result
    carries ``degenerate_fallback=True``.
    """
    if ridge < 0:
        raise ValueError("ridge must be non-negative")
    Z = np.asarray(Z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if Z.ndim != 2 or y.ndim != 1 or Z.shape[0] != y.shape[0]:
        raise ValueError(f"shape mismatch: Z {Z.shape} vs y {y.shape}")
    n = Z.shape[0]
    Phi = net.hidden(Z)  # (n, H)
    scale = float(np.mean(Phi**2))
    if scale == 0:
        raise ValueError("all hidden activations are zero; nothing to fit")

    if n < net.H:
        K = Phi @ Phi.T + ridge * np.eye(n)
        alpha, lam, fell_back = _solve_psd(K, y, scale)
        a = Phi.T @ alpha
    else:
        A = Phi.T @ Phi + ridge * np.eye(net.H)
        a, lam, fell_back = _solve_psd(A, Phi.T @ y, scale)

    resid = Phi @ a - y
    return FitResult(
        a=a,
        lambda_used=float(ridge + lam),
        degenerate_fallback=fell_back,
        train_loss=float(np.mean(resid**2)),
        n_samples=n,
    )


@dataclass(frozen=True)
class RobustnessGap:
    """Clean and adversarial square loss of a fitted downstream head."""

    loss_clean: float
    loss_adv: float
    degenerate_fallback: bool

    @property
    def gap(self) -> float:
        return self.loss_adv - self.loss_clean


def robustness_gap(
    net: GatedNetwork,
    model: SparseModel,
    task: DownstreamTask,
    attack: AttackSpec,
    n_train: int,
    n_test: int,
    rng: np.random.Generator,
) -> RobustnessGap:
    """Fit a downstream head on clean data, then attack it on fresh test data.

    The perturbation is the supervised square-loss attack against the fitted
    head itself. With epsilon = 0 the perturbation is identically zero and
    the gap is exactly 0.
    """
    X_tr = sample_features(model, rng, n_train)
    Z_tr = observe(model, X_tr, rng)
    y_tr = task.respond(X_tr, rng)
    fit = fit_head(net, Z_tr, y_tr)
    fitted = net.with_head(ScalarHead(a=fit.a))

    X_te = sample_features(model, rng, n_test)
    Z_te = observe(model, X_te, rng)
    y_te = task.respond(X_te, rng)

    delta = perturb(attack, LossKind.SQUARE, fitted, Z_te, y_te)
    f_clean = forward_supervised(fitted, Z_te)
    f_adv = forward_supervised(fitted, Z_te + delta)
    loss_clean = float(np.mean(loss_supervised(LossKind.SQUARE, f_clean, y_te)))
    loss_adv = float(np.mean(loss_supervised(LossKind.SQUARE, f_adv, y_te)))
    return RobustnessGap(
        loss_clean=loss_clean,
        loss_adv=loss_adv,
        degenerate_fallback=fit.degenerate_fallback,
    )
