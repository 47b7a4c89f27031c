"""Loss functions and their input-gradients.

Supervised losses act on the scalar output ``f(z)``; the contrastive logistic
loss acts on the pair score ``g(z, z') = r(z) . r(z')``. Gradients are taken
with the gate indicators frozen at their current values (the activation is
piecewise linear, so this is the a.e. gradient), and for contrastive pairs
only the left observation ``z`` is differentiated.
"""

from __future__ import annotations

from enum import Enum

import numpy as np
from scipy.special import expit

from sparsegate.gated_net import (
    GatedNetwork,
    apply_head,
    apply_head_transpose,
    represent,
    _require_matrix_head,
    _require_scalar_head,
)
from sparsegate.sparse_model import ContrastivePair, Sample

__all__ = [
    "LossKind",
    "loss_supervised",
    "loss_contrastive",
    "score_contrastive",
    "grad_z",
]


class LossKind(Enum):
    SQUARE = "square"
    ABSOLUTE = "absolute"
    LOGISTIC = "logistic"
    CONTRASTIVE_LOGISTIC = "contrastive_logistic"

    @property
    def supervised(self) -> bool:
        return self is not LossKind.CONTRASTIVE_LOGISTIC


def softplus(t):
    """Overflow-safe log(1 + exp(t)) = max(t, 0) + log1p(exp(-|t|))."""
    t = np.asarray(t, dtype=np.float64)
    out = np.maximum(t, 0.0) + np.log1p(np.exp(-np.abs(t)))
    return float(out) if out.ndim == 0 else out


def _check_binary_labels(y) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise ValueError("labels must be +1 or -1")
    return y


def loss_supervised(kind: LossKind, f, y):
    """Pointwise supervised loss; ``f`` and ``y`` broadcast.

    Square: (f - y)^2. Absolute: |f - y|. Logistic: log(1 + exp(-y f)) with
    y restricted to {-1, +1}.
    """
    if not kind.supervised:
        raise ValueError(f"{kind} is not a supervised loss")
    f = np.asarray(f, dtype=np.float64)
    if kind is LossKind.SQUARE:
        out = (f - y) ** 2
    elif kind is LossKind.ABSOLUTE:
        out = np.abs(f - y)
    else:
        y = _check_binary_labels(y)
        out = softplus(-y * f)
    out = np.asarray(out)
    return float(out) if out.ndim == 0 else out


def loss_contrastive(g, y):
    """log(1 + exp(-y g)) for pair labels y in {-1, +1}."""
    y = _check_binary_labels(y)
    return softplus(-y * np.asarray(g, dtype=np.float64))


def score_contrastive(net: GatedNetwork, pair: ContrastivePair):
    """Pair score g = r(z) . r(z'); batched pairs give a vector of scores."""
    _require_matrix_head(net)
    r = represent(net, pair.z)
    r_prime = represent(net, pair.z_prime)
    if r.ndim == 1:
        return float(r @ r_prime)
    return np.einsum("ij,ij->i", r, r_prime)


def _as_z(input) -> np.ndarray:
    if isinstance(input, Sample):
        return input.z
    return np.asarray(input, dtype=np.float64)


def _dloss_df(kind: LossKind, f: np.ndarray, y) -> np.ndarray:
    if kind is LossKind.SQUARE:
        return 2.0 * (f - y)
    if kind is LossKind.ABSOLUTE:
        return np.sign(f - y)  # sign(0) = 0: zero subgradient at the kink
    y = _check_binary_labels(y)
    return -y * expit(-y * f)


def grad_z(kind: LossKind, net: GatedNetwork, input, y=None) -> np.ndarray:
    """Analytic gradient of the loss w.r.t. the observation ``z``.

    Gate indicators are held fixed, so inside one gate pattern this is the
    exact gradient; at a gate boundary the indicator contributes nothing.
    For ``ContrastiveLogistic`` the input is a :class:`ContrastivePair` (its
    label is used unless ``y`` overrides it) and only ``z`` is perturbed:
    grad = (dl/dg) W diag(gates(z)) A r(z').

    Supervised kinds accept a :class:`Sample` or a raw z array plus the
    response ``y``. Batched inputs (n, d) return batched gradients.
    """
    if kind is LossKind.CONTRASTIVE_LOGISTIC:
        if not isinstance(input, ContrastivePair):
            raise TypeError("contrastive gradient needs a ContrastivePair")
        _require_matrix_head(net)
        label = input.y if y is None else y
        z = np.asarray(input.z, dtype=np.float64)
        single = z.ndim == 1
        r_prime = represent(net, input.z_prime)
        g = score_contrastive(net, input)
        label_arr = _check_binary_labels(label)
        dldg = -label_arr * expit(-label_arr * np.asarray(g))
        Av = apply_head(net, r_prime)          # (H,) or (n, H)
        masked = np.where(net.gates(z), Av, 0.0)
        grad = net.matmul_w(masked if single else masked.T)
        grad = grad if single else grad.T      # (d,) or (n, d)
        return dldg * grad if single else dldg[:, None] * grad

    head = _require_scalar_head(net)
    if y is None:
        raise ValueError("supervised gradients need the response y")
    z = _as_z(input)
    single = z.ndim == 1
    pre = net.preacts(z)
    open_ = np.abs(pre) >= net.b
    f = np.where(open_, pre, 0.0) @ head.a
    dldf = _dloss_df(kind, f, np.asarray(y, dtype=np.float64))
    va = np.where(open_, head.a, 0.0)          # (H,) or (n, H)
    grad = net.matmul_w(va if single else va.T)
    grad = grad if single else grad.T
    return dldf * grad if single else np.asarray(dldf)[:, None] * grad
