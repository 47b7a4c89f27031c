"""Single-step input attacks and adversarial loss evaluation.

The L2 attack moves ``epsilon`` along the normalized loss gradient; the Linf
attack moves ``epsilon`` along its sign. Adversarial losses are always the
true re-gated losses at ``z + delta`` (never the first-order approximation),
with a counter for how many gates the step flipped.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from sparsegate.gated_net import GatedNetwork, _require_scalar_head, forward_supervised
from sparsegate.objectives import (
    LossKind,
    grad_z,
    loss_contrastive,
    loss_supervised,
    score_contrastive,
)
from sparsegate.sparse_model import ContrastivePair, Sample

__all__ = ["AttackNorm", "AttackSpec", "AdvEval", "perturb", "adv_loss", "attack_effectiveness"]

#: Gradients with L2 norm at or below this are treated as zero (no attack).
ZERO_GRAD_TOL = 1e-12


class AttackNorm(Enum):
    L2 = "l2"
    LINF = "linf"


@dataclass(frozen=True)
class AttackSpec:
    """Attack family and budget; ``epsilon = 0`` is the identity attack."""

    norm: AttackNorm = AttackNorm.L2
    epsilon: float = 0.0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be non-negative, got {self.epsilon}")


@dataclass(frozen=True)
class AdvEval:
    """Clean and adversarial losses plus the number of flipped gates.

    For batched inputs all three fields are arrays aligned with the batch.
    """

    clean: float | np.ndarray
    adversarial: float | np.ndarray
    gate_flips: int | np.ndarray


def perturb(spec: AttackSpec, kind: LossKind, net: GatedNetwork, input, y=None) -> np.ndarray:
    """Attack step delta with the same shape as the input's z.

    L2: epsilon * grad / ||grad||, or zero when ||grad|| <= 1e-12.
    Linf: epsilon * sign(grad) elementwise (sign(0) = 0).
    """
    g = grad_z(kind, net, input, y)
    if spec.epsilon == 0:
        return np.zeros_like(g)
    if spec.norm is AttackNorm.LINF:
        return spec.epsilon * np.sign(g)
    if g.ndim == 1:
        nrm = np.linalg.norm(g)
        return np.zeros_like(g) if nrm <= ZERO_GRAD_TOL else (spec.epsilon / nrm) * g
    nrm = np.linalg.norm(g, axis=1)
    scale = np.where(nrm > ZERO_GRAD_TOL, spec.epsilon / np.maximum(nrm, ZERO_GRAD_TOL), 0.0)
    return scale[:, None] * g


def _clean_and_attacked_z(spec, kind, net, input, y):
    delta = perturb(spec, kind, net, input, y)
    if kind is LossKind.CONTRASTIVE_LOGISTIC:
        z = np.asarray(input.z, dtype=np.float64)
    else:
        z = input.z if isinstance(input, Sample) else np.asarray(input, dtype=np.float64)
    return z, z + delta


def adv_loss(spec: AttackSpec, kind: LossKind, net: GatedNetwork, input, y=None) -> AdvEval:
    """Clean loss, true re-gated loss at ``z + delta``, and gate-flip count.

    The perturbed loss re-evaluates every gate at the attacked input; the
    flip count compares the indicator patterns at ``z`` and ``z + delta``
    (per sample for batched inputs).
    """
    z, z_adv = _clean_and_attacked_z(spec, kind, net, input, y)

    if kind is LossKind.CONTRASTIVE_LOGISTIC:
        label = input.y if y is None else y
        clean = loss_contrastive(score_contrastive(net, input), label)
        attacked_pair = ContrastivePair(
            z=z_adv, z_prime=input.z_prime, y=input.y, x=input.x, x_prime=input.x_prime
        )
        adversarial = loss_contrastive(score_contrastive(net, attacked_pair), label)
    else:
        clean = loss_supervised(kind, forward_supervised(net, z), y)
        adversarial = loss_supervised(kind, forward_supervised(net, z_adv), y)

    flips = net.gates(z) != net.gates(z_adv)
    gate_flips = int(flips.sum()) if z.ndim == 1 else flips.sum(axis=1)
    return AdvEval(clean=clean, adversarial=adversarial, gate_flips=gate_flips)


def attack_effectiveness(net: GatedNetwork, sample) -> float | np.ndarray:
    """The gate-dependent norm ||a^T diag(gates(z)) W^T||_2.

    This is the factor multiplying epsilon in the first-order adversarial
    loss increase of a scalar-head network. Accepts a :class:`Sample` or a
    raw z array; batched inputs (n, d) return one norm per row.
    """
    head = _require_scalar_head(net)
    z = sample.z if isinstance(sample, Sample) else np.asarray(sample, dtype=np.float64)
    open_ = net.gates(z)
    va = np.where(open_, head.a, 0.0)
    if z.ndim == 1:
        return float(np.linalg.norm(net.matmul_w(va)))
    return np.linalg.norm(net.matmul_w(va.T), axis=0)
