"""Sparse-coding data generator.

True features ``x`` are i.i.d. symmetric sparse coordinates; what the network
sees is the mixed, noisy observation ``z = M x + xi`` for a unitary ``M``.
Supervised responses are linear in ``x`` plus Gaussian noise, and contrastive
pairs share ``x`` (label +1) or draw it fresh (label -1).

Every sampler takes an explicit :class:`numpy.random.Generator` (or anything
``numpy.random.default_rng`` accepts), so callers control the stream layout.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

__all__ = [
    "NoiseConvention",
    "SparseModel",
    "Sample",
    "ContrastivePair",
    "sample_unitary",
    "sample_features",
    "observe",
    "respond",
    "respond_class",
    "make_sample",
    "sample_pair",
]

#: Max-norm tolerance on M^T M - I for a matrix to count as unitary.
UNITARY_TOL = 1e-10


class NoiseConvention(Enum):
    """How the observation noise covariance scales with dimension.

    SCALED_BY_DIM: xi ~ N(0, zeta^2 I / d), so E||xi||^2 = zeta^2.
    RAW:           xi ~ N(0, zeta^2 I), per-coordinate std zeta.
    """

    SCALED_BY_DIM = "scaled_by_dim"
    RAW = "raw"


def _rng(seed) -> np.random.Generator:
    """Coerce ``seed`` (Generator, SeedSequence, int, None) to a Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass(frozen=True)
class SparseModel:
    """Parameters of the generative triple (x, z, y).

    Parameters
    ----------
    d : int
        Feature dimension.
    k : int
        Sparsity parameter; each coordinate is nonzero with probability k/d.
    zeta : float
        Observation noise scale (interpreted per ``noise_convention``).
    M : ndarray of shape (d, d), optional
        Unitary mixing matrix. ``None`` means the identity (no mixing), which
        several diagnostics rely on.
    theta0 : ndarray of shape (d,), optional
        Regression coefficients; defaults to the all-ones vector.
    sigma_y : float
        Response noise std.
    noise_convention : NoiseConvention
        Scaling of the observation noise covariance.
    """

    d: int
    k: int
    zeta: float
    M: np.ndarray | None = None
    theta0: np.ndarray = None  # type: ignore[assignment]  # filled in __post_init__
    sigma_y: float = 0.1
    noise_convention: NoiseConvention = NoiseConvention.SCALED_BY_DIM

    def __post_init__(self):
        if not (isinstance(self.d, (int, np.integer)) and self.d >= 1):
            raise ValueError(f"d must be a positive integer, got {self.d!r}")
        if not (isinstance(self.k, (int, np.integer)) and 1 <= self.k <= self.d):
            raise ValueError(f"k must satisfy 1 <= k <= d={self.d}, got {self.k!r}")
        if self.zeta < 0:
            raise ValueError(f"zeta must be non-negative, got {self.zeta}")
        if self.sigma_y < 0:
            raise ValueError(f"sigma_y must be non-negative, got {self.sigma_y}")
        if self.M is not None:
            M = np.asarray(self.M, dtype=np.float64)
            if M.shape != (self.d, self.d):
                raise ValueError(f"M must have shape ({self.d}, {self.d}), got {M.shape}")
            err = np.max(np.abs(M.T @ M - np.eye(self.d)))
            if err > UNITARY_TOL:
                raise ValueError(f"M is not unitary: max|M^T M - I| = {err:.3e}")
            object.__setattr__(self, "M", M)
        theta0 = np.ones(self.d) if self.theta0 is None else np.asarray(self.theta0, dtype=np.float64)
        if theta0.shape != (self.d,):
            raise ValueError(f"theta0 must have shape ({self.d},), got {theta0.shape}")
        object.__setattr__(self, "theta0", theta0)

    @property
    def noise_std(self) -> float:
        """Per-coordinate std of the observation noise."""
        if self.noise_convention is NoiseConvention.SCALED_BY_DIM:
            return self.zeta / np.sqrt(self.d)
        return self.zeta

    def mix(self, x: np.ndarray) -> np.ndarray:
        """Apply M (rows of ``x`` are vectors when 2-d). Identity when M is None."""
        if self.M is None:
            return x
        return x @ self.M.T if x.ndim == 2 else self.M @ x

    def unmix(self, z: np.ndarray) -> np.ndarray:
        """Apply M^T, the inverse mixing."""
        if self.M is None:
            return z
        return z @ self.M if z.ndim == 2 else self.M.T @ z


@dataclass(frozen=True)
class Sample:
    """One draw: true features, observation, and the active index set."""

    x: np.ndarray
    z: np.ndarray
    active_set: np.ndarray  # sorted indices i with x_i != 0

    def __post_init__(self):
        support = np.flatnonzero(self.x)
        if not np.array_equal(np.sort(np.asarray(self.active_set)), support):
            raise ValueError("active_set does not match the support of x")


@dataclass(frozen=True)
class ContrastivePair:
    """Observation pair with a similarity label.

    ``y = +1`` means both observations come from the same true features
    (only the noise differs); ``y = -1`` means independent features.
    """

    z: np.ndarray
    z_prime: np.ndarray
    y: int
    x: np.ndarray
    x_prime: np.ndarray


# ---------------------------------------------------------------------------
# samplers
# ---------------------------------------------------------------------------


def sample_unitary(d: int, seed) -> np.ndarray:
    """Draw a Haar-distributed d x d orthogonal matrix.

    QR decomposition of an i.i.d. standard-Gaussian matrix, with the signs of
    the diagonal of R fixed positive so the law is exactly Haar (without the
    correction, QR's sign ambiguity biases the draw).

    Parameters
    ----------
    d : int
        Dimension, at least 1.
    seed : Generator, SeedSequence, int, or None
        Randomness source.

    Returns
    -------
    ndarray of shape (d, d)
        Matrix M with max|M^T M - I| <= 1e-10.
    """
    if not (isinstance(d, (int, np.integer)) and d >= 1):
        raise ValueError(f"dimension must be a positive integer, got {d!r}")
    rng = _rng(seed)
    G = rng.standard_normal((d, d))
    Q, R = np.linalg.qr(G)
    # flip columns where R's diagonal is negative
    signs = np.sign(np.diag(R))
    signs[signs == 0] = 1.0
    return Q * signs


def sample_features(model: SparseModel, rng, n: int | None = None) -> np.ndarray:
    """Draw true feature vectors.

    Each coordinate is independently nonzero with probability k/d; a nonzero
    coordinate has magnitude ``min(1, |g|/sqrt(k) + 1/sqrt(k))`` with
    ``g ~ N(0,1)`` and a symmetric random sign, so all magnitudes land in
    ``[1/sqrt(k), 1]``.

    Parameters
    ----------
    model : SparseModel
    rng : Generator (or seed)
    n : int, optional
        When given, returns a batch of shape (n, d); otherwise a single (d,).
    """
    rng = _rng(rng)
    shape = (model.d,) if n is None else (n, model.d)
    mask = rng.random(shape) < model.k / model.d
    mag = np.minimum(1.0, np.abs(rng.standard_normal(shape)) / np.sqrt(model.k) + 1.0 / np.sqrt(model.k))
    sign = rng.integers(0, 2, shape) * 2.0 - 1.0
    return np.where(mask, sign * mag, 0.0)


def observe(model: SparseModel, x: np.ndarray, rng) -> np.ndarray:
    """Mix and corrupt features: ``z = M x + xi``.

    Accepts a single vector (d,) or a batch (n, d); the noise convention of
    ``model`` fixes the covariance of xi.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.d:
        raise ValueError(f"x has last dimension {x.shape[-1]}, expected {model.d}")
    rng = _rng(rng)
    z = model.mix(x)
    if model.zeta == 0:
        return z.copy() if z is x else z
    return z + model.noise_std * rng.standard_normal(x.shape)


def respond(model: SparseModel, x: np.ndarray, rng) -> float | np.ndarray:
    """Regression response ``y = theta0 . x + sigma_y * g``."""
    x = np.asarray(x, dtype=np.float64)
    rng = _rng(rng)
    clean = x @ model.theta0
    if model.sigma_y == 0:
        return clean
    return clean + model.sigma_y * rng.standard_normal(clean.shape if isinstance(clean, np.ndarray) else None)


def respond_class(model: SparseModel, x: np.ndarray, rng) -> int | np.ndarray:
    """Classification response: the sign of the noisy regression response.

    Exposed for completeness; the experiment presets only exercise the
    regression branch. ``sign(0)`` is mapped to +1 so labels stay in {-1, +1}.
    """
    raw = respond(model, x, rng)
    out = np.where(np.asarray(raw) >= 0, 1, -1)
    return int(out) if np.isscalar(raw) or out.ndim == 0 else out


def make_sample(model: SparseModel, rng) -> Sample:
    """Draw one full Sample (features, observation, active set)."""
    rng = _rng(rng)
    x = sample_features(model, rng)
    z = observe(model, x, rng)
    return Sample(x=x, z=z, active_set=np.flatnonzero(x))


def sample_pair(model: SparseModel, y: int, rng, n: int | None = None) -> ContrastivePair:
    """Draw a contrastive pair with label ``y``.

    ``y = +1``: x' is x itself and only the observation noise differs.
    ``y = -1``: x' is an independent draw.

    With ``n`` given, the fields hold batches of shape (n, d) instead of
    single vectors (the label still applies to every row).
    """
    if y not in (+1, -1):
        raise ValueError(f"pair label must be +1 or -1, got {y!r}")
    rng = _rng(rng)
    x = sample_features(model, rng, n)
    x_prime = x if y == +1 else sample_features(model, rng, n)
    z = observe(model, x, rng)
    z_prime = observe(model, x_prime, rng)
    return ContrastivePair(z=z, z_prime=z_prime, y=y, x=x, x_prime=x_prime)
