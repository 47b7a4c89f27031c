"""Two-layer gated networks.

The first layer computes ``z^T W`` and gates each hidden value through
``sigma(v, e) = v * 1{|v| >= e}``; the head is either a scalar weight vector
(supervised output ``f``) or a matrix mapping hidden values back to feature
space (contrastive representation ``r``).

Networks built from a sparse feature-space weight matrix ``U`` and a unitary
mixing ``M`` keep the factored form ``W = M U`` internally: every product with
``W`` or ``W^T`` is evaluated through ``M`` and the sparse ``U``, which is
algebraically identical to the dense route and avoids materializing a d x H
matrix at experiment scale. ``net.W`` materializes the dense weights on demand.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.linalg import cho_factor, cho_solve
from scipy.linalg.lapack import dpocon

__all__ = [
    "ScalarHead",
    "MatrixHead",
    "PseudoHead",
    "GatedNetwork",
    "PurifiedSpec",
    "MembershipReport",
    "HeadMismatchError",
    "SingularityError",
    "activation",
    "build_purified",
    "check_membership",
    "pseudo_head",
    "head_matrix",
    "forward_supervised",
    "represent",
    "save_network",
    "load_network",
]

#: Gram condition number beyond which the pseudo-inverse head falls back to SVD.
GRAM_COND_LIMIT = 1e12

#: Default head scale for the contrastive pseudo-inverse head.
DEFAULT_TAU = float(np.sqrt(5.0))

SERIALIZATION_VERSION = 1


class HeadMismatchError(TypeError):
    """Raised when an operation needs the other head kind."""


class SingularityError(np.linalg.LinAlgError):
    """Raised when W W^T is numerically rank-deficient."""


@dataclass(frozen=True, eq=False)
class ScalarHead:
    """Scalar output weights a (one per hidden node)."""

    a: np.ndarray


@dataclass(frozen=True, eq=False)
class MatrixHead:
    """Explicit matrix head A of shape (H, d)."""

    A: np.ndarray


@dataclass(frozen=True, eq=False)
class PseudoHead:
    """Implicit pseudo-inverse head A = tau * W^T (W W^T)^{-1}.

    Stores a Cholesky factorization of the Gram matrix W W^T instead of the
    dense A; products with A and A^T are evaluated through triangular solves.
    """

    tau: float
    chol: tuple  # output of scipy.linalg.cho_factor on W W^T


def activation(v, e):
    """Hard-gated linear activation ``sigma(v, e) = v * 1{|v| >= e}``.

    The gate is inclusive at ``|v| = e``. Accepts scalars or arrays (``e``
    broadcasts); thresholds must be non-negative.
    """
    e_arr = np.asarray(e)
    if np.any(e_arr < 0):
        raise ValueError("gate threshold must be non-negative")
    out = np.where(np.abs(v) >= e_arr, v, 0.0)
    return float(out) if np.ndim(v) == 0 and np.ndim(e) == 0 else out


class GatedNetwork:
    """First-layer weights, gates, and a head.

    Construct either from dense weights ``W`` (observation space) or from
    feature-space weights ``U`` (dense or scipy sparse) with an optional
    unitary mixing ``M``; in the latter case ``W = M U`` is implied and only
    materialized on demand. ``U`` always refers to ``M^T W``; with no mixing
    the two coincide.

    Instances are immutable in use: forward passes never touch stored state,
    and head replacement returns a new network sharing the weight storage.
    """

    __slots__ = ("b", "head", "_W", "_U", "_M")

    def __init__(self, b, head, *, W=None, U=None, M=None):
        if (W is None) == (U is None):
            raise ValueError("provide exactly one of W or U")
        b = np.ascontiguousarray(b, dtype=np.float64)
        if b.ndim != 1:
            raise ValueError(f"b must be a vector, got shape {b.shape}")
        if np.any(b < 0):
            raise ValueError("gate thresholds b must be non-negative")
        if M is not None:
            M = np.ascontiguousarray(M, dtype=np.float64)
            if M.ndim != 2 or M.shape[0] != M.shape[1]:
                raise ValueError(f"M must be square, got shape {M.shape}")
        if W is not None:
            W = np.ascontiguousarray(W, dtype=np.float64)
            if W.ndim != 2:
                raise ValueError(f"W must be 2-d, got shape {W.shape}")
            if M is not None and M.shape[0] != W.shape[0]:
                raise ValueError("M and W dimensions disagree")
            self._W = W
            self._U = M.T @ W if M is not None else W
        else:
            if sp.issparse(U):
                U = U.tocsr().astype(np.float64)
            else:
                U = np.ascontiguousarray(U, dtype=np.float64)
                if U.ndim != 2:
                    raise ValueError(f"U must be 2-d, got shape {U.shape}")
            if M is not None and M.shape[0] != U.shape[0]:
                raise ValueError("M and U dimensions disagree")
            self._U = U
            self._W = None  # materialized lazily
        self._M = M
        if b.shape[0] != self.H:
            raise ValueError(f"b has length {b.shape[0]}, expected H={self.H}")
        self.b = b
        self.head = None
        if head is not None:
            self._check_head(head)
            self.head = head

    # -- basic geometry ------------------------------------------------------

    @property
    def d(self) -> int:
        return self._U.shape[0]

    @property
    def H(self) -> int:
        return self._U.shape[1]

    @property
    def M(self):
        return self._M

    @property
    def U(self):
        """Feature-space weights M^T W (sparse when stored sparse)."""
        return self._U

    @property
    def W(self) -> np.ndarray:
        """Dense observation-space weights; materialized on first access."""
        if self._W is None:
            if sp.issparse(self._U):
                dense = (self._U.T @ self._M.T).T if self._M is not None else self._U.toarray()
            else:
                dense = self._M @ self._U if self._M is not None else self._U
            self._W = np.ascontiguousarray(dense)
        return self._W

    def _check_head(self, head) -> None:
        if isinstance(head, ScalarHead):
            if head.a.shape != (self.H,):
                raise ValueError(f"scalar head has shape {head.a.shape}, expected ({self.H},)")
        elif isinstance(head, MatrixHead):
            if head.A.shape != (self.H, self.d):
                raise ValueError(f"matrix head has shape {head.A.shape}, expected ({self.H}, {self.d})")
        elif isinstance(head, PseudoHead):
            if head.chol[0].shape != (self.d, self.d):
                raise ValueError("pseudo head factor has the wrong shape")
        else:
            raise TypeError(f"unsupported head type {type(head).__name__}")

    def with_head(self, head) -> "GatedNetwork":
        """Return a copy sharing the weight storage but carrying ``head``."""
        if head is not None:
            self._check_head(head)
        clone = copy.copy(self)
        clone.head = head
        return clone

    def with_gates(self, b) -> "GatedNetwork":
        """Return a copy sharing weights and head but with thresholds ``b``.

        Valid because every head kind depends on W only, not on the gates.
        """
        b = np.broadcast_to(np.asarray(b, dtype=np.float64), (self.H,)).copy()
        if np.any(b < 0):
            raise ValueError("gate thresholds must be non-negative")
        clone = copy.copy(self)
        clone.b = b
        return clone

    # -- linear algebra through the factored weights --------------------------

    def matmul_w(self, V: np.ndarray) -> np.ndarray:
        """W @ V for V of shape (H,) or (H, n)."""
        out = self._U @ V
        return self._M @ out if self._M is not None else out

    def matmul_wt(self, Y: np.ndarray) -> np.ndarray:
        """W^T @ Y for Y of shape (d,) or (d, n)."""
        if self._M is not None:
            Y = self._M.T @ Y
        return self._U.T @ Y

    def preacts(self, Z: np.ndarray) -> np.ndarray:
        """Pre-gate hidden values ``z^T W`` for one vector (d,) or a batch (n, d)."""
        Z = np.asarray(Z, dtype=np.float64)
        single = Z.ndim == 1
        out = self.matmul_wt(Z.T if not single else Z)
        return out if single else out.T

    def gates(self, Z: np.ndarray) -> np.ndarray:
        """Boolean gate indicators 1{|z^T W_h| >= b_h} (inclusive)."""
        return np.abs(self.preacts(Z)) >= self.b

    def hidden(self, Z: np.ndarray) -> np.ndarray:
        """Gated hidden values sigma(z^T W, b)."""
        pre = self.preacts(Z)
        return np.where(np.abs(pre) >= self.b, pre, 0.0)

    def gram(self) -> np.ndarray:
        """Dense W W^T (equals M (U U^T) M^T in factored form)."""
        if sp.issparse(self._U):
            S = (self._U @ self._U.T).toarray()
        else:
            S = self._U @ self._U.T
        if self._M is not None:
            S = self._M @ S @ self._M.T
        return S


# ---------------------------------------------------------------------------
# purified construction
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PurifiedSpec:
    """Parameters of the hand-built purified network.

    ``entry_value`` is the common magnitude of every nonzero U entry,
    ``gate_value`` the common gate threshold. Use :meth:`for_model` to fill
    both from the generative model's (d, zeta).
    """

    m: int
    H: int
    entry_value: float
    gate_value: float

    def __post_init__(self):
        if self.m < 1 or self.H < 1:
            raise ValueError("m and H must be positive")
        if self.entry_value <= 0:
            raise ValueError("entry_value must be positive")
        if self.gate_value < 0:
            raise ValueError("gate_value must be non-negative")

    @classmethod
    def for_model(cls, model, m: int, H: int) -> "PurifiedSpec":
        """Entry value d/(H m) and gate value (zeta ln d / sqrt d)(d sqrt m / H)."""
        d = model.d
        if d % m != 0:
            raise ValueError(f"m={m} must divide d={d}")
        if (H * m) % d != 0:
            raise ValueError(f"d={d} must divide H*m={H * m}")
        entry = d / (H * m)
        gate = (model.zeta * np.log(d) / np.sqrt(d)) * (d * np.sqrt(m) / H)
        return cls(m=m, H=H, entry_value=entry, gate_value=gate)


def build_purified(model, spec: PurifiedSpec, rng, assignment: str = "grouped") -> GatedNetwork:
    """Construct a purified network with m features per node (scalar head a = 1).

    Two assignment modes:

    - ``"grouped"``: the d features are split into d/m groups of m; each group
      gets its own disjoint block of H*m/d nodes. Column sparsity is exactly m
      and every invariant of ``spec`` holds deterministically.
    - ``"independent"``: each coordinate independently picks H*m/d nodes
      without replacement. Rows still have exactly H*m/d nonzeros, but columns
      collide: column sparsity is Binomial(d, m/d) with mean m. This is the
      randomized recipe behind the leakage statistics.

    In both modes every nonzero U entry equals ``spec.entry_value``, all gates
    equal ``spec.gate_value``, and ``U a = 1`` for the all-ones head exactly.

    Parameters
    ----------
    model : SparseModel
        Supplies d and the mixing matrix M (W = M U; U stays sparse inside).
    spec : PurifiedSpec
    rng : Generator (or seed)
    assignment : {"grouped", "independent"}
    """
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    d, m, H = model.d, spec.m, spec.H
    if d % m != 0:
        raise ValueError(f"m={m} must divide d={d}")
    if (H * m) % d != 0:
        raise ValueError(f"d={d} must divide H*m={H * m}")
    rows_per_feature = H * m // d

    if assignment == "grouped":
        n_groups = d // m
        node_perm = rng.permutation(H)
        # feature i belongs to group i // m; group g owns a disjoint node block
        cols = np.empty((d, rows_per_feature), dtype=np.int64)
        for g in range(n_groups):
            block = node_perm[g * rows_per_feature : (g + 1) * rows_per_feature]
            cols[g * m : (g + 1) * m, :] = block
    elif assignment == "independent":
        cols = np.empty((d, rows_per_feature), dtype=np.int64)
        for i in range(d):
            cols[i] = rng.choice(H, size=rows_per_feature, replace=False)
    else:
        raise ValueError(f"unknown assignment mode {assignment!r}")

    rows = np.repeat(np.arange(d), rows_per_feature)
    data = np.full(d * rows_per_feature, spec.entry_value)
    U = sp.coo_matrix((data, (rows, cols.ravel())), shape=(d, H)).tocsr()
    b = np.full(H, spec.gate_value)
    return GatedNetwork(b, ScalarHead(np.ones(H)), U=U, M=model.M)


# ---------------------------------------------------------------------------
# membership in the screened class
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class MembershipReport:
    """Per-node and per-row screening diagnostics with margins.

    ``gate_upper_ok``: b_h strictly below ||U_h|| / sqrt(k ||U_h||_0).
    ``gate_lower_ok``: b_h strictly above the same quantity divided by ln d.
    ``window_separated``: that lower edge strictly above ||U_h|| / sqrt(d),
    i.e. the window is non-empty. Margins are (edge - b) and (b - edge)
    respectively, so positive means pass. Empty columns fail all gate flags.
    """

    m_star: int
    sparsity_ok: np.ndarray
    sign_consistent: np.ndarray
    gate_upper_ok: np.ndarray
    gate_lower_ok: np.ndarray
    window_separated: np.ndarray
    gate_upper_margin: np.ndarray
    gate_lower_margin: np.ndarray
    all_nodes_nonzero: bool

    @property
    def sparsity_all_ok(self) -> bool:
        return bool(self.sparsity_ok.all())

    @property
    def signs_all_ok(self) -> bool:
        return bool(self.sign_consistent.all())

    @property
    def gate_upper_all_ok(self) -> bool:
        return bool(self.gate_upper_ok.all())

    @property
    def gate_lower_all_ok(self) -> bool:
        return bool(self.gate_lower_ok.all())


def check_membership(net: GatedNetwork, m_star: int, k: int) -> MembershipReport:
    """Check the screened-class conditions node by node.

    Parameters
    ----------
    net : GatedNetwork
    m_star : int
        Cap on per-node feature count ||U_h||_0.
    k : int
        Sparsity parameter of the data model (enters the gate window).
    """
    U = net.U
    if sp.issparse(U):
        col_counts = np.asarray(U.getnnz(axis=0))
        col_norms = np.sqrt(np.asarray(U.multiply(U).sum(axis=0)).ravel())
        Ud = None
    else:
        col_counts = np.count_nonzero(U, axis=0)
        col_norms = np.linalg.norm(U, axis=0)
        Ud = U

    sparsity_ok = col_counts <= m_star
    nonzero = col_counts > 0

    with np.errstate(divide="ignore", invalid="ignore"):
        upper_edge = np.where(nonzero, col_norms / np.sqrt(k * np.maximum(col_counts, 1)), 0.0)
    lower_edge = upper_edge / np.log(net.d)
    noise_edge = col_norms / np.sqrt(net.d)

    gate_upper_margin = upper_edge - net.b
    gate_lower_margin = net.b - lower_edge
    gate_upper_ok = nonzero & (net.b < upper_edge)
    gate_lower_ok = nonzero & (net.b > lower_edge)
    window_separated = nonzero & (lower_edge > noise_edge)

    # row sign consistency: all nonzeros of a row share one sign,
    # checked through per-row min/max of the stored entries
    if Ud is None:
        mins = np.full(net.d, np.inf)
        maxs = np.full(net.d, -np.inf)
        coo = U.tocoo()
        np.minimum.at(mins, coo.row, coo.data)
        np.maximum.at(maxs, coo.row, coo.data)
        has_entries = np.zeros(net.d, dtype=bool)
        has_entries[coo.row] = True
        sign_consistent = ~has_entries | (mins > 0) | (maxs < 0)
    else:
        sign_consistent = np.empty(net.d, dtype=bool)
        for i in range(net.d):
            row = Ud[i][Ud[i] != 0]
            sign_consistent[i] = row.size == 0 or (row > 0).all() or (row < 0).all()

    return MembershipReport(
        m_star=m_star,
        sparsity_ok=sparsity_ok,
        sign_consistent=sign_consistent,
        gate_upper_ok=gate_upper_ok,
        gate_lower_ok=gate_lower_ok,
        window_separated=window_separated,
        gate_upper_margin=gate_upper_margin,
        gate_lower_margin=gate_lower_margin,
        all_nodes_nonzero=bool(nonzero.all()),
    )


# ---------------------------------------------------------------------------
# heads and forward passes
# ---------------------------------------------------------------------------


def pseudo_head(net: GatedNetwork, tau: float = DEFAULT_TAU) -> GatedNetwork:
    """Attach the lazy contrastive head A = tau * W^T (W W^T)^{-1}.

    The Gram matrix W W^T is factorized once (Cholesky); if its estimated
    condition number exceeds 1e12 the routine falls back to an SVD of W and
    either builds A explicitly or raises :class:`SingularityError` reporting
    the smallest singular value when W is numerically rank-deficient.
    """
    G = net.gram()
    try:
        c, low = cho_factor(G, lower=True)
        anorm = np.linalg.norm(G, 1)
        rcond, info = dpocon(c, anorm, uplo=b"L")
        if info == 0 and rcond > 1.0 / GRAM_COND_LIMIT:
            return net.with_head(PseudoHead(tau=float(tau), chol=(c, low)))
    except np.linalg.LinAlgError:
        pass

    s = np.linalg.svd(net.W, compute_uv=False)
    if s[-1] <= 0 or (s[0] / s[-1]) ** 2 > GRAM_COND_LIMIT:
        raise SingularityError(
            f"W W^T is numerically singular: smallest singular value of W is {s[-1]:.3e}"
        )
    A = float(tau) * np.linalg.pinv(net.W)
    return net.with_head(MatrixHead(A))


def head_matrix(net: GatedNetwork) -> np.ndarray:
    """Materialize the (H, d) head matrix (dense; test and serialization aid)."""
    head = net.head
    if isinstance(head, MatrixHead):
        return head.A
    if isinstance(head, PseudoHead):
        return head.tau * cho_solve(head.chol, net.W).T
    raise HeadMismatchError("network has no matrix-kind head")


def _require_scalar_head(net: GatedNetwork) -> ScalarHead:
    if not isinstance(net.head, ScalarHead):
        raise HeadMismatchError(
            f"operation needs a scalar head, network has {type(net.head).__name__}"
        )
    return net.head


def _require_matrix_head(net: GatedNetwork):
    if not isinstance(net.head, (MatrixHead, PseudoHead)):
        raise HeadMismatchError(
            f"operation needs a matrix-kind head, network has {type(net.head).__name__}"
        )
    return net.head


def forward_supervised(net: GatedNetwork, z: np.ndarray):
    """Scalar output f(z) = sum_h a_h sigma(z^T W_h, b_h).

    ``z`` may be one vector (d,) or a batch (n, d); returns a float or (n,).
    """
    head = _require_scalar_head(net)
    hid = net.hidden(z)
    out = hid @ head.a
    return float(out) if np.ndim(out) == 0 else out


def apply_head_transpose(net: GatedNetwork, hidden: np.ndarray) -> np.ndarray:
    """A^T @ hidden for one hidden vector (H,) or a batch (n, H)."""
    head = _require_matrix_head(net)
    single = hidden.ndim == 1
    if isinstance(head, MatrixHead):
        out = hidden @ head.A
    else:
        Wh = net.matmul_w(hidden if single else hidden.T)  # (d,) or (d, n)
        out = head.tau * cho_solve(head.chol, Wh)
        out = out if single else out.T
    return out


def apply_head(net: GatedNetwork, V: np.ndarray) -> np.ndarray:
    """A @ v for one feature vector (d,) or a batch (n, d); returns (n, H)."""
    head = _require_matrix_head(net)
    single = V.ndim == 1
    if isinstance(head, MatrixHead):
        out = V @ head.A.T
    else:
        sol = head.tau * cho_solve(head.chol, V if single else V.T)  # (d,) or (d, n)
        out = net.matmul_wt(sol)
        out = out if single else out.T
    return out


def represent(net: GatedNetwork, z: np.ndarray) -> np.ndarray:
    """Feature-space representation r(z) = A^T sigma(z^T W, b)."""
    _require_matrix_head(net)
    return apply_head_transpose(net, net.hidden(z))


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def save_network(net: GatedNetwork, path) -> None:
    """Persist (d, H, W, b, head, optional M) to ``path`` as a versioned .npz.

    Factored networks are materialized to dense W; a pseudo-inverse head is
    stored as its tau and rebuilt on load.
    """
    payload = {
        "version": np.int64(SERIALIZATION_VERSION),
        "d": np.int64(net.d),
        "H": np.int64(net.H),
        "W": net.W,
        "b": net.b,
    }
    if net.M is not None:
        payload["M"] = net.M
    head = net.head
    if head is None:
        payload["head_kind"] = "none"
    elif isinstance(head, ScalarHead):
        payload["head_kind"] = "scalar"
        payload["head_a"] = head.a
    elif isinstance(head, MatrixHead):
        payload["head_kind"] = "matrix"
        payload["head_A"] = head.A
    elif isinstance(head, PseudoHead):
        payload["head_kind"] = "pseudo"
        payload["head_tau"] = np.float64(head.tau)
    else:  # pragma: no cover - construction rejects unknown heads
        raise TypeError(f"cannot serialize head {type(head).__name__}")
    np.savez(path, **payload)


def load_network(path) -> GatedNetwork:
    """Inverse of :func:`save_network`."""
    with np.load(path, allow_pickle=False) as blob:
        version = int(blob["version"])
        if version != SERIALIZATION_VERSION:
            raise ValueError(f"unsupported serialization version {version}")
        W = blob["W"]
        b = blob["b"]
        M = blob["M"] if "M" in blob.files else None
        kind = str(blob["head_kind"])
        if kind == "scalar":
            head = ScalarHead(blob["head_a"])
        elif kind == "matrix":
            head = MatrixHead(blob["head_A"])
        else:
            head = None
        net = GatedNetwork(b, head, W=W, M=M)
        if kind == "pseudo":
            net = pseudo_head(net, tau=float(blob["head_tau"]))
    return net
