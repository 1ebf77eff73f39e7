"""Tensor-train tensors and the standard algebra on them.

A :class:`TTTensor` stores cores ``Q_d`` of shape ``(r_{d-1}, I_d, r_d)`` with
``r_0 = r_D = 1``; entry ``(i_1..i_D)`` is the matrix product
``Q_1[:, i_1, :] @ ... @ Q_D[:, i_D, :]``.
"""
import math

import numpy as np

from . import _kernels
from .core import as_shape, check_indices
from .errors import ConfigurationError, NumericalError, ResourceError, StructureError

DENSE_CAP = 2 ** 24

ORTH_NONE = None
ORTH_LEFT = "left"
ORTH_RIGHT = "right"


class TTTensor:
    """Immutable tensor train.

    ``orth`` records a known gauge: ``"left"`` means cores ``0..D-2`` have
    orthonormal columns when unfolded to ``(r_{d-1} I_d, r_d)``; ``"right"``
    means cores ``1..D-1`` have orthonormal rows when unfolded to
    ``(r_{d-1}, I_d r_d)``.
    """

    __slots__ = ("cores", "orth")

    def __init__(self, cores, orth=ORTH_NONE):
        cores = [np.array(c, dtype=np.float64, order="C") for c in cores]
        if not cores:
            raise StructureError("a TT needs at least one core")
        for d, c in enumerate(cores):
            if c.ndim != 3:
                raise StructureError(f"core {d} has {c.ndim} axes, expected 3")
            if d > 0 and cores[d - 1].shape[2] != c.shape[0]:
                raise StructureError(
                    f"rank mismatch between core {d - 1} {cores[d - 1].shape} and core {d} {c.shape}")
        if cores[0].shape[0] != 1 or cores[-1].shape[2] != 1:
            raise StructureError("boundary ranks must be 1")
        if orth not in (ORTH_NONE, ORTH_LEFT, ORTH_RIGHT):
            raise ValueError(f"unknown orthogonality flag {orth!r}")
        for c in cores:
            c.setflags(write=False)
        self.cores = tuple(cores)
        self.orth = orth

    @property
    def ndim(self):
        return len(self.cores)

    @property
    def shape(self):
        return tuple(c.shape[1] for c in self.cores)

    @property
    def ranks(self):
        return (1,) + tuple(c.shape[2] for c in self.cores)

    @property
    def n_params(self):
        return sum(c.size for c in self.cores)

    def __repr__(self):
        return f"TTTensor(shape={self.shape}, ranks={self.ranks}, orth={self.orth})"

    @classmethod
    def random(cls, shape, ranks, rng=None):
        """Cores with i.i.d. standard normal entries, scaled to keep entries O(1)."""
        rng = np.random.default_rng(rng)
        shape = as_shape(shape)
        ranks = _full_ranks(ranks, len(shape))
        cores = [rng.standard_normal((ranks[d], n, ranks[d + 1])) / math.sqrt(ranks[d])
                 for d, n in enumerate(shape)]
        return cls(cores)

    @classmethod
    def rank1(cls, vectors):
        return cls([np.asarray(v, dtype=np.float64).reshape(1, -1, 1) for v in vectors])

    @classmethod
    def zeros(cls, shape):
        # rank-0 is stored as rank-1 with zero cores
        return cls([np.zeros((1, n, 1)) for n in as_shape(shape)])


def _full_ranks(ranks, D):
    """Expand an int or an interior/full rank list to ``(r_0, ..., r_D)``."""
    if np.isscalar(ranks):
        return (1,) + (int(ranks),) * (D - 1) + (1,)
    ranks = tuple(int(r) for r in ranks)
    if len(ranks) == D - 1:
        ranks = (1,) + ranks + (1,)
    if len(ranks) != D + 1 or ranks[0] != 1 or ranks[-1] != 1:
        raise ConfigurationError(f"cannot interpret ranks {ranks} for a {D}-dimensional TT")
    if any(r < 1 for r in ranks):
        raise ConfigurationError(f"ranks must be positive, got {ranks}")
    return ranks


def _check_same_shape(a, b):
    if a.shape != b.shape:
        raise StructureError(f"mode sizes differ: {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def tt_eval(t, idx):
    """Value of ``t`` at one multi-index, as a left-to-right chain product."""
    idx = check_indices(t.shape, idx)[0]
    vec = t.cores[0][0, idx[0], :]
    for c, i in zip(t.cores[1:], idx[1:]):
        vec = vec @ c[:, i, :]
    return float(vec[0])


def tt_eval_batch(t, idx, batch_size=65536):
    """Values of ``t`` at every row of an (n, D) index array."""
    idx = check_indices(t.shape, idx)
    out = np.empty(idx.shape[0])
    for s in range(0, idx.shape[0], batch_size):
        out[s:s + batch_size] = _kernels.tt_eval_batch(list(t.cores), idx[s:s + batch_size])
    return out


def tt_to_dense(t, max_elements=DENSE_CAP):
    n = math.prod(t.shape)
    if max_elements is not None and n > max_elements:
        raise ResourceError(f"densifying shape {t.shape} needs {n} elements, cap is {max_elements}")
    res = t.cores[0].reshape(-1, t.cores[0].shape[2])
    for c in t.cores[1:]:
        res = (res @ c.reshape(c.shape[0], -1)).reshape(-1, c.shape[2])
    return res.reshape(t.shape)


# ---------------------------------------------------------------------------
# SVD-based construction and truncation
# ---------------------------------------------------------------------------

def _fix_signs(U, Vt):
    """Make the largest-magnitude entry of each column of U positive (first on ties)."""
    if U.shape[1] == 0:
        return U, Vt
    pivot = np.argmax(np.abs(U), axis=0)
    s = np.sign(U[pivot, np.arange(U.shape[1])])
    s[s == 0] = 1.0
    return U * s, Vt * s[:, None]


def svd(M):
    """Thin SVD with the deterministic sign convention used throughout."""
    try:
        U, s, Vt = np.linalg.svd(M, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"SVD did not converge: {exc}") from exc
    U, Vt = _fix_signs(U, Vt)
    return U, s, Vt


def _truncation_rank(s, delta, cap):
    """Smallest rank (>= 1, <= cap) whose discarded tail has norm <= delta."""
    tail = np.sqrt(np.cumsum((s ** 2)[::-1]))[::-1]  # tail[k] = ||s[k:]||
    k = len(s)
    if delta is not None:
        below = np.nonzero(tail <= delta)[0]
        if below.size:
            k = int(below[0])
    if cap is not None:
        k = min(k, cap)
    return max(k, 1)


def tt_svd(a, max_ranks=None, eps=None):
    """Sequential-unfolding SVD of a dense array (result is left-orthogonal).

    Exactly one of ``max_ranks`` (int or list) and ``eps`` (relative Frobenius
    tolerance) must be given.
    """
    if (max_ranks is None) == (eps is None):
        raise ConfigurationError("give exactly one of max_ranks and eps")
    a = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError("input tensor has non-finite entries")
    shape = as_shape(a.shape)
    D = len(shape)
    caps = _full_ranks(max_ranks, D) if max_ranks is not None else (None,) * (D + 1)
    delta = None
    if eps is not None:
        delta = eps * np.linalg.norm(a) / math.sqrt(max(D - 1, 1))
    cores = []
    r = 1
    rest = a.reshape(1, -1)
    for d in range(D - 1):
        M = rest.reshape(r * shape[d], -1)
        U, s, Vt = svd(M)
        k = _truncation_rank(s, delta, caps[d + 1])
        cores.append(U[:, :k].reshape(r, shape[d], k))
        rest = s[:k, None] * Vt[:k]
        r = k
    cores.append(rest.reshape(r, shape[-1], 1))
    return TTTensor(cores, orth=ORTH_LEFT if D > 1 else ORTH_NONE)


def _qr_pos(M):
    """Reduced QR with non-negative diagonal of R."""
    Q, R = np.linalg.qr(M)
    s = np.sign(np.diag(R))
    s[s == 0] = 1.0
    return Q * s, R * s[:, None]


def tt_orthogonalize(t, direction=ORTH_LEFT):
    """Sweep of QR factorizations moving the non-orthogonal part to one end."""
    cores = [np.array(c) for c in t.cores]
    D = len(cores)
    if direction == ORTH_LEFT:
        for d in range(D - 1):
            r0, n, r1 = cores[d].shape
            Q, R = _qr_pos(cores[d].reshape(r0 * n, r1))
            cores[d] = Q.reshape(r0, n, Q.shape[1])
            cores[d + 1] = np.einsum("ab,bic->aic", R, cores[d + 1])
    elif direction == ORTH_RIGHT:
        for d in range(D - 1, 0, -1):
            r0, n, r1 = cores[d].shape
            Q, R = _qr_pos(cores[d].reshape(r0, n * r1).T)
            cores[d] = Q.T.reshape(Q.shape[1], n, r1)
            cores[d - 1] = np.einsum("aib,cb->aic", cores[d - 1], R)
    else:
        raise ValueError(f"direction must be 'left' or 'right', got {direction!r}")
    return TTTensor(cores, orth=direction if D > 1 else ORTH_NONE)


def _roundoff_floor(t):
    """Magnitude of rounding noise in a contraction of the cores of ``t``."""
    logs = [math.log(n) for n in (np.linalg.norm(c) for c in t.cores) if n > 0]
    if len(logs) < t.ndim:
        return 0.0
    return 64 * np.finfo(np.float64).eps * math.exp(min(sum(logs), 700.0))


def tt_round(t, max_ranks=None, eps=None):
    """Right-orthogonalize, then truncate left to right with SVDs."""
    if (max_ranks is None) == (eps is None):
        raise ConfigurationError("give exactly one of max_ranks and eps")
    D = t.ndim
    if D == 1:
        return TTTensor(t.cores)
    caps = _full_ranks(max_ranks, D) if max_ranks is not None else (None,) * (D + 1)
    ro = tt_orthogonalize(t, ORTH_RIGHT)
    cores = [np.array(c) for c in ro.cores]
    delta = None
    if eps is not None:
        # after right-orthogonalization the norm lives in the first core; tails
        # below the roundoff level of the input cores count as zero, so exact
        # cancellations (a - a) collapse to rank 1
        delta = max(eps * np.linalg.norm(cores[0]) / math.sqrt(D - 1), _roundoff_floor(t))
    for d in range(D - 1):
        r0, n, r1 = cores[d].shape
        U, s, Vt = svd(cores[d].reshape(r0 * n, r1))
        k = _truncation_rank(s, delta, caps[d + 1])
        cores[d] = U[:, :k].reshape(r0, n, k)
        cores[d + 1] = np.einsum("ab,bic->aic", s[:k, None] * Vt[:k], cores[d + 1])
    return TTTensor(cores, orth=ORTH_LEFT)


# ---------------------------------------------------------------------------
# algebra
# ---------------------------------------------------------------------------

def tt_axpy(alpha, a, beta, b):
    """``alpha * a + beta * b`` with block-structured cores (ranks add)."""
    _check_same_shape(a, b)
    D = a.ndim
    if D == 1:
        return TTTensor([alpha * a.cores[0] + beta * b.cores[0]])
    cores = []
    for d, (ca, cb) in enumerate(zip(a.cores, b.cores)):
        if d == 0:
            cores.append(np.concatenate([alpha * ca, beta * cb], axis=2))
        elif d == D - 1:
            cores.append(np.concatenate([ca, cb], axis=0))
        else:
            ra0, n, ra1 = ca.shape
            rb0, _, rb1 = cb.shape
            c = np.zeros((ra0 + rb0, n, ra1 + rb1))
            c[:ra0, :, :ra1] = ca
            c[ra0:, :, ra1:] = cb
            cores.append(c)
    return TTTensor(cores)


def tt_scale(t, alpha):
    cores = list(t.cores)
    cores[-1] = alpha * cores[-1]
    return TTTensor(cores, orth=t.orth if t.orth == ORTH_LEFT else ORTH_NONE)


def _left_envs(a, b):
    """``envs[d]`` contracts cores ``< d`` of a and b: shape (ra_d, rb_d)."""
    envs = [np.ones((1, 1))]
    for ca, cb in zip(a.cores, b.cores):
        envs.append(np.einsum("ab,aic,bid->cd", envs[-1], ca, cb))
    return envs


def _right_envs(a, b):
    """``envs[d]`` contracts cores ``>= d`` of a and b: shape (ra_d, rb_d)."""
    envs = [np.ones((1, 1))]
    for ca, cb in zip(reversed(a.cores), reversed(b.cores)):
        envs.append(np.einsum("aic,bid,cd->ab", ca, cb, envs[-1]))
    return envs[::-1]


def tt_inner(a, b):
    """Frobenius inner product, contracting paired cores left to right."""
    _check_same_shape(a, b)
    return float(_left_envs(a, b)[-1][0, 0])


def tt_norm(t):
    return math.sqrt(max(tt_inner(t, t), 0.0))


def tt_inner_vjp(a, b):
    """Gradient of ``tt_inner(a, b)`` with respect to each core of ``a``."""
    _check_same_shape(a, b)
    left = _left_envs(a, b)
    right = _right_envs(a, b)
    return [np.einsum("ab,bid,cd->aic", left[d], cb, right[d + 1])
            for d, cb in enumerate(b.cores)]


def tt_gauge(t, d, R, max_cond=1e8):
    """Insert ``R @ R^-1`` on the bond between cores ``d`` and ``d + 1``."""
    D = t.ndim
    if not 0 <= d < D - 1:
        raise IndexError(f"bond {d} out of range for a {D}-dimensional TT")
    R = np.asarray(R, dtype=np.float64)
    r = t.cores[d].shape[2]
    if R.shape != (r, r):
        raise StructureError(f"gauge matrix must be {r}x{r}, got {R.shape}")
    cond = np.linalg.cond(R)
    if not np.isfinite(cond) or cond >= max_cond:
        raise NumericalError(f"gauge matrix is singular or ill-conditioned (cond={cond:.3g})")
    cores = list(t.cores)
    cores[d] = np.einsum("aib,bc->aic", cores[d], R)
    nxt = cores[d + 1]
    cores[d + 1] = np.linalg.solve(R, nxt.reshape(r, -1)).reshape(nxt.shape)
    return TTTensor(cores)


def tt_stack(ts):
    """Stack K TTs of equal mode sizes along a new leading mode of size K.

    The leading core is the ``1 x K x K`` selector; the remaining cores are
    block-diagonal unions of the inputs' cores (the last one concatenated
    along its left rank), so unequal rank profiles need no padding.
    """
    ts = list(ts)
    if not ts:
        raise ValueError("need at least one TT to stack")
    shape = ts[0].shape
    for t in ts[1:]:
        if t.shape != shape:
            raise StructureError(f"mode sizes differ: {shape} vs {t.shape}")
    K, D = len(ts), len(shape)
    lead = np.eye(K).reshape(1, K, K)
    cores = [lead]
    for d in range(D):
        rl = [t.cores[d].shape[0] for t in ts]
        rr = [t.cores[d].shape[2] for t in ts]
        last = d == D - 1
        c = np.zeros((sum(rl), shape[d], 1 if last else sum(rr)))
        ol = orr = 0
        for k, t in enumerate(ts):
            if last:
                c[ol:ol + rl[k], :, :] = t.cores[d]
            else:
                c[ol:ol + rl[k], :, orr:orr + rr[k]] = t.cores[d]
            ol += rl[k]
            orr += rr[k]
        cores.append(c)
    return TTTensor(cores)


def best_truncation_errors(a, ranks):
    """Frobenius norms of the SVD tails of each unfolding of a dense array.

    Entry ``d`` is the best rank-``ranks[d+1]`` approximation error of the
    unfolding with modes ``0..d`` as rows.
    """
    a = np.asarray(a)
    D = a.ndim
    ranks = _full_ranks(ranks, D)
    tails = []
    for d in range(D - 1):
        s = np.linalg.svd(a.reshape(math.prod(a.shape[:d + 1]), -1), compute_uv=False)
        tails.append(float(np.linalg.norm(s[ranks[d + 1]:])))
    return tails
