"""TT cross-approximation of a black-box oracle with fixed bond ranks.

Each sweep runs maxvol left to right to choose nested left index sets and
right to left to choose nested right index sets.  The cores are then
interpolated as ``Q_d = E_d @ inv(E~_d)``, where ``E_d`` is the sampled fiber
block ``X[L_d, :, R_d]`` unfolded to ``(r_{d-1} I_d) x r_d`` and ``E~_d`` holds
the rows of ``E_d`` that make up ``L_{d+1}``.
"""
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .core import QttMap, ResidencyMeter, TensorOracle, fiber_indices, virtual_oracle
from .errors import (BudgetExceededError, ConfigurationError, DataError,
                     IllConditionedError, TTCAWarning)
from .maxvol import maxvol
from .tt import TTTensor, _full_ranks, tt_eval_batch

RANK_RTOL = 1e-10
MAX_COND = 1e10
RIDGE = 1e-12


@dataclass
class CrossState:
    """Index sets of a cross approximation.

    ``left[d]`` is an ``(r_d, d)`` array of prefixes and ``right[d]`` an
    ``(r_{d+1}, D - d - 1)`` array of suffixes (zero-based core ``d``,
    rank list ``ranks = (r_0, ..., r_D)``).
    """

    shape: tuple
    ranks: list
    left: list
    right: list
    target_ranks: tuple = ()
    sweeps: int = 0
    val_index: np.ndarray = None
    val_values: np.ndarray = None
    val_error: float = math.nan
    history: list = field(default_factory=list)
    events: list = field(default_factory=list)

    def copy(self):
        return CrossState(self.shape, list(self.ranks), [a.copy() for a in self.left],
                          [a.copy() for a in self.right], self.target_ranks, self.sweeps,
                          self.val_index, self.val_values, self.val_error,
                          list(self.history), list(self.events))

    def same_indices(self, other):
        return (self.ranks == other.ranks
                and all(np.array_equal(a, b) for a, b in zip(self.left, other.left))
                and all(np.array_equal(a, b) for a, b in zip(self.right, other.right)))

    def sweep_cost(self):
        """Upper bound on the oracle entries one select + interpolate pass draws."""
        D = len(self.shape)
        blocks = [self.ranks[d] * self.shape[d] * self.ranks[d + 1] for d in range(D)]
        return 2 * sum(blocks) - blocks[0] - blocks[-1] + sum(blocks)


@dataclass
class CrossReport:
    samples: int
    sweeps: int
    val_error: float
    history: list
    converged: bool
    budget_exceeded: bool
    peak_resident: int
    ranks: tuple
    events: list
    state: CrossState = None


class CachedOracle(TensorOracle):
    """Wraps an oracle so that each distinct entry is requested from it only once.

    Repeated fibers across sweeps are served from memory.  Cached values are
    counted as resident in ``meter``.
    """

    def __init__(self, oracle, meter=None):
        super().__init__(oracle.shape, self._lookup, name=oracle.name)
        self.inner = oracle
        self.meter = meter
        self.store = {}

    def _lookup(self, idx):
        keys = np.ravel_multi_index(tuple(idx.T), self.shape).tolist()
        store = self.store
        first = {}
        for m, k in enumerate(keys):
            if k not in store and k not in first:
                first[k] = m
        if first:
            missing = list(first.values())
            fresh = self.inner.entries(idx[missing])
            for m, v in zip(missing, fresh.tolist()):
                store[keys[m]] = v
            if self.meter is not None:
                self.meter.acquire(len(missing))
        return np.fromiter((store[k] for k in keys), dtype=np.float64, count=len(keys))


def feasible_ranks(shape, ranks):
    """Clip a scalar rank to ``min(prod(I[:d]), prod(I[d:]))`` per bond.

    An explicit rank list is validated instead and must already be feasible.
    """
    D = len(shape)
    caps = [1] + [min(math.prod(shape[:d]), math.prod(shape[d:])) for d in range(1, D)] + [1]
    if np.isscalar(ranks):
        return tuple(min(int(ranks), c) for c in caps)
    full = _full_ranks(ranks, D)
    for d, (r, c) in enumerate(zip(full, caps)):
        if r > c:
            raise ConfigurationError(f"rank {r} on bond {d} exceeds the feasible maximum {c} for shape {shape}")
    return full


def _random_distinct(rng, dims, count):
    """``count`` distinct multi-indices over ``dims``, uniformly at random."""
    dims = tuple(dims)
    if not dims:
        if count != 1:
            raise ConfigurationError("an empty index set supports only rank 1")
        return np.zeros((1, 0), dtype=np.int64)
    total = math.prod(dims)
    if count > total:
        raise ConfigurationError(f"cannot draw {count} distinct indices from {total}")
    if total <= max(1 << 20, 4 * count):
        flat = rng.choice(total, size=count, replace=False)
        return np.stack(np.unravel_index(flat, dims), axis=1).astype(np.int64)
    seen = set()
    out = []
    while len(out) < count:
        cand = tuple(int(rng.integers(n)) for n in dims)
        if cand not in seen:
            seen.add(cand)
            out.append(cand)
    return np.asarray(out, dtype=np.int64)


def init_state(oracle, ranks, seed=0, n_validation=256, meter=None):
    """Random initial index sets plus a held-out validation sample."""
    shape = oracle.shape
    D = len(shape)
    full = feasible_ranks(shape, ranks)
    ss = np.random.SeedSequence(seed)
    rng_idx, rng_val = [np.random.default_rng(s) for s in ss.spawn(2)]
    right = [_random_distinct(rng_idx, shape[d + 1:], full[d + 1]) for d in range(D)]
    left = [_random_distinct(rng_idx, shape[:d], full[d]) for d in range(D)]
    val_index = np.stack([rng_val.integers(0, n, size=n_validation) for n in shape], axis=1).astype(np.int64)
    val_values = oracle.entries(val_index) if n_validation else np.empty(0)
    if meter is not None:
        meter.acquire(val_values.size)
    _check_finite(val_values, val_index)
    return CrossState(shape=shape, ranks=list(full), left=left, right=right,
                      target_ranks=full, val_index=val_index, val_values=val_values)


def _check_finite(values, idx):
    bad = ~np.isfinite(values)
    if bad.any():
        k = int(np.nonzero(bad)[0][0])
        index = tuple(int(i) for i in idx[k])
        raise DataError(f"oracle returned {values[k]} at index {index}", index)


def _gather(oracle, state, d, batch_size, meter):
    E = oracle.fibers(state.left[d], d, state.right[d], batch_size=batch_size, meter=meter)
    if not np.all(np.isfinite(E)):
        _check_finite(E.ravel(), fiber_indices(state.shape, state.left[d], d, state.right[d]))
    return E


def _column_basis(M, rtol=RANK_RTOL):
    """Orthonormal basis of the numerical column space and the columns it spans."""
    Q, R, P = scipy.linalg.qr(M, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    if diag.size == 0 or diag[0] == 0.0:
        k = 0
    else:
        k = int(np.sum(diag > rtol * diag[0]))
    k = max(k, 1)
    return Q[:, :k], np.sort(P[:k])


def _reduce(state, bond, k, where):
    msg = f"bond {bond} rank reduced from {state.ranks[bond]} to {k} during {where} sweep"
    state.events.append(msg)
    warnings.warn(msg, TTCAWarning, stacklevel=3)
    state.ranks[bond] = k


def select_indices(oracle, state, batch_size=None, meter=None, rank_rtol=RANK_RTOL):
    """One forward and one backward maxvol sweep; returns the updated state."""
    st = state.copy()
    D = len(st.shape)
    for d in range(D - 1):
        E = _gather(oracle, st, d, batch_size, meter)
        ra, n, rb = E.shape
        M = E.reshape(ra * n, rb)
        Q, _ = _column_basis(M, rank_rtol)
        if Q.shape[1] == rb:
            rows = maxvol(Q).rows
        else:
            # The right sets of this bond have not been chosen by maxvol yet
            # (they are random on the first sweep), so a deficient block says
            # little about the true rank.  Keep the rank and take distinct
            # rows in pivoted-QR order; only the backward sweep reduces.
            rows = np.sort(scipy.linalg.qr(M.T, mode="r", pivoting=True)[1][:rb])
        st.left[d + 1] = np.concatenate([st.left[d][rows // n], (rows % n)[:, None]], axis=1)
        if meter is not None:
            meter.release(E.size)
    for d in range(D - 1, 0, -1):
        E = _gather(oracle, st, d, batch_size, meter)
        ra, n, rb = E.shape
        Q, keep = _column_basis(E.reshape(ra, n * rb).T, rank_rtol)
        if Q.shape[1] < ra:
            st.left[d] = st.left[d][keep]
            _reduce(st, d, Q.shape[1], "backward")
        cols = maxvol(Q).rows
        st.right[d - 1] = np.concatenate([(cols // rb)[:, None], st.right[d][cols % rb]], axis=1)
        if meter is not None:
            meter.release(E.size)
    st.sweeps += 1
    return st


def row_membership(left_d, n, left_next):
    """Row of the ``(len(left_d) * n)`` unfolding holding each entry of ``left_next``.

    Missing rows (index sets that are not nested) map to -1.
    """
    lookup = {tuple(p): a for a, p in enumerate(left_d.tolist())}
    rows = np.empty(left_next.shape[0], dtype=np.int64)
    for m, row in enumerate(left_next.tolist()):
        a = lookup.get(tuple(row[:-1]))
        rows[m] = -1 if a is None else a * n + row[-1]
    return rows


def pivot_block(oracle, state, d, E):
    """``E~_d = X[L_{d+1}, R_d]`` taken from rows of ``E_d`` where possible."""
    ra, n, rb = E.shape
    M = E.reshape(ra * n, rb)
    rows = row_membership(state.left[d], n, state.left[d + 1])
    if np.all(rows >= 0):
        return M[rows], rows
    left = state.left[d + 1]
    Et = oracle.fibers(left[:, :-1], d, state.right[d])  # only reached for non-nested sets
    Et = Et[np.arange(left.shape[0]), left[:, -1], :]
    return Et, rows


def solve_right(M, Et, dim, regularize=False, max_cond=MAX_COND):
    """``M @ inv(Et)``, guarded by a condition-number check."""
    if not Et.any():
        if not M.any():
            return np.zeros_like(M)
        raise IllConditionedError(f"pivot block of dimension {dim} is zero", dim=dim, cond=math.inf)
    cond = np.linalg.cond(Et)
    if not np.isfinite(cond) or cond > max_cond:
        if not regularize:
            raise IllConditionedError(f"pivot block of dimension {dim} has condition number {cond:.3g}",
                                      dim=dim, cond=cond)
        lam = RIDGE * np.linalg.norm(Et, 2) ** 2
        G = Et @ Et.T + lam * np.eye(Et.shape[0])
        return np.linalg.solve(G, (M @ Et.T).T).T
    return np.linalg.solve(Et.T, M.T).T


def interpolation_core(M, Et, rows, dim, regularize=False, max_cond=MAX_COND):
    """``M @ inv(Et)`` evaluated as ``Q @ inv(Q[rows])`` with ``M = Q R``.

    The two are equal whenever ``M`` has full column rank and ``Et`` is the
    row subset ``M[rows]``; the orthonormal form stays accurate when ``Et``
    itself is badly scaled.  Other cases fall back to :func:`solve_right`.
    """
    if not M.any():
        return np.zeros_like(M)
    if rows is not None and np.all(rows >= 0):
        Q, R = np.linalg.qr(M)
        rd = np.abs(np.diag(R))
        if rd.min() > 1e-14 * rd.max():
            Qt = Q[rows]
            cond = np.linalg.cond(Qt)
            if np.isfinite(cond) and cond <= max_cond:
                return np.linalg.solve(Qt.T, Q.T).T
    return solve_right(M, Et, dim, regularize, max_cond)


def cross_interpolate(oracle, state, batch_size=None, meter=None, regularize=False):
    """Build the interpolating TT from the index sets in ``state``."""
    D = len(state.shape)
    cores = []
    for d in range(D):
        E = _gather(oracle, state, d, batch_size, meter)
        ra, n, rb = E.shape
        if d == D - 1:
            cores.append(E.copy())
        else:
            Et, rows = pivot_block(oracle, state, d, E)
            core = interpolation_core(E.reshape(ra * n, rb), Et, rows, d, regularize)
            cores.append(core.reshape(ra, n, rb))
        if meter is not None:
            meter.release(E.size)
    return TTTensor(cores)


def validation_error(tt, state):
    """Max-abs error on the validation sample, relative to max |value|."""
    if state.val_index is None or state.val_index.shape[0] == 0:
        return math.nan
    approx = tt_eval_batch(tt, state.val_index)
    err = float(np.max(np.abs(approx - state.val_values)))
    scale = float(np.max(np.abs(state.val_values)))
    return err / scale if scale > 0 else err


def cross_approximate(oracle, ranks, max_sweeps=10, val_tolerance=1e-8, seed=0,
                      index_batch_size=None, n_validation=256, max_samples=None,
                      meter=None, regularize=False, cache=True):
    """Alternate index selection and interpolation until the validation error settles.

    Stops when the validation error drops below ``val_tolerance`` or changes
    by less than ``val_tolerance`` between sweeps.  With ``max_samples`` set,
    a sweep that would overrun the budget is not started and the report is
    flagged.  With ``cache`` each distinct entry is drawn from ``oracle`` once
    and ``report.samples`` counts distinct entries.
    """
    meter = meter if meter is not None else ResidencyMeter()
    source = oracle
    if cache:
        oracle = CachedOracle(source, meter)
    start = source.samples
    if max_samples is not None and n_validation > max_samples:
        raise BudgetExceededError(f"validation set of {n_validation} exceeds the budget of {max_samples}")
    state = init_state(oracle, ranks, seed, n_validation, meter)
    tt = None
    converged = budget_hit = False
    for k in range(max_sweeps):
        if max_samples is not None and source.samples - start + state.sweep_cost() > max_samples:
            if tt is None:
                raise BudgetExceededError(
                    f"one sweep needs up to {state.sweep_cost()} samples, budget is {max_samples}")
            budget_hit = True
            break
        state = select_indices(oracle, state, index_batch_size, meter)
        tt = cross_interpolate(oracle, state, index_batch_size, meter, regularize)
        err = validation_error(tt, state)
        prev = state.val_error
        state.val_error = err
        state.history.append(err)
        if err <= val_tolerance or (k > 0 and abs(err - prev) < val_tolerance):
            converged = True
            break
    report = CrossReport(samples=source.samples - start, sweeps=state.sweeps, val_error=state.val_error,
                         history=list(state.history), converged=converged, budget_exceeded=budget_hit,
                         peak_resident=meter.peak, ranks=tt.ranks, events=list(state.events),
                         state=state)
    meter.release(state.val_values.size)
    if cache:
        meter.release(len(oracle.store))
    return tt, report


def qtt_cross(oracle, qmap, ranks, **kwargs):
    """Cross-approximate ``oracle`` in its QTT virtual shape.

    Virtual indices are decoded on the fly, so no reshaped copy of the tensor
    is ever formed.  Returns the TT over ``qmap.virtual_shape`` and the report.
    """
    if not isinstance(qmap, QttMap):
        qmap = QttMap.build(oracle.shape)
    return cross_approximate(virtual_oracle(oracle, qmap), ranks, **kwargs)


def qtt_eval_batch(tt, qmap, idx):
    """Evaluate a QTT at original-shape indices."""
    return tt_eval_batch(tt, qmap.forward(idx))


def qtt_to_dense(tt, qmap, max_elements=2 ** 24):
    from .tt import tt_to_dense

    full = tt_to_dense(tt, max_elements).reshape(qmap.padded_shape)
    return full[tuple(slice(0, n) for n in qmap.shape)]
