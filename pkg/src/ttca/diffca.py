"""Reverse-mode differentiation through cross-interpolation with frozen indices.

With the index sets fixed, every core ``Q_d = E_d @ inv(E~_d)`` is a smooth
function of the sampled entries, so gradients of a loss on the cores can be
pulled back to the entries and from there into the parameters of whatever
produces them.  Index selection itself is not differentiated;
:func:`alternate_train` refreshes it between blocks of gradient steps.
"""
import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .core import TensorOracle, fiber_indices
from .cross import (MAX_COND, init_state, row_membership,
                    select_indices)
from .errors import (IllConditionedError, StructureError,
                     TrainingDivergedError, TTCAWarning)
from .tt import TTTensor


class CrossPattern:
    """Frozen index structure of a cross: which entries feed which matrix slot.

    ``indices`` holds the distinct sampled multi-indices in lexicographic
    order.  ``e_slots[d]`` maps the ``(r_d I_d) x r_{d+1}`` unfolding of
    ``E_d`` to positions in ``indices`` and ``pivot_slots[d]`` does the same
    for ``E~_d``.  ``pivot_rows[d]`` records which rows of ``E_d`` form
    ``E~_d`` (-1 where the sets are not nested).
    """

    def __init__(self, state):
        shape = tuple(state.shape)
        D = len(shape)
        self.shape = shape
        self.ranks = tuple(state.ranks)
        self.left = tuple(a.copy() for a in state.left)
        self.right = tuple(a.copy() for a in state.right)
        blocks, self.pivot_rows = [], []
        for d in range(D):
            blocks.append(fiber_indices(shape, self.left[d], d, self.right[d]))
        extra = []
        for d in range(D - 1):
            rows = row_membership(self.left[d], shape[d], self.left[d + 1])
            self.pivot_rows.append(rows)
            if np.any(rows < 0):
                nxt = self.left[d + 1]
                rb = self.right[d].shape[0]
                idx = np.empty((nxt.shape[0], rb, D), dtype=np.int64)
                idx[..., :d + 1] = nxt[:, None, :]
                idx[..., d + 1:] = self.right[d][None, :, :]
                extra.append((d, idx.reshape(-1, D)))
        allidx = np.concatenate(blocks + [e for _, e in extra], axis=0)
        self.indices, inverse = np.unique(allidx, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        self.e_slots, self.pivot_slots = [], []
        pos = 0
        for d, b in enumerate(blocks):
            ra, n, rb = self.ranks[d], shape[d], self.ranks[d + 1]
            self.e_slots.append(inverse[pos:pos + b.shape[0]].reshape(ra * n, rb))
            pos += b.shape[0]
        extra_slots = {}
        for d, e in extra:
            rb = self.ranks[d + 1]
            extra_slots[d] = inverse[pos:pos + e.shape[0]].reshape(rb, rb)
            pos += e.shape[0]
        for d in range(D - 1):
            if d in extra_slots:
                self.pivot_slots.append(extra_slots[d])
            else:
                self.pivot_slots.append(self.e_slots[d][self.pivot_rows[d]])
        for a in self.e_slots + self.pivot_slots:
            a.setflags(write=False)
        self.indices.setflags(write=False)

    @property
    def n_entries(self):
        return self.indices.shape[0]

    def same_indices(self, other):
        return (self.ranks == other.ranks
                and all(np.array_equal(a, b) for a, b in zip(self.left, other.left))
                and all(np.array_equal(a, b) for a, b in zip(self.right, other.right)))


def _pivot_condition(M, Et, rows):
    """Condition number used to accept a pivot block, matching the forward cross."""
    if np.all(rows >= 0):
        Q, R = np.linalg.qr(M)
        rd = np.abs(np.diag(R))
        if rd.size and rd.min() > 1e-14 * rd.max():
            return np.linalg.cond(Q[rows])
    return np.linalg.cond(Et)


class FrozenCross:
    """Cross-interpolation evaluated at one vector of sampled entry values.

    Immutable after construction.  The LU factors of every ``E~_d`` are kept
    for the backward pass.
    """

    def __init__(self, pattern, values, max_cond=MAX_COND):
        values = np.array(values, dtype=np.float64)
        if values.shape != (pattern.n_entries,):
            raise StructureError(f"expected {pattern.n_entries} entry values, got shape {values.shape}")
        values.setflags(write=False)
        self.pattern = pattern
        self.values = values
        D = len(pattern.shape)
        cores, self._lu, self._unfolded = [], [], []
        for d in range(D):
            ra, n, rb = pattern.ranks[d], pattern.shape[d], pattern.ranks[d + 1]
            M = values[pattern.e_slots[d]]
            if d == D - 1:
                cores.append(M.reshape(ra, n, rb))
                continue
            Et = values[pattern.pivot_slots[d]]
            if not M.any() and not Et.any():
                self._lu.append(None)
                Q = np.zeros_like(M)
            else:
                cond = _pivot_condition(M, Et, pattern.pivot_rows[d])
                if not np.isfinite(cond) or cond > max_cond:
                    raise IllConditionedError(
                        f"pivot block of dimension {d} has condition number {cond:.3g}", dim=d, cond=cond)
                lu = scipy.linalg.lu_factor(Et, check_finite=False)
                self._lu.append(lu)
                Q = scipy.linalg.lu_solve(lu, M.T, trans=1, check_finite=False).T
            self._unfolded.append(Q)
            cores.append(Q.reshape(ra, n, rb))
        self.tt = TTTensor(cores)

    @classmethod
    def from_state(cls, oracle, state):
        pattern = CrossPattern(state)
        return cls(pattern, oracle.entries(pattern.indices))

    def with_values(self, values):
        return FrozenCross(self.pattern, values)

    @property
    def cores(self):
        return self.tt.cores


@dataclass(frozen=True)
class SampleGradient:
    indices: np.ndarray  # (n, D) sampled multi-indices
    grad: np.ndarray     # (n,) dL/d entry

    def as_dict(self):
        return {tuple(int(i) for i in ix): float(g) for ix, g in zip(self.indices, self.grad)}


def cross_vjp(fc, core_adjoints):
    """Pull ``dL/dQ_d`` back to the sampled entries of ``fc``.

    Uses ``dL/dE_d += G E~^-T`` and ``dL/dE~_d = -Q^T G E~^-T`` with
    ``G = dL/dQ_d`` unfolded; contributions to entries that appear in several
    matrices are summed.
    """
    pat = fc.pattern
    D = len(pat.shape)
    if len(core_adjoints) != D:
        raise StructureError(f"expected {D} core adjoints, got {len(core_adjoints)}")
    grad = np.zeros(pat.n_entries)
    for d in range(D):
        G = np.asarray(core_adjoints[d], dtype=np.float64)
        if G.shape != fc.cores[d].shape:
            raise StructureError(f"adjoint {d} has shape {G.shape}, core has {fc.cores[d].shape}")
        ra, n, rb = G.shape
        G = G.reshape(ra * n, rb)
        if d == D - 1:
            np.add.at(grad, pat.e_slots[d].ravel(), G.ravel())
            continue
        lu = fc._lu[d]
        if lu is None:
            raise IllConditionedError(f"pivot block of dimension {d} is zero", dim=d, cond=math.inf)
        W = scipy.linalg.lu_solve(lu, G.T, trans=0, check_finite=False).T
        np.add.at(grad, pat.e_slots[d].ravel(), W.ravel())
        dEt = -fc._unfolded[d].T @ W
        np.add.at(grad, pat.pivot_slots[d].ravel(), dEt.ravel())
    return SampleGradient(indices=pat.indices, grad=grad)


def gradcheck(fc, objective, h=1e-6):
    """Worst relative deviation between :func:`cross_vjp` and central differences.

    ``objective(cores)`` returns ``(loss, core_adjoints)``.  Every sampled
    entry is perturbed in turn; the denominator is ``max(|a|, |fd|, 1e-8)``.
    """
    _, adj = objective(fc.cores)
    analytic = cross_vjp(fc, adj).grad
    base = fc.values
    worst = 0.0
    for k in range(base.size):
        vp = base.copy()
        vp[k] += h
        vm = base.copy()
        vm[k] -= h
        fd = (objective(fc.with_values(vp).cores)[0] - objective(fc.with_values(vm).cores)[0]) / (2 * h)
        a = analytic[k]
        worst = max(worst, abs(a - fd) / max(abs(a), abs(fd), 1e-8))
    return worst


def quadratic_core_objective(targets):
    """``0.5 * sum_d ||Q_d - T_d||^2`` and its core adjoints."""
    targets = [np.asarray(t, dtype=np.float64) for t in targets]

    def objective(cores):
        diffs = [c - t for c, t in zip(cores, targets)]
        return 0.5 * sum(float(np.sum(g * g)) for g in diffs), diffs

    return objective


def linear_core_objective(weights):
    """``sum_d <W_d, Q_d>`` and its (constant) core adjoints."""
    weights = [np.asarray(w, dtype=np.float64) for w in weights]

    def objective(cores):
        return sum(float(np.sum(w * c)) for w, c in zip(weights, cores)), weights

    return objective


def random_cross_problem(seed, shape=(4, 5, 4), max_rank=3, kind="quadratic"):
    """Seeded ``(FrozenCross, objective)`` pair built from a random exact-rank TT."""
    from .core import dense_oracle
    from .cross import cross_approximate
    from .tt import tt_to_dense

    rng = np.random.default_rng(seed)
    D = len(shape)
    inner = [int(rng.integers(1, max_rank + 1)) for _ in range(D - 1)]
    ranks = [1] + inner + [1]
    ranks = [min(ranks[d], math.prod(shape[:d]), math.prod(shape[d:])) for d in range(D + 1)]
    t = TTTensor.random(shape, ranks, rng)
    oracle = dense_oracle(tt_to_dense(t))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", TTCAWarning)
        _, report = cross_approximate(oracle, ranks, seed=seed)
    fc = FrozenCross.from_state(oracle, report.state)
    if kind == "linear":
        # weights on the last core only, which holds raw sampled entries, so the
        # loss is linear in the entries themselves and central differences are exact
        weights = [np.zeros(c.shape) for c in fc.cores]
        weights[-1] = rng.standard_normal(fc.cores[-1].shape)
        objective = linear_core_objective(weights)
    else:
        objective = quadratic_core_objective([rng.standard_normal(c.shape) for c in fc.cores])
    return fc, objective


class SGD:
    """Plain gradient step ``theta - lr * grad``."""

    def __init__(self, lr=1e-2):
        self.lr = lr

    def step(self, theta, grad):
        return theta - self.lr * grad


class RAdam:
    """Rectified Adam with the same update rule as ``torch.optim.RAdam``."""

    def __init__(self, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = None
        self.v = None

    def step(self, theta, grad):
        b1, b2 = self.beta1, self.beta2
        if self.m is None:
            self.m = np.zeros_like(theta)
            self.v = np.zeros_like(theta)
        if self.weight_decay:
            grad = grad + self.weight_decay * theta
        self.t += 1
        t = self.t
        self.m = b1 * self.m + (1 - b1) * grad
        self.v = b2 * self.v + (1 - b2) * grad * grad
        m_hat = self.m / (1 - b1 ** t)
        rho_inf = 2 / (1 - b2) - 1
        rho_t = rho_inf - 2 * t * b2 ** t / (1 - b2 ** t)
        if rho_t > 5:
            rect = math.sqrt((rho_t - 4) * (rho_t - 2) * rho_inf / ((rho_inf - 4) * (rho_inf - 2) * rho_t))
            adaptive = math.sqrt(1 - b2 ** t) / (np.sqrt(self.v) + self.eps)
            return theta - self.lr * m_hat * rect * adaptive
        return theta - self.lr * m_hat


class ParametricOracle:
    """A tensor whose entries depend smoothly on a flat parameter vector.

    Subclasses implement :meth:`values` and :meth:`vjp`; ``samples`` counts
    base-data reads made on behalf of both.
    """

    shape = ()
    samples = 0

    def values(self, theta, idx):
        raise NotImplementedError

    def vjp(self, theta, idx, cotangent):
        """Gradient of ``cotangent @ values(theta, idx)`` with respect to ``theta``."""
        raise NotImplementedError

    def at(self, theta):
        """Black-box oracle for index selection at fixed ``theta``."""
        theta = np.array(theta, dtype=np.float64)
        return TensorOracle(self.shape, lambda idx: self.values(theta, idx), name=type(self).__name__)


@dataclass
class TrainResult:
    theta: np.ndarray
    trace: list                      # rows (step, epoch, loss, samples_cumulative)
    index_converged_epoch: int = -1  # first epoch whose selection repeated the previous one
    crosses: list = field(default_factory=list)
    patterns_changed: list = field(default_factory=list)
    events: list = field(default_factory=list)

    def write_csv(self, path):
        write_trace_csv(path, self.trace)


def write_trace_csv(path, trace):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "epoch", "loss", "samples_cumulative"])
        for step, epoch, loss, samples in trace:
            w.writerow([step, epoch, repr(float(loss)), samples])


def _initial_state(oracle, ranks, seed, max_sweeps=5):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", TTCAWarning)
        state = init_state(oracle, ranks, seed=seed, n_validation=0)
        for _ in range(max_sweeps):
            new = select_indices(oracle, state)
            done = new.same_indices(state)
            state = new
            if done:
                break
    return state


def _reselect(oracle, state):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", TTCAWarning)
        return select_indices(oracle, state)


def alternate_train(families, objective, theta0, epochs, inner_steps=1, ranks=2, seed=0,
                    optimizer=None, reselect=True, on_select=None, meter=None):
    """Alternate index selection and frozen-index gradient steps.

    ``families`` is a list of :class:`ParametricOracle`, one per instance.
    ``objective(theta, tts)`` returns ``(loss, core_adjoints, theta_grad)``
    where ``core_adjoints[k]`` belongs to instance ``k`` and ``theta_grad``
    is any direct gradient with respect to ``theta`` (or None).
    ``on_select(theta, tts)`` runs after each index refresh.  With
    ``inner_steps=0`` the loss is evaluated once per epoch and ``theta`` is
    left unchanged.  ``meter`` records the sampled entries held by the
    frozen crosses of the current step.
    """
    families = list(families)
    optimizer = optimizer if optimizer is not None else RAdam()
    theta = np.array(theta0, dtype=np.float64)
    base_samples = sum(f.samples for f in families)
    states = [None] * len(families)
    patterns = [None] * len(families)
    trace, changed = [], []
    converged_epoch = -1
    step = 0
    held = 0
    crosses = []
    events = []

    def samples():
        return sum(f.samples for f in families) - base_samples

    for epoch in range(epochs):
        same = True
        for k, fam in enumerate(families):
            oracle = fam.at(theta)
            if states[k] is None:
                states[k] = _initial_state(oracle, ranks, seed + k)
                same = False
            elif reselect:
                states[k] = _reselect(oracle, states[k])
            new = CrossPattern(states[k])
            if patterns[k] is None or not new.same_indices(patterns[k]):
                same = False
                patterns[k] = new
        changed.append(not same)
        if same and converged_epoch < 0:
            converged_epoch = epoch
        held = _hold(meter, held, 0)
        crosses = [FrozenCross(p, f.values(theta, p.indices)) for p, f in zip(patterns, families)]
        held = _hold(meter, held, sum(p.n_entries for p in patterns))
        if on_select is not None:
            on_select(theta, [c.tt for c in crosses])
        for s in range(max(inner_steps, 1)):
            if s > 0:
                try:
                    fresh = [FrozenCross(p, f.values(theta, p.indices)) for p, f in zip(patterns, families)]
                except IllConditionedError as exc:
                    # the update moved theta to where these pivots are singular;
                    # the next epoch selects new indices
                    events.append(f"epoch {epoch} step {step}: {exc}; inner steps cut short")
                    break
                held = _hold(meter, held, 0)
                crosses = fresh
                held = _hold(meter, held, sum(p.n_entries for p in patterns))
            loss, adjoints, direct = objective(theta, [c.tt for c in crosses])
            if not np.isfinite(loss):
                trace.append((step, epoch, float(loss), samples()))
                raise TrainingDivergedError(f"non-finite loss {loss} at step {step}", trace)
            if inner_steps == 0:
                trace.append((step, epoch, float(loss), samples()))
                step += 1
                break
            grad = np.zeros_like(theta) if direct is None else np.array(direct, dtype=np.float64)
            for c, f, adj in zip(crosses, families, adjoints):
                if adj is None:
                    continue
                g = cross_vjp(c, adj)
                grad += f.vjp(theta, g.indices, g.grad)
            if not np.all(np.isfinite(grad)):
                trace.append((step, epoch, float(loss), samples()))
                raise TrainingDivergedError(f"non-finite gradient at step {step}", trace)
            theta = optimizer.step(theta, grad)
            trace.append((step, epoch, float(loss), samples()))
            step += 1
    _hold(meter, held, 0)
    return TrainResult(theta=theta, trace=trace, index_converged_epoch=converged_epoch,
                       crosses=list(crosses), patterns_changed=changed, events=events)


def _hold(meter, held, new):
    if meter is not None:
        meter.release(held)
        meter.acquire(new)
    return new
