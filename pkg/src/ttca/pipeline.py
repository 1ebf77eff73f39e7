"""Desk-scale end-to-end pipeline on synthetic volumes.

Each input volume is only reachable through an entry oracle.  A small
encoder maps the s^3 neighborhood of every voxel to ``n_dims`` channels in
(0, 1); the resulting 4-mode encoding is cross-approximated with frozen
indices, projected onto a TT feature basis and fed to a dense head that
predicts a scalar target (or three quantiles).  Gradients flow from the
head through the projection and the cross into the encoder weights.
"""
import csv
import math
import time
import warnings
from dataclasses import asdict, dataclass, fields

import numpy as np

from .core import ResidencyMeter, TensorOracle
from .diffca import (SGD, FrozenCross, ParametricOracle, RAdam, CrossPattern,
                     _initial_state, _reselect, alternate_train)
from .errors import ConfigurationError, DomainError, TTCAWarning
from .projection import fit_projection_batched, project, project_vjp

QUANTILES = (0.2, 0.5, 0.8)
SIGMA_FLOOR = 70.0
DELTA_CAP = 1000.0


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def pinball_loss(pred, target, quantiles=QUANTILES):
    """``sum_q max(q (y - y_q), (q - 1)(y - y_q))``; ``pred`` has shape (..., len(quantiles))."""
    pred = np.asarray(pred, dtype=np.float64)
    q = np.asarray(quantiles, dtype=np.float64)
    if pred.shape[-1] != q.size:
        raise ConfigurationError(f"expected {q.size} quantile predictions, got {pred.shape[-1]}")
    e = np.asarray(target, dtype=np.float64)[..., None] - pred
    out = np.sum(np.maximum(q * e, (q - 1) * e), axis=-1)
    return float(out) if out.ndim == 0 else out


def pinball_grad(pred, target, quantiles=QUANTILES):
    """Subgradient of :func:`pinball_loss` with respect to ``pred`` (0 taken at e = 0)."""
    pred = np.asarray(pred, dtype=np.float64)
    q = np.asarray(quantiles, dtype=np.float64)
    e = np.asarray(target, dtype=np.float64)[..., None] - pred
    return np.where(e > 0, -q, np.where(e < 0, 1 - q, 0.0))


def mlll(pred, sigma, true):
    """Modified Laplace log likelihood ``-sqrt(2) D / s - ln(sqrt(2) s)``.

    ``s = max(sigma, 70)`` and ``D = min(|pred - true|, 1000)``.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(~(sigma > 0)):
        raise DomainError("sigma must be positive")
    s = np.maximum(sigma, SIGMA_FLOOR)
    delta = np.minimum(np.abs(np.asarray(pred, dtype=np.float64) - np.asarray(true, dtype=np.float64)), DELTA_CAP)
    out = -math.sqrt(2) * delta / s - np.log(math.sqrt(2) * s)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

class ParamLayout:
    """Named blocks of one flat parameter vector."""

    def __init__(self, blocks):
        self.blocks = {}
        pos = 0
        for name, shape in blocks:
            n = math.prod(shape)
            self.blocks[name] = (slice(pos, pos + n), tuple(shape))
            pos += n
        self.size = pos

    def view(self, theta, name):
        sl, shape = self.blocks[name]
        return theta[sl].reshape(shape)

    def span(self, names):
        idx = [self.blocks[n][0] for n in names]
        return slice(min(s.start for s in idx), max(s.stop for s in idx))


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

def _bump(x, center, width):
    return np.exp(-((x - center) / width) ** 2)


class SyntheticTask:
    """Volumes ``X_k = g(Z_k)`` with ``Z_k`` a sum of ``latent_rank`` separable bumps.

    The per-instance amplitudes ``a_k`` drive the target: ``y_k`` is the
    first amplitude mapped to [0, 1] (blended with a covariate when
    ``covariate`` is set).  ``g(z) = tanh(3 (z - 0.5))`` is a fixed
    invertible warp.
    """

    def __init__(self, seed=0, grid=8, n_train=24, n_val=12, latent_rank=2, covariate=False,
                 amp_range=(0.2, 1.0)):
        self.seed = seed
        self.grid = int(grid)
        self.shape = (self.grid,) * 3
        self.n_train = int(n_train)
        self.n_val = int(n_val)
        self.latent_rank = int(latent_rank)
        self.covariate = bool(covariate)
        rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
        x = np.linspace(0.0, 1.0, self.grid)
        self.factors = np.empty((self.latent_rank, 3, self.grid))
        for j in range(self.latent_rank):
            for d in range(3):
                self.factors[j, d] = _bump(x, rng.uniform(0.15, 0.85), rng.uniform(0.25, 0.45))
        n = self.n_train + self.n_val
        lo, hi = amp_range
        self.lo, self.hi = lo, hi
        self.amplitudes = rng.uniform(lo, hi, size=(n, self.latent_rank))
        self.covariates = rng.uniform(0.0, 1.0, size=n)
        base = (self.amplitudes[:, 0] - lo) / (hi - lo)
        self.targets = 0.7 * base + 0.3 * self.covariates if self.covariate else base

    @staticmethod
    def warp(z):
        return np.tanh(3.0 * (z - 0.5))

    def latent(self, k, idx):
        f = self.factors
        vals = np.ones((idx.shape[0], self.latent_rank))
        for d in range(3):
            vals *= f[:, d, :][:, idx[:, d]].T
        return vals @ self.amplitudes[k] / self.latent_rank

    def input_oracle(self, k):
        return TensorOracle(self.shape, lambda idx: self.warp(self.latent(k, idx)), name=f"x{k}")

    @property
    def train_ids(self):
        return list(range(self.n_train))

    @property
    def val_ids(self):
        return list(range(self.n_train, self.n_train + self.n_val))


# ---------------------------------------------------------------------------
# encoder and head
# ---------------------------------------------------------------------------

def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class NeighborhoodEncoder:
    """Two-layer map from an s^3 voxel neighborhood to ``n_dims`` sigmoid outputs.

    Neighborhoods are clamped at the volume boundary.
    """

    def __init__(self, layout, s=3, hidden=8, n_dims=2):
        if s < 1 or s % 2 == 0:
            raise ConfigurationError(f"neighborhood size s must be odd and >= 1, got {s}")
        self.layout = layout
        self.s = s
        self.hidden = hidden
        self.n_dims = n_dims
        h = s // 2
        r = np.arange(-h, h + 1)
        self.offsets = np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1).reshape(-1, 3)

    @staticmethod
    def blocks(s, hidden, n_dims):
        return [("W1", (hidden, s ** 3)), ("b1", (hidden,)), ("W2", (n_dims, hidden)), ("b2", (n_dims,))]

    def init(self, theta, rng):
        L = self.layout
        L.view(theta, "W1")[...] = rng.standard_normal(L.blocks["W1"][1]) / math.sqrt(self.s ** 3)
        L.view(theta, "b1")[...] = 0.1 * rng.standard_normal(self.hidden)
        L.view(theta, "W2")[...] = rng.standard_normal(L.blocks["W2"][1]) / math.sqrt(self.hidden)
        L.view(theta, "b2")[...] = 0.0

    def gather(self, x_oracle, voxels, meter=None):
        hi = np.asarray(x_oracle.shape) - 1
        nb = np.clip(voxels[:, None, :] + self.offsets[None], 0, hi).reshape(-1, 3)
        if meter is not None:
            meter.acquire(nb.shape[0])
        X = x_oracle.entries(nb).reshape(voxels.shape[0], -1)
        return X

    def forward(self, theta, X):
        L = self.layout
        Z1 = X @ L.view(theta, "W1").T + L.view(theta, "b1")
        H = np.maximum(Z1, 0.0)
        O = _sigmoid(H @ L.view(theta, "W2").T + L.view(theta, "b2"))
        return H, O

    def backward(self, theta, X, H, O, cot):
        L = self.layout
        grad = np.zeros_like(theta)
        dZ2 = cot * O * (1.0 - O)
        L.view(grad, "W2")[...] = dZ2.T @ H
        L.view(grad, "b2")[...] = dZ2.sum(axis=0)
        dZ1 = (dZ2 @ L.view(theta, "W2")) * (H > 0)
        L.view(grad, "W1")[...] = dZ1.T @ X
        L.view(grad, "b1")[...] = dZ1.sum(axis=0)
        return grad


class EncodedVolume(ParametricOracle):
    """Encoding ``E[i, j, k, c]`` of one input volume as a parametric oracle.

    ``samples`` counts input-volume reads (s^3 per distinct voxel per call).
    """

    def __init__(self, encoder, x_oracle, meter=None):
        self.encoder = encoder
        self.x = x_oracle
        self.meter = meter
        self.shape = tuple(x_oracle.shape) + (encoder.n_dims,)

    @property
    def samples(self):
        return self.x.samples

    def _prepare(self, theta, idx):
        idx = np.asarray(idx, dtype=np.int64)
        voxels, inverse = np.unique(idx[:, :3], axis=0, return_inverse=True)
        X = self.encoder.gather(self.x, voxels, self.meter)
        H, O = self.encoder.forward(theta, X)
        return idx, inverse.reshape(-1), X, H, O

    def values(self, theta, idx):
        idx, inverse, X, H, O = self._prepare(theta, idx)
        out = O[inverse, idx[:, 3]]
        if self.meter is not None:
            self.meter.release(X.size)
        return out

    def vjp(self, theta, idx, cotangent):
        idx, inverse, X, H, O = self._prepare(theta, idx)
        cot = np.zeros_like(O)
        np.add.at(cot, (inverse, idx[:, 3]), cotangent)
        grad = self.encoder.backward(theta, X, H, O, cot)
        if self.meter is not None:
            self.meter.release(X.size)
        return grad


class DenseHead:
    """``W2 tanh(W1 f + c1) + c2`` with 1 output or 3 sorted quantile outputs."""

    def __init__(self, layout, n_in, hidden=16, kind="regression"):
        if kind not in ("regression", "quantile"):
            raise ConfigurationError(f"head must be 'regression' or 'quantile', got {kind!r}")
        self.layout = layout
        self.n_in = n_in
        self.hidden = hidden
        self.kind = kind
        self.n_out = 1 if kind == "regression" else len(QUANTILES)

    @staticmethod
    def blocks(n_in, hidden, kind):
        n_out = 1 if kind == "regression" else len(QUANTILES)
        return [("H1", (hidden, n_in)), ("c1", (hidden,)), ("H2", (n_out, hidden)), ("c2", (n_out,))]

    def init(self, theta, rng):
        L = self.layout
        L.view(theta, "H1")[...] = rng.standard_normal(L.blocks["H1"][1]) / math.sqrt(self.n_in)
        L.view(theta, "c1")[...] = 0.0
        L.view(theta, "H2")[...] = rng.standard_normal(L.blocks["H2"][1]) / math.sqrt(self.hidden)
        L.view(theta, "c2")[...] = 0.0

    def forward(self, theta, F):
        L = self.layout
        A = np.tanh(F @ L.view(theta, "H1").T + L.view(theta, "c1"))
        raw = A @ L.view(theta, "H2").T + L.view(theta, "c2")
        if self.kind == "quantile":
            order = np.argsort(raw, axis=1, kind="stable")
            return np.take_along_axis(raw, order, axis=1), (F, A, order)
        return raw, (F, A, None)

    def backward(self, theta, cache, dout):
        F, A, order = cache
        L = self.layout
        if order is not None:
            draw = np.zeros_like(dout)
            np.put_along_axis(draw, order, dout, axis=1)
            dout = draw
        grad = np.zeros_like(theta)
        L.view(grad, "H2")[...] = dout.T @ A
        L.view(grad, "c2")[...] = dout.sum(axis=0)
        dZ = (dout @ L.view(theta, "H2")) * (1.0 - A * A)
        L.view(grad, "H1")[...] = dZ.T @ F
        L.view(grad, "c1")[...] = dZ.sum(axis=0)
        dF = dZ @ L.view(theta, "H1")
        return grad, dF


# ---------------------------------------------------------------------------
# experiment
# ---------------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    seed: int = 0
    grid: int = 8
    n_train: int = 24
    n_val: int = 12
    latent_rank: int = 2
    covariate: bool = False
    rank: int = 3
    features: int = 3
    n_dims: int = 2
    s: int = 3
    hidden: int = 4
    head_hidden: int = 8
    head: str = "regression"
    epochs: int = 40
    inner_steps: int = 5
    batch: int = 8
    lr: float = 1e-2
    optimizer: str = "radam"
    fvc_scale: float = 4000.0
    head_only_diagnostic: bool = False

    def validate(self):
        if self.features > self.batch:
            raise ConfigurationError(f"batch K={self.batch} must be >= feature rank r={self.features}")
        if self.features > self.n_train:
            raise ConfigurationError("need at least as many training instances as features")
        if self.head not in ("regression", "quantile"):
            raise ConfigurationError(f"unknown head {self.head!r}")
        if self.optimizer not in ("radam", "sgd"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")
        if self.epochs < 0 or self.inner_steps < 0:
            raise ConfigurationError("epochs and inner_steps must be non-negative")
        return self


class ConfigParseError(ConfigurationError):
    def __init__(self, message, line):
        super().__init__(f"line {line}: {message}")
        self.line = line


def _coerce(kind, text):
    if kind is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    return kind(text)


def parse_config(text):
    """Parse ``key = value`` lines (``#`` starts a comment) into an :class:`ExperimentConfig`."""
    types = {f.name: type(f.default) for f in fields(ExperimentConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigParseError(f"expected 'key = value', got {raw.strip()!r}", lineno)
        key, val = (p.strip() for p in line.split("=", 1))
        if key not in types:
            raise ConfigParseError(f"unknown key {key!r}", lineno)
        try:
            values[key] = _coerce(types[key], val)
        except ValueError as exc:
            raise ConfigParseError(f"bad value for {key}: {exc}", lineno) from None
    try:
        return ExperimentConfig(**values).validate()
    except ConfigurationError as exc:
        raise ConfigParseError(str(exc), 0) from None


def format_config(cfg):
    return "".join(f"{k} = {v}\n" for k, v in asdict(cfg).items())


class Model:
    """Encoder plus head sharing one flat parameter vector."""

    def __init__(self, cfg):
        n_in = cfg.features + (1 if cfg.covariate else 0)
        self.enc_names = [b[0] for b in NeighborhoodEncoder.blocks(cfg.s, cfg.hidden, cfg.n_dims)]
        self.head_names = [b[0] for b in DenseHead.blocks(n_in, cfg.head_hidden, cfg.head)]
        self.layout = ParamLayout(NeighborhoodEncoder.blocks(cfg.s, cfg.hidden, cfg.n_dims)
                                  + DenseHead.blocks(n_in, cfg.head_hidden, cfg.head))
        self.encoder = NeighborhoodEncoder(self.layout, cfg.s, cfg.hidden, cfg.n_dims)
        self.head = DenseHead(self.layout, n_in, cfg.head_hidden, cfg.head)

    def init(self, seed):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
        theta = np.zeros(self.layout.size)
        self.encoder.init(theta, rng)
        self.head.init(theta, rng)
        return theta


@dataclass(frozen=True)
class FeatureMap:
    """Projection basis and the standardization applied to its raw features."""

    basis: object
    mean: np.ndarray
    scale: np.ndarray


class _Objective:
    """Batch loss on frozen crosses with the feature basis held constant."""

    def __init__(self, exp, cov, targets, train_encoder=True):
        self.exp = exp
        self.cov = cov
        self.targets = targets
        self.train_encoder = train_encoder
        self.basis = None

    def refresh(self, theta, tts):
        self.basis = self.exp.fit_basis(tts)

    def __call__(self, theta, tts):
        exp = self.exp
        F = exp.features(self.basis, tts, self.cov)
        pred, cache = exp.model.head.forward(theta, F)
        loss, dpred = exp.loss(pred, self.targets)
        grad, dF = exp.model.head.backward(theta, cache, dpred)
        if not self.train_encoder:
            return loss, [None] * len(tts), grad
        dF = dF[:, :exp.cfg.features] / self.basis.scale
        adjoints = [project_vjp(self.basis.basis, t, dF[k]) for k, t in enumerate(tts)]
        return loss, adjoints, grad


class Experiment:
    def __init__(self, task, cfg):
        self.task = task
        self.cfg = cfg.validate()
        self.model = Model(cfg)
        self.meter = ResidencyMeter()
        self.train = [EncodedVolume(self.model.encoder, task.input_oracle(k), self.meter) for k in task.train_ids]
        self.val = [EncodedVolume(self.model.encoder, task.input_oracle(k), self.meter) for k in task.val_ids]
        self.y_train = task.targets[task.train_ids]
        self.y_val = task.targets[task.val_ids]
        self.c_train = task.covariates[task.train_ids] if task.covariate else None
        self.c_val = task.covariates[task.val_ids] if task.covariate else None

    # -- building blocks ----------------------------------------------------
    def fit_basis(self, tts):
        """Feature map fitted on training crosses: TT basis plus per-feature standardization."""
        K = self.cfg.batch
        batches = [tts[i:i + K] for i in range(0, len(tts), K)]
        if len(batches) > 1 and len(batches[-1]) < self.cfg.features:
            batches[-2] = batches[-2] + batches[-1]
            batches.pop()
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", TTCAWarning)
            basis, raw = fit_projection_batched(batches, self.cfg.features)
        mean = raw.mean(axis=0)
        scale = raw.std(axis=0)
        scale = np.where(scale > 1e-12 * max(float(np.abs(raw).max()), 1e-300), scale, 1.0)
        return FeatureMap(basis, mean, scale)

    def features(self, fmap, tts, cov):
        F = (np.stack([project(fmap.basis, t) for t in tts]) - fmap.mean) / fmap.scale
        if cov is not None:
            F = np.concatenate([F, cov[:, None]], axis=1)
        return F

    def loss(self, pred, y):
        n = y.shape[0]
        if self.cfg.head == "regression":
            r = pred[:, 0] - y
            dpred = np.zeros_like(pred)
            dpred[:, 0] = 2.0 * r / n
            return float(np.mean(r * r)), dpred
        return float(np.mean(pinball_loss(pred, y))), pinball_grad(pred, y) / n

    def crosses(self, theta, fams, offset):
        out = []
        for k, fam in enumerate(fams):
            state = _initial_state(fam.at(theta), self.cfg.rank, self.cfg.seed + offset + k)
            pattern = CrossPattern(state)
            out.append(FrozenCross(pattern, fam.values(theta, pattern.indices)).tt)
        return out

    def metrics(self, theta, basis, tts, y, cov):
        pred, _ = self.model.head.forward(theta, self.features(basis, tts, cov))
        loss, _ = self.loss(pred, y)
        point = pred[:, 0] if self.cfg.head == "regression" else pred[:, 1]
        out = {"loss": loss, "rmse": float(np.sqrt(np.mean((point - y) ** 2)))}
        if self.cfg.head == "quantile":
            scale = self.cfg.fvc_scale
            sigma = np.maximum((pred[:, 2] - pred[:, 0]) * scale, 1e-12)
            out["mlll"] = float(np.mean(mlll(point * scale, sigma, y * scale)))
        return out

    def evaluate(self, theta):
        """Train/validation metrics at ``theta`` with freshly selected indices."""
        tr = self.crosses(theta, self.train, 0)
        va = self.crosses(theta, self.val, len(self.train))
        basis = self.fit_basis(tr)
        return {"train": self.metrics(theta, basis, tr, self.y_train, self.c_train),
                "val": self.metrics(theta, basis, va, self.y_val, self.c_val)}

    def optimizer(self, mask=None):
        base = RAdam(lr=self.cfg.lr) if self.cfg.optimizer == "radam" else SGD(lr=self.cfg.lr)
        return base if mask is None else _Masked(base, mask)

    # -- training -----------------------------------------------------------
    def fit(self, theta0, train_encoder=True):
        cfg = self.cfg
        objective = _Objective(self, self.c_train, self.y_train, train_encoder)
        val_states = [None] * len(self.val)
        curve = []

        def on_select(theta, tts):
            objective.refresh(theta, tts)
            vt = []
            for k, fam in enumerate(self.val):
                oracle = fam.at(theta)
                if val_states[k] is None:
                    val_states[k] = _initial_state(oracle, cfg.rank, cfg.seed + len(self.train) + k)
                else:
                    val_states[k] = _reselect(oracle, val_states[k])
                p = CrossPattern(val_states[k])
                vt.append(FrozenCross(p, fam.values(theta, p.indices)).tt)
            curve.append(self.metrics(theta, objective.basis, vt, self.y_val, self.c_val)["loss"])

        mask = None
        if not train_encoder:
            mask = np.zeros(self.model.layout.size, dtype=bool)
            mask[self.model.layout.span(self.model.head_names)] = True
        result = alternate_train(self.train, objective, theta0, cfg.epochs, cfg.inner_steps,
                                 ranks=cfg.rank, seed=cfg.seed, optimizer=self.optimizer(mask),
                                 on_select=on_select, meter=self.meter)
        return result, curve


class _Masked:
    """Optimizer wrapper that updates only the parameters selected by ``mask``."""

    def __init__(self, inner, mask):
        self.inner = inner
        self.mask = mask

    def step(self, theta, grad):
        new = self.inner.step(theta, np.where(self.mask, grad, 0.0))
        return np.where(self.mask, new, theta)


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    baseline: dict
    final: dict
    trace: list            # (step, epoch, loss, samples_cumulative)
    val_curve: list        # validation loss at the start of each epoch
    samples: int
    peak_resident: int
    index_converged_epoch: int
    diagnostic: dict = None
    runtime: float = 0.0

    @property
    def loss_ratio(self):
        b = self.baseline["train"]["loss"]
        return self.final["train"]["loss"] / b if b > 0 else math.nan

    def summary_lines(self):
        c = self.config
        lines = [f"seed={c.seed}", f"head={c.head}", f"epochs={c.epochs}", f"inner_steps={c.inner_steps}",
                 f"rank={c.rank}", f"features={c.features}", f"n_dims={c.n_dims}",
                 f"baseline_train_loss={self.baseline['train']['loss']!r}",
                 f"baseline_val_rmse={self.baseline['val']['rmse']!r}",
                 f"final_train_loss={self.final['train']['loss']!r}",
                 f"final_val_rmse={self.final['val']['rmse']!r}",
                 f"loss_ratio={self.loss_ratio!r}"]
        if "mlll" in self.final["val"]:
            lines += [f"baseline_val_mlll={self.baseline['val']['mlll']!r}",
                      f"final_val_mlll={self.final['val']['mlll']!r}"]
        if self.diagnostic is not None:
            lines.append(f"head_only_val_rmse={self.diagnostic['val']['rmse']!r}")
        lines += [f"samples={self.samples}", f"peak_resident={self.peak_resident}",
                  f"index_converged_epoch={self.index_converged_epoch}"]
        return lines

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "epoch", "loss", "samples_cumulative"])
            for step, epoch, loss, samples in self.trace:
                w.writerow([step, epoch, repr(float(loss)), samples])

    def write_curves_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "val_loss"])
            for e, v in enumerate(self.val_curve):
                w.writerow([e, repr(float(v))])


def run_experiment(task, config):
    """Train on ``task`` and report baseline (untrained) and final metrics.

    The baseline uses the initial parameters, so a zero-epoch run reports
    final metrics identical to the baseline.
    """
    t0 = time.perf_counter()
    cfg = config.validate()
    exp = Experiment(task, cfg)
    theta0 = exp.model.init(cfg.seed)
    baseline = exp.evaluate(theta0)
    if cfg.epochs == 0:
        return ExperimentReport(cfg, baseline, baseline, [], [], _samples(exp),
                                exp.meter.peak, -1, runtime=time.perf_counter() - t0)
    result, curve = exp.fit(theta0)
    final = exp.evaluate(result.theta)
    diagnostic = None
    if cfg.head_only_diagnostic:
        head_result, _ = exp.fit(theta0, train_encoder=False)
        diagnostic = exp.evaluate(head_result.theta)
    return ExperimentReport(cfg, baseline, final, result.trace, curve, _samples(exp), exp.meter.peak,
                            result.index_converged_epoch, diagnostic, runtime=time.perf_counter() - t0)


def _samples(exp):
    return sum(f.samples for f in exp.train + exp.val)
