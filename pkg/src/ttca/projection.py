"""Principal-component features of a collection of TT instances, computed in TT format.

The K instances are stacked along a new leading mode.  Right-orthogonalizing
every trailing core pushes all information about the instances into the
K x j leading matrix U_hat, whose SVD gives the features (``U @ diag(s)``,
first ``r`` columns) and, combined with the trailing cores, an orthonormal
basis of ``r`` TT vectors.  The result depends only on the tensors the
instances represent, not on their particular cores.
"""
import csv
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, StructureError, TTCAWarning
from .formats import cpfb_bytes, read_cpfb
from .tt import ORTH_RIGHT, TTTensor, svd, tt_inner_vjp, tt_orthogonalize, tt_stack

SIGN_TAG = "svd-maxabs-left-positive"
RANK_RTOL = 1e-12


@dataclass(frozen=True)
class FeatureBasis:
    """``rank`` orthonormal TT vectors sharing the trailing cores.

    ``cores[0]`` has shape ``(rank, I_1, r_2)``: slice ``j`` of it together
    with ``cores[1:]`` is basis vector ``j``.  ``basis_rank`` is the rank of
    the stacked leading matrix before truncation (fewer than ``rank`` means
    the trailing basis vectors are zero padding).
    """

    cores: tuple
    rank: int
    basis_rank: int
    singular_values: np.ndarray
    sign_convention: str = SIGN_TAG

    @property
    def shape(self):
        return tuple(c.shape[1] for c in self.cores)

    def vector(self, j):
        first = self.cores[0][j:j + 1]
        return TTTensor((first,) + tuple(self.cores[1:]))

    def as_tt(self):
        """Basis as one TT with a leading mode of size ``rank`` indexing the vectors."""
        lead = np.eye(self.rank).reshape(1, self.rank, self.rank)
        return TTTensor((lead,) + tuple(self.cores))

    @classmethod
    def from_tt(cls, tt, rank, singular_values, sign_convention=SIGN_TAG):
        lead = tt.cores[0].reshape(rank, rank)
        first = np.einsum("jk,kib->jib", lead, tt.cores[1])
        values = np.asarray(singular_values, dtype=np.float64)
        return cls(cores=(first,) + tuple(tt.cores[2:]), rank=rank,
                   basis_rank=int(np.count_nonzero(values)), singular_values=values,
                   sign_convention=sign_convention)


def _check_instances(instances):
    instances = list(instances)
    if not instances:
        raise ConfigurationError("need at least one instance")
    shape = instances[0].shape
    for t in instances[1:]:
        if t.shape != shape:
            raise StructureError(f"instance mode sizes differ: {shape} vs {t.shape}")
    return instances


def fit_projection(instances, r):
    """Fit a rank-``r`` feature basis; return ``(basis, features)`` with features K x r."""
    instances = _check_instances(instances)
    K = len(instances)
    r = int(r)
    if r < 1:
        raise ConfigurationError(f"feature rank must be >= 1, got {r}")
    if K < r:
        raise ConfigurationError(f"need at least r={r} instances, got K={K}")
    stacked = tt_orthogonalize(tt_stack(instances), ORTH_RIGHT)
    U_hat = stacked.cores[0].reshape(K, -1)
    trailing = stacked.cores[1:]
    U, s, Vt = svd(U_hat)
    keep = min(r, s.size)
    if s.size and s[0] > 0:
        keep = min(keep, int(np.sum(s > RANK_RTOL * s[0])))
    else:
        keep = 0
    if keep < r:
        warnings.warn(f"stacked instances have numerical rank {keep} < r={r}; "
                      f"padding features with zero columns", TTCAWarning, stacklevel=2)
    features = np.zeros((K, r))
    features[:, :keep] = U[:, :keep] * s[:keep]
    j1 = trailing[0].shape[0]
    lead = np.zeros((r, j1))
    lead[:keep] = Vt[:keep]
    first = np.einsum("jk,kib->jib", lead, trailing[0])
    values = np.zeros(r)
    values[:keep] = s[:keep]
    basis = FeatureBasis(cores=(first,) + tuple(trailing[1:]), rank=r, basis_rank=keep,
                         singular_values=values)
    return basis, features


def _check_match(basis, instance):
    if instance.shape != basis.shape:
        raise StructureError(f"instance shape {instance.shape} does not match basis shape {basis.shape}")


def project(basis, instance):
    """Feature vector ``f[j] = <instance, basis vector j>``, all ``j`` in one contraction."""
    _check_match(basis, instance)
    env = np.ones((1, 1))
    for a, b in zip(reversed(instance.cores[1:]), reversed(basis.cores[1:])):
        env = np.einsum("aib,cid,bd->ac", a, b, env)
    return np.einsum("xia,jib,ab->j", instance.cores[0], basis.cores[0], env)


def project_many(basis, instances):
    return np.stack([project(basis, t) for t in instances]) if instances else np.zeros((0, basis.rank))


def project_vjp(basis, instance, cotangent):
    """Core adjoints of ``cotangent @ project(basis, instance)`` with respect to the instance."""
    _check_match(basis, instance)
    cot = np.asarray(cotangent, dtype=np.float64)
    first = np.einsum("j,jib->ib", cot, basis.cores[0])[None]
    weighted = TTTensor((first,) + tuple(basis.cores[1:]))
    return tt_inner_vjp(instance, weighted)


def fit_projection_batched(batches, r):
    """Streaming fit: each batch is refit together with the running basis.

    The ``r`` basis vectors of the previous step, scaled by their singular
    values, are appended to the next batch.  Features are the projections
    of every instance onto the final basis; a single batch returns exactly
    :func:`fit_projection`.
    """
    basis = None
    seen = []
    n_batches = 0
    for batch in batches:
        batch = _check_instances(batch)
        if len(batch) < r:
            raise ConfigurationError(f"each batch needs at least r={r} instances, got {len(batch)}")
        carried = []
        if basis is not None:
            for j in range(basis.basis_rank):
                v = basis.vector(j)
                carried.append(TTTensor((v.cores[0] * basis.singular_values[j],) + tuple(v.cores[1:])))
        basis, features = fit_projection(batch + carried, r)
        seen.extend(batch)
        n_batches += 1
    if basis is None:
        raise ConfigurationError("no batches given")
    if n_batches == 1:
        return basis, features
    return basis, project_many(basis, seen)


def save_basis(path, basis):
    with open(path, "wb") as fh:
        fh.write(cpfb_bytes(basis.as_tt(), basis.rank, basis.sign_convention, basis.singular_values))


def load_basis(path):
    tt, rank, tag, values = read_cpfb(path)
    return FeatureBasis.from_tt(tt, rank, values, tag)


def write_features_csv(path, features):
    features = np.asarray(features, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["instance"] + [f"f{j}" for j in range(features.shape[1])])
        for k, row in enumerate(features):
            w.writerow([k] + [repr(float(x)) for x in row])


def read_features_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return np.array([[float(x) for x in row[1:]] for row in rows[1:]], dtype=np.float64).reshape(len(rows) - 1, -1)
