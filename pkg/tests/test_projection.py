import warnings

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from ttca.errors import ConfigurationError, StructureError, TTCAWarning
from ttca.projection import (SIGN_TAG, fit_projection, fit_projection_batched, load_basis, project,
                             project_many, project_vjp, read_features_csv, save_basis,
                             write_features_csv)
from ttca.tt import TTTensor, tt_gauge, tt_inner, tt_to_dense


def well_conditioned(rng, r):
    Q1, _ = np.linalg.qr(rng.standard_normal((r, r)))
    Q2, _ = np.linalg.qr(rng.standard_normal((r, r)))
    return Q1 @ np.diag(rng.uniform(0.5, 2.0, r)) @ Q2


def random_gauge(t, rng):
    for d in range(t.ndim - 1):
        t = tt_gauge(t, d, well_conditioned(rng, t.ranks[d + 1]))
    return t


def instances(K, shape=(4, 4, 4), r=2, seed=0):
    rng = np.random.default_rng(seed)
    return [TTTensor.random(shape, r, rng) for _ in range(K)]


def rank_r_family(K, r, seed, shape=(4, 4, 4)):
    """K instances in the span of r fixed TTs."""
    rng = np.random.default_rng(seed)
    atoms = [TTTensor.random(shape, 2, rng) for _ in range(r)]
    out = []
    for _ in range(K):
        c = rng.standard_normal(r)
        cores = [np.concatenate([c[j] * a.cores[0] for j, a in enumerate(atoms)], axis=2)]
        for d in range(1, len(shape)):
            blocks = [a.cores[d] for a in atoms]
            cores.append(np.concatenate(blocks, axis=0) if d == len(shape) - 1 else _block(blocks))
        out.append(TTTensor(cores))
    return out, atoms


def _block(blocks):
    r0 = sum(b.shape[0] for b in blocks)
    r1 = sum(b.shape[2] for b in blocks)
    c = np.zeros((r0, blocks[0].shape[1], r1))
    i = j = 0
    for b in blocks:
        c[i:i + b.shape[0], :, j:j + b.shape[2]] = b
        i += b.shape[0]
        j += b.shape[2]
    return c


def basis_matrix(basis):
    return np.stack([tt_to_dense(basis.vector(j)).ravel() for j in range(basis.rank)], axis=1)


def subspace_angle(A, B):
    return float(np.max(scipy.linalg.subspace_angles(A, B)))


def test_duplicates_rank1():
    t = instances(1)[0]
    basis, F = fit_projection([t] * 5, 1)
    np.testing.assert_allclose(F, np.broadcast_to(F[0], F.shape), atol=1e-10)
    _, s, _ = np.linalg.svd(np.stack([tt_to_dense(t).ravel()] * 5))
    assert s[1] < 1e-10


def test_gauge_pair_identical_rows():
    a = instances(1, seed=3)[0]
    g = random_gauge(a, np.random.default_rng(0))
    _, F = fit_projection([a, g], 1)
    np.testing.assert_allclose(F[0], F[1], atol=1e-8)


def test_basis_orthonormal_and_matches_dense_pca():
    ts = instances(6, seed=1)
    basis, F = fit_projection(ts, 3)
    B = basis_matrix(basis)
    np.testing.assert_allclose(B.T @ B, np.eye(3), atol=1e-10)
    for i in range(3):
        for j in range(3):
            assert tt_inner(basis.vector(i), basis.vector(j)) == pytest.approx(float(i == j), abs=1e-10)
    X = np.stack([tt_to_dense(t).ravel() for t in ts])
    U, s, Vt = np.linalg.svd(X, full_matrices=False)
    assert np.sum(F ** 2) == pytest.approx(np.sum(s[:3] ** 2), rel=1e-8)
    np.testing.assert_allclose(basis.singular_values, s[:3], rtol=1e-10)
    assert subspace_angle(B, Vt[:3].T) < 1e-6
    np.testing.assert_allclose(np.abs(F), np.abs(U[:, :3] * s[:3]), atol=1e-8)


def test_trailing_cores_right_orthonormal():
    basis, _ = fit_projection(instances(6, seed=2), 3)
    for c in basis.cores[1:]:
        M = c.reshape(c.shape[0], -1)
        np.testing.assert_allclose(M @ M.T, np.eye(M.shape[0]), atol=1e-12)
    assert basis.sign_convention == SIGN_TAG


def test_energy_ordering():
    _, F = fit_projection(instances(8, seed=4), 4)
    norms = np.linalg.norm(F, axis=0)
    assert np.all(np.diff(norms) <= 1e-12)


def test_preconditions():
    with pytest.raises(ConfigurationError):
        fit_projection(instances(2), 3)
    with pytest.raises(StructureError):
        fit_projection([TTTensor.random((3, 3), 1, 0), TTTensor.random((3, 4), 1, 0)], 1)


def test_degenerate_stack_pads_with_zeros():
    t = instances(1)[0]
    with pytest.warns(TTCAWarning):
        basis, F = fit_projection([t, t, t], 2)
    assert basis.basis_rank == 1
    assert not F[:, 1].any()


def test_project_training_instance_matches_row():
    ts = instances(6, seed=5)
    basis, F = fit_projection(ts, 3)
    for k, t in enumerate(ts):
        np.testing.assert_allclose(project(basis, t), F[k], atol=1e-8)
    np.testing.assert_allclose(project_many(basis, ts), F, atol=1e-8)


def test_project_zero():
    basis, _ = fit_projection(instances(4), 2)
    assert not project(basis, TTTensor.zeros((4, 4, 4))).any()


def test_project_shape_mismatch():
    basis, _ = fit_projection(instances(4), 2)
    with pytest.raises(StructureError):
        project(basis, TTTensor.random((4, 4), 1, 0))


@settings(max_examples=20)
@given(st.integers(0, 2 ** 31))
def test_gauge_invariance_property(seed):
    rng = np.random.default_rng(seed)
    ts = [TTTensor.random((3, 4, 3), 3, rng) for _ in range(5)]
    basis, _ = fit_projection(ts, 3)
    new = TTTensor.random((3, 4, 3), 3, rng)
    np.testing.assert_allclose(project(basis, random_gauge(new, rng)), project(basis, new), atol=1e-8)
    _, F1 = fit_projection(ts, 3)
    _, F2 = fit_projection([random_gauge(t, rng) for t in ts], 3)
    np.testing.assert_allclose(F2, F1, atol=1e-8)


def test_project_vjp_finite_difference():
    rng = np.random.default_rng(9)
    basis, _ = fit_projection(instances(5, seed=9), 3)
    t = TTTensor.random((4, 4, 4), 2, rng)
    cot = rng.standard_normal(3)
    adj = project_vjp(basis, t, cot)
    h = 1e-6
    for d in range(3):
        cores = [np.array(c) for c in t.cores]
        cores[d][0, 1, 0] += h
        up = cot @ project(basis, TTTensor(cores))
        cores[d][0, 1, 0] -= 2 * h
        down = cot @ project(basis, TTTensor(cores))
        assert adj[d][0, 1, 0] == pytest.approx((up - down) / (2 * h), rel=1e-6, abs=1e-9)


def test_batched_single_batch_is_exact():
    ts = instances(6, seed=6)
    b1, F1 = fit_projection(ts, 3)
    b2, F2 = fit_projection_batched([ts], 3)
    assert np.array_equal(F1, F2)
    assert all(np.array_equal(a, b) for a, b in zip(b1.cores, b2.cores))


def test_batched_recovers_exact_family():
    family, atoms = rank_r_family(12, 3, seed=0)
    basis, F = fit_projection_batched([family[:6], family[6:]], 3)
    B = basis_matrix(basis)
    for k, t in enumerate(family):
        x = tt_to_dense(t).ravel()
        residual = x - B @ project(basis, t)
        assert np.linalg.norm(residual) < 1e-6 * np.linalg.norm(x)
        np.testing.assert_allclose(F[k], project(basis, t), atol=1e-12)


def test_batched_order_independent_subspace():
    family, _ = rank_r_family(12, 3, seed=1)
    perm = np.random.default_rng(0).permutation(12)
    shuffled = [family[i] for i in perm]
    ref, _ = fit_projection(family, 3)
    b1, _ = fit_projection_batched([family[:4], family[4:8], family[8:]], 3)
    b2, _ = fit_projection_batched([shuffled[:4], shuffled[4:8], shuffled[8:]], 3)
    assert subspace_angle(basis_matrix(b1), basis_matrix(b2)) < 1e-4
    assert subspace_angle(basis_matrix(b1), basis_matrix(ref)) < 1e-4


def test_batched_batch_size_checked():
    with pytest.raises(ConfigurationError):
        fit_projection_batched([instances(4), instances(2)], 3)


def test_basis_and_features_roundtrip(tmp_path):
    basis, F = fit_projection(instances(5, seed=8), 3)
    save_basis(tmp_path / "b.cpfb", basis)
    back = load_basis(tmp_path / "b.cpfb")
    assert back.rank == 3 and back.sign_convention == SIGN_TAG
    np.testing.assert_array_equal(back.singular_values, basis.singular_values)
    t = instances(1, seed=99)[0]
    np.testing.assert_allclose(project(back, t), project(basis, t), atol=1e-14)
    write_features_csv(tmp_path / "f.csv", F)
    assert np.array_equal(read_features_csv(tmp_path / "f.csv"), F)
