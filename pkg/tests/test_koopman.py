import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import linalg

from gpkoopman.gp import fit_vfe
from gpkoopman.kernels import KernelParams, gram
from gpkoopman.koopman import (
    KoopmanModel,
    RankCollapseError,
    SnapshotSet,
    Standardizer,
    consistency_matrix,
    eigendecompose,
    fit_exact_edmd,
    fit_tcca,
    koopman_direct,
    projected_modes,
    select_lifted_noise,
)

from conftest import rotation_map, toy_data


def to_preconditioned(U_direct, L):
    """``L^T U L^-T``: Koopman matrix from the k_Z basis to the Psi basis."""
    return linalg.solve_triangular(L, (L.T @ U_direct).T, lower=True).T


def test_direct_scalar_closed_form():
    p = KernelParams([1.0], 1.3, 0.2)
    x, y, z = 0.4, 0.9, 0.1
    data = SnapshotSet(np.array([[x]]), np.array([[y]]))
    kzx = float(gram([[z]], [[x]], p)[0, 0])
    kzy = float(gram([[z]], [[y]], p)[0, 0])
    u = koopman_direct(data, [[z]], p)
    assert u[0, 0] == pytest.approx(kzx * kzy / (kzx**2 + 0.2 * 1.3), rel=1e-14)


def test_identity_dynamics_preserve_features():
    rng = np.random.default_rng(0)
    X = rng.uniform(-1, 1, (30, 2))
    p = KernelParams([0.8, 0.8], 1.0, 1e-10)
    data = SnapshotSet(X, X.copy())
    U = koopman_direct(data, X, p)
    K = gram(X, X, p)
    assert np.allclose(U.T @ K, K, atol=1e-3)
    m = fit_tcca(data, X, p)
    assert np.allclose(m.features(X) @ m.one_step_weights, X, atol=1e-3)


def test_tcca_matches_direct_after_basis_change(toy):
    data, Z, p, _ = toy
    m = fit_tcca(data, Z, p, truncation_tol=0.0)
    U = to_preconditioned(koopman_direct(data, Z, p), m.chol_zz)
    assert np.linalg.norm(m.U - U) / np.linalg.norm(U) < 1e-8


def test_eigendecompose_diagonal_and_rotation():
    lam, W, V, diag = eigendecompose(np.diag([0.5, 0.9]))
    assert np.allclose(lam, [0.9, 0.5])
    assert np.allclose(np.abs(W), np.eye(2)[:, ::-1])
    assert diag == []
    c, s = np.cos(0.3), np.sin(0.3)
    lam, W, V, _ = eigendecompose(0.95 * np.array([[c, -s], [s, c]]))
    assert np.allclose(np.abs(lam), 0.95)
    assert lam[0].imag > 0 and lam[1] == np.conj(lam[0])
    assert np.allclose(W[:, 1], np.conj(W[:, 0]))


def test_eigendecompose_reconstruction_and_order():
    rng = np.random.default_rng(1)
    for _ in range(20):
        U = rng.normal(size=(8, 8))
        lam, W, V, _ = eigendecompose(U)
        assert np.allclose((W * lam) @ V, U, atol=1e-9)
        assert np.allclose(W @ V, np.eye(8), atol=1e-8)
        mods = np.abs(lam)
        assert np.all(np.diff(mods) <= 1e-12)
        for i in np.flatnonzero(lam.imag > 0):
            assert lam[i + 1] == np.conj(lam[i])


def test_eigendecompose_tie_break_by_real_part():
    lam, _, _, _ = eigendecompose(np.diag([-0.5, 0.5, 0.2]))
    assert lam.real.tolist() == [0.5, -0.5, 0.2]


def test_ill_conditioned_eigenvectors_get_diagnostic():
    U = np.array([[1.0, 1.0], [0.0, 1.0 + 1e-13]])
    lam, W, V, diag = eigendecompose(U)
    assert diag and "ill-conditioned" in diag[0]


def test_canonical_correlations_are_sorted_correlations(toy):
    _, _, _, m = toy
    P = m.canonical_correlations
    assert np.all(P >= 0) and np.all(P <= 1 + 1e-8)
    assert np.all(np.diff(P) <= 0)


def test_model_invariants(toy):
    _, _, _, m = toy
    W, V, lam = m.right_eigvecs, m.left_eigvecs, m.eigenvalues
    assert np.linalg.norm(W @ V - np.eye(len(lam))) <= 1e-8 * np.linalg.norm(W)
    assert np.allclose(m.U @ W, W * lam, atol=1e-8)
    assert np.allclose(m.K_bc, m.K_bc.T)
    assert np.linalg.eigvalsh(m.K_bc).min() >= -1e-8 * np.abs(m.K_bc).max()
    s = np.linalg.svd(m.K_bc, compute_uv=False)
    assert np.sum(s > 1e-10 * s[0]) <= m.dim


def test_one_step_prediction_equals_sparse_gp_mean(toy):
    data, Z, p, m = toy
    gp = fit_vfe(data.X, data.Y, Z, p)
    Xs = np.random.default_rng(2).uniform(-2, 2, (10, 2))
    assert np.allclose(m.features(Xs) @ m.one_step_weights, gp.predict(Xs)[0], atol=1e-8)


def test_consistency_identity(toy):
    data, Z, p, m = toy
    gp = fit_vfe(data.X, data.Y, Z, p)
    A0 = m.readout
    for x in np.random.default_rng(3).uniform(-3, 3, (5, 2)):
        kappa = gp.predict(x[None])[1][0]
        lhs = kappa * np.eye(2) + p.noise_variance * np.eye(2)
        Xi1 = m.posterior_variance(x[None])[0] * m.K_bc
        rhs = A0.T @ (Xi1 + p.noise_variance * m.K_bc) @ A0
        assert np.allclose(lhs, rhs, rtol=1e-6, atol=1e-12)


def test_consistency_matrix_unitary_case():
    rng = np.random.default_rng(4)
    Q1 = linalg.qr(rng.normal(size=(3, 3)))[0]
    Q2 = linalg.qr(rng.normal(size=(3, 3)))[0]
    assert np.allclose(consistency_matrix(Q1, Q2), Q1.T @ Q1, atol=1e-12)
    with pytest.raises(ValueError):
        consistency_matrix(Q1, np.zeros((3, 2)))


def test_projected_modes_drop_zero_eigenvalues():
    lam = np.array([0.9, 1e-14, 0.5], dtype=complex)
    V = np.eye(3, dtype=complex)
    A = np.arange(6.0).reshape(3, 2)
    V_f, retained, diag = projected_modes(lam, V, A)
    assert retained.tolist() == [0, 2]
    assert V_f.shape == (2, 2)
    assert np.allclose(V_f, A[[0, 2]] / lam[[0, 2], None])
    assert diag
    with pytest.raises(RankCollapseError):
        projected_modes(np.zeros(2, complex), np.eye(2), np.ones((2, 1)))


def test_rank_collapse_is_reported():
    X = np.zeros((5, 1))
    p = KernelParams([1.0], 1.0, 0.1)
    with pytest.raises(RankCollapseError, match="inducing points"):
        fit_tcca(SnapshotSet(X + 1e6, X + 1e6), [[0.0]], p)


def test_edmd_matches_pseudoinverse_oracle(toy):
    data, Z, p, _ = toy
    m = fit_exact_edmd(data, Z[:8], p, truncation_tol=0.0)
    L = m.chol_zz
    Px = linalg.solve_triangular(L, gram(Z[:8], data.X, p), lower=True)
    Py = linalg.solve_triangular(L, gram(Z[:8], data.Y, p), lower=True)
    U = np.linalg.pinv(Px @ Px.T) @ Px @ Py.T
    assert np.allclose(m.U, U, rtol=1e-8, atol=1e-8 * np.abs(U).max())


def test_edmd_is_the_zero_noise_limit():
    rng = np.random.default_rng(5)
    X = rng.uniform(-2, 2, (40, 2))
    data = SnapshotSet(X, rotation_map(X))
    p = KernelParams([1.5, 1.5], 1.0, 1e-3)
    Z = X[:10]
    e = fit_exact_edmd(data, Z, p)
    t = fit_tcca(data, Z, p.replace(noise_variance=1e-14, lifted_noise_variance=1e-14))
    assert np.allclose(e.U, t.U, atol=1e-6)


def test_decoupled_noise_enters_matrix_but_not_readout(toy):
    data, Z, p, m = toy
    d = fit_tcca(data, Z, p.replace(lifted_noise_variance=0.3))
    assert not np.allclose(d.U, m.U)
    assert np.allclose(d.state_weights, m.state_weights)
    assert d.sigma_lifted == 0.3
    z = fit_tcca(data, Z, p, lifted_noise_variance=0.0)
    assert z.sigma_lifted == 0.0


def test_lifted_noise_selection_within_grid(toy):
    data, Z, p, _ = toy
    s = select_lifted_noise(data, Z, p)
    assert 1e-8 * p.noise_variance <= s <= 100 * p.noise_variance * (1 + 1e-12)


def test_json_round_trip_is_bit_exact(toy, tmp_path):
    _, _, _, m = toy
    path = tmp_path / "m.json"
    m.save(path)
    r = KoopmanModel.load(path)
    for name in ("U", "eigenvalues", "right_eigvecs", "left_eigvecs", "modes", "K_bc", "inducing",
                 "chol_zz", "gram_xx", "state_weights", "canonical_correlations", "retained"):
        assert np.array_equal(getattr(r, name), getattr(m, name)), name
    assert r.params.to_dict() == m.params.to_dict()
    doc = json.loads(path.read_text())
    assert doc["schema"] == "gpkoopman.KoopmanModel"
    r.save(tmp_path / "m2.json")
    assert (tmp_path / "m2.json").read_bytes() == path.read_bytes()


def test_standardizer_round_trip():
    rng = np.random.default_rng(6)
    X = rng.normal(3, 2, (100, 2))
    s = Standardizer.fit(X)
    Xs = s.transform(X)
    assert np.allclose(Xs.mean(0), 0, atol=1e-12) and np.allclose(Xs.std(0), 1)
    assert np.allclose(s.inverse_transform(Xs), X)
    assert Standardizer.from_dict(s.to_dict()).to_dict() == s.to_dict()


def test_snapshot_validation():
    with pytest.raises(ValueError):
        SnapshotSet(np.zeros((3, 2)), np.zeros((4, 2)))


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_permutation_invariance(seed):
    data = toy_data(seed % 1000, n=60)
    p = KernelParams([1.0, 1.2], 1.0, 0.01)
    Z = data.X[:8]
    perm = np.random.default_rng(seed).permutation(data.n)
    a = fit_tcca(data, Z, p)
    b = fit_tcca(data.permuted(perm), Z, p)
    assert np.allclose(a.U, b.U, atol=1e-8)
    assert np.allclose(a.eigenvalues, b.eigenvalues, atol=1e-8)
