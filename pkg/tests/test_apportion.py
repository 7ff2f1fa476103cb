import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.base import clone

from oracles import best_alignment
from geoapportion.apportion import (
    ApportionError, GeometricNMF, IntensityMatrix, LeastSquaresNMF, attribution_from,
    compute_attribution, fit_geometric, fit_model, ls_nmf, solve_intensities,
)
from geoapportion.synth import SynthConfig, generate


def test_pure_row_intensity():
    H = np.array([[0.5, 0.3, 0.2], [0.1, 0.1, 0.8]])
    out = solve_intensities(np.array([3 * H[1], np.zeros(3)]), H)
    np.testing.assert_allclose(out.W_tilde, [[0.0, 3.0], [0.0, 0.0]], atol=1e-12)


def test_intensity_grid_oracle():
    rng = np.random.default_rng(0)
    H = rng.dirichlet(np.ones(3), size=2)
    Y = rng.random((10, 3))
    W = solve_intensities(Y, H).W_tilde
    grid = np.linspace(0, 3, 3001)
    g1, g2 = np.meshgrid(grid, grid, indexing="ij")
    cand = np.column_stack([g1.ravel(), g2.ravel()])
    for i in range(10):
        obj = ((Y[i] - cand @ H) ** 2).sum(axis=1)
        np.testing.assert_allclose(W[i], cand[np.argmin(obj)], atol=1e-3)


def test_solve_intensities_shape_mismatch():
    with pytest.raises(ApportionError):
        solve_intensities(np.ones((2, 4)), np.ones((2, 3)) / 3)


def test_attribution_single_source_ones():
    np.testing.assert_array_equal(attribution_from([2.0], [[0.2, 0.8]]), [[1.0, 1.0]])


def test_attribution_disjoint_profiles_identity():
    np.testing.assert_allclose(attribution_from([1.0, 1.0], np.eye(2)), np.eye(2))


def test_attribution_uniform_profiles_two_to_one():
    phi = attribution_from([2.0, 1.0], [[0.5, 0.5], [0.5, 0.5]])
    np.testing.assert_allclose(phi, [[2 / 3, 2 / 3], [1 / 3, 1 / 3]])
    assert phi[0, 0] / phi[1, 0] == pytest.approx(2.0)


def test_attribution_zero_denominator():
    with pytest.raises(ApportionError, match=r"\[1\]"):
        attribution_from([1.0, 1.0], [[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])


@settings(max_examples=50)
@given(st.integers(1, 5), st.integers(2, 8), st.integers(0, 2**31 - 1))
def test_attribution_columns_sum_to_one(K, J, seed):
    rng = np.random.default_rng(seed)
    phi = attribution_from(rng.random(K) + 0.01, rng.dirichlet(np.ones(J), size=K))
    np.testing.assert_allclose(phi.sum(axis=0), 1.0, atol=1e-12)
    assert (phi >= 0).all()


def test_compute_attribution_uses_column_means():
    inten = IntensityMatrix(np.array([[4.0, 0.0], [0.0, 2.0]]), np.zeros(2), np.array([2.0, 1.0]))
    phi = compute_attribution(inten, np.array([[0.5, 0.5], [0.5, 0.5]])).phi
    np.testing.assert_allclose(phi[:, 0], [2 / 3, 1 / 3])


def test_geometric_recovers_truth_noise_free(separable):
    model = fit_geometric(separable.matrix, 3)
    perm = best_alignment(model.phi, separable.phi0)
    assert np.abs(model.phi[perm] - separable.phi0).max() <= 1e-6
    np.testing.assert_allclose(model.phi.sum(axis=0), 1.0, atol=1e-12)


def test_geometric_is_deterministic(separable):
    a = fit_geometric(separable.matrix, 3, seed=5)
    b = fit_geometric(separable.matrix, 3, seed=5)
    np.testing.assert_array_equal(a.phi, b.phi)
    np.testing.assert_array_equal(a.H_star, b.H_star)


def test_geometric_sources_ordered_by_mean_intensity(separable):
    mu = fit_geometric(separable.matrix, 3).intensities.column_means
    assert (np.diff(mu) <= 0).all()


def test_geometric_profiles_are_data_rows(separable):
    model = fit_geometric(separable.matrix, 3)
    rows = separable.Y[model.profiles.indices]
    np.testing.assert_allclose(rows / rows.sum(axis=1, keepdims=True), model.H_star, atol=1e-12)


def test_k1_ones_row(separable):
    for method in ("geometric", "xray", "ls-nmf"):
        phi = fit_model(separable.matrix, 1, method=method).phi
        np.testing.assert_allclose(phi, np.ones((1, separable.Y.shape[1])), atol=1e-12)


def test_k0_rejected(separable):
    with pytest.raises(ApportionError):
        fit_geometric(separable.matrix, 0)


def test_zero_residual_rows_reconstruct(separable):
    model = fit_geometric(separable.matrix, 3)
    exact = model.intensities.residual_norm < 1e-12
    assert exact.sum() > 0
    np.testing.assert_allclose(model.W_tilde[exact] @ model.H_star, separable.Y[exact], atol=1e-10)


def test_scale_invariance_of_phi(separable):
    base = fit_geometric(separable.matrix, 3)
    c = np.array([0.5, 2.0, 3.0, 1.0, 0.25, 7.0])
    scaled = fit_geometric(separable.Y * c, 3)
    perm = best_alignment(scaled.phi, base.phi)
    np.testing.assert_allclose(scaled.phi[perm], base.phi, atol=1e-6)
    assert (scaled.phi[perm].argmax(axis=0) == base.phi.argmax(axis=0)).all()


def test_xray_and_lsnmf_columns_sum_to_one(separable):
    for method in ("xray", "ls-nmf"):
        phi = fit_model(separable.matrix, 3, method=method).phi
        np.testing.assert_allclose(phi.sum(axis=0), 1.0, atol=1e-12)


def test_lsnmf_exact_factorization():
    d = generate(SynthConfig(n=400, J=6, K=3, seed=2))
    model = ls_nmf(d.matrix, 3, max_iter=3000, tol=1e-12)
    assert model.meta["relative_error"] <= 1e-4


def test_lsnmf_matches_truth_up_to_permutation(separable):
    model = ls_nmf(separable.matrix, 3, max_iter=2000, tol=1e-10)
    perm = best_alignment(model.phi, separable.phi0)
    assert np.abs(model.phi[perm] - separable.phi0).max() <= 0.05


def test_lsnmf_penalty_changes_fit(separable):
    a = ls_nmf(separable.matrix, 3, l2_penalty=0.0, seed=0).phi
    b = ls_nmf(separable.matrix, 3, l2_penalty=0.001, seed=0).phi
    # the penalized fit may differ; it must still be a valid attribution
    np.testing.assert_allclose(b.sum(axis=0), 1.0, atol=1e-12)
    assert a.shape == b.shape


def test_lsnmf_reports_nonconvergence(separable):
    model = ls_nmf(separable.matrix, 3, max_iter=2, tol=0.0)
    assert model.meta["converged"] is False and model.meta["n_iter"] == 2


def test_lsnmf_negative_penalty():
    with pytest.raises(ApportionError):
        ls_nmf(np.ones((4, 3)), 1, l2_penalty=-1.0)


def test_unknown_method():
    with pytest.raises(ValueError):
        fit_model(np.ones((4, 3)), 1, method="pmf")


def test_estimator_api(separable):
    est = GeometricNMF(n_sources=3, random_state=0)
    assert clone(est).get_params()["n_sources"] == 3
    W = est.fit_transform(separable.Y)
    assert W.shape == (separable.Y.shape[0], 3)
    np.testing.assert_allclose(est.transform(separable.Y[:50]), W[:50], atol=1e-9)
    np.testing.assert_allclose(est.inverse_transform(W[:50]), separable.Y[:50], atol=1e-8)
    np.testing.assert_allclose(est.attribution_.sum(axis=0), 1.0)


def test_estimator_rejects_negative_input():
    with pytest.raises(ValueError):
        GeometricNMF(n_sources=2).fit(-np.ones((5, 3)))


def test_lsnmf_estimator(separable):
    est = LeastSquaresNMF(n_sources=2, max_iter=50).fit(separable.Y)
    assert est.components_.shape == (2, 6)
    assert isinstance(est.converged_, bool)
