"""Intensities, the attribution matrix Phi, and the estimators that produce them.

``phi[k, j] = mu[k] * H[k, j] / sum_l mu[l] * H[l, j]`` where ``mu`` are the
column means of the intensity matrix. Phi is unchanged by rescaling a
pollutant column or by trading scale between W and H, which is why it is the
reported quantity.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_non_negative

from . import geometry
from .geometry import ProfileMatrix
from .nnls import nnls_batch, nnls_rows


class ApportionError(ValueError):
    pass


@dataclass
class IntensityMatrix:
    W_tilde: np.ndarray
    residual_norm: np.ndarray
    column_means: np.ndarray


@dataclass
class AttributionMatrix:
    phi: np.ndarray
    pollutant_names: list[str] | None = None

    @property
    def source_labels(self):
        return [f"Source {k + 1}" for k in range(self.phi.shape[0])]


@dataclass
class SourceModel:
    """A fitted apportionment: profiles, intensities and attribution."""

    profiles: ProfileMatrix
    intensities: IntensityMatrix
    attribution: AttributionMatrix
    method: str = "geometric"
    meta: dict = field(default_factory=dict)

    @property
    def K(self):
        return self.profiles.H_star.shape[0]

    @property
    def phi(self):
        return self.attribution.phi

    @property
    def H_star(self):
        return self.profiles.H_star

    @property
    def W_tilde(self):
        return self.intensities.W_tilde


def solve_intensities(matrix, profiles) -> IntensityMatrix:
    """Row-wise NNLS of the data on the profile rows."""
    Y = np.asarray(getattr(matrix, "values", matrix), dtype=float)
    H = np.asarray(getattr(profiles, "H_star", profiles), dtype=float)
    if Y.shape[1] != H.shape[1]:
        raise ApportionError(f"data has {Y.shape[1]} columns, profiles have {H.shape[1]}")
    W, resid = nnls_rows(Y, H)
    return IntensityMatrix(W, resid, W.mean(axis=0))


def attribution_from(mu, H):
    mu = np.asarray(mu, dtype=float)
    H = np.asarray(H, dtype=float)
    weighted = mu[:, None] * H
    denom = weighted.sum(axis=0)
    bad = np.flatnonzero(~(denom > 0))
    if bad.size:
        raise ApportionError(f"no source contributes to pollutant column(s) {bad.tolist()}")
    return weighted / denom


def compute_attribution(intensities: IntensityMatrix, profiles, pollutant_names=None) -> AttributionMatrix:
    H = getattr(profiles, "H_star", profiles)
    names = pollutant_names or getattr(profiles, "pollutant_names", None)
    return AttributionMatrix(attribution_from(intensities.column_means, H), names)


def _source_order(mu, H):
    # descending mean intensity, ties by descending first-pollutant share
    return np.lexsort((-H[:, 0], -mu))


def _reorder(profiles: ProfileMatrix, intensities: IntensityMatrix):
    order = _source_order(intensities.column_means, profiles.H_star)
    prof = ProfileMatrix(
        profiles.H_star[order],
        profiles.pollutant_names,
        None if profiles.indices is None else np.asarray(profiles.indices)[order],
        profiles.volume,
        dict(profiles.meta),
    )
    inten = IntensityMatrix(
        intensities.W_tilde[:, order], intensities.residual_norm, intensities.column_means[order]
    )
    return prof, inten


def _as_values(matrix):
    values = getattr(matrix, "values", matrix)
    names = getattr(matrix, "pollutant_names", None)
    return np.asarray(values, dtype=float), names


def fit_geometric(matrix, K, seed=0, selection="max-volume", hull_method="auto", n_directions=256,
                  prune_factor=geometry.PRUNE_FACTOR, subset_strategy="auto",
                  subset_budget=geometry.SUBSET_BUDGET, tol=1e-8) -> SourceModel:
    """Geometric apportionment of a non-negative matrix with K sources.

    Normalizes rows, finds hull vertices, prunes them to ``prune_factor * K``
    candidates, picks the max-volume K-subset (or XRAY picks with
    ``selection="xray"``), then solves for intensities and Phi.
    """
    Y, names = _as_values(matrix)
    if K < 1:
        raise ApportionError("K must be at least 1")
    cloud = geometry.normalize_rows(Y)
    meta = {"K": K, "seed": seed, "selection": selection}
    if selection == "max-volume":
        vset = geometry.find_extreme_points(cloud, hull_method, tol, n_directions, seed)
        vset = geometry.prune_vertices(vset, cloud, K, seed, prune_factor)
        profiles = geometry.select_max_volume(vset, cloud, K, subset_strategy, subset_budget, names)
        meta.update(
            hull_method=vset.method,
            n_vertices=int(len(vset.indices)),
            n_candidates=int(len(vset.candidate_indices)),
        )
    elif selection == "xray":
        profiles = geometry.xray_select(cloud, K, pollutant_names=names)
    else:
        raise ValueError(f"unknown selection {selection!r}")
    # cloud indices -> input row numbers
    profiles.indices = cloud.retained[profiles.indices]
    intensities = solve_intensities(Y, profiles)
    profiles, intensities = _reorder(profiles, intensities)
    meta["residual_mean"] = float(intensities.residual_norm.mean())
    meta["residual_max"] = float(intensities.residual_norm.max())
    return SourceModel(
        profiles, intensities, compute_attribution(intensities, profiles, names),
        "xray" if selection == "xray" else "geometric", meta,
    )


def fit_xray(matrix, K, seed=0) -> SourceModel:
    return fit_geometric(matrix, K, seed=seed, selection="xray")


def _nmf_objective(Y, W, H, alpha):
    return float(np.sum((Y - W @ H) ** 2) + alpha * (np.sum(W**2) + np.sum(H**2)))


def ls_nmf(matrix, K, l2_penalty=0.0, seed=0, max_iter=500, tol=1e-6) -> SourceModel:
    """Least-squares NMF by alternating NNLS, with an optional ridge penalty.

    Minimizes ``||Y - W H||_F^2 + l2_penalty * (||W||_F^2 + ||H||_F^2)``.
    Stops when the relative objective decrease falls below ``tol``;
    ``meta["converged"]`` is False if ``max_iter`` was hit first.
    """
    Y, names = _as_values(matrix)
    if K < 1:
        raise ApportionError("K must be at least 1")
    if l2_penalty < 0:
        raise ApportionError("l2_penalty must be non-negative")
    n, J = Y.shape
    rng = np.random.default_rng(seed)
    scale = np.sqrt(max(Y.mean(), 1e-12) / K)
    W = rng.random((n, K)) * scale
    H = rng.random((K, J)) * scale
    ridge = l2_penalty * np.eye(K)
    obj = _nmf_objective(Y, W, H, l2_penalty)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        H = nnls_batch(W.T @ W + ridge, (W.T @ Y).T).T
        W = nnls_batch(H @ H.T + ridge, Y @ H.T)
        new = _nmf_objective(Y, W, H, l2_penalty)
        if obj - new <= tol * max(obj, 1e-300):
            obj = new
            converged = True
            break
        obj = new

    sums = H.sum(axis=1)
    live = sums > 0
    H_star = np.full((K, J), 1.0 / J)
    H_star[live] = H[live] / sums[live, None]
    W_tilde = np.where(live, W * np.where(live, sums, 0.0), 0.0)
    resid = np.linalg.norm(Y - W_tilde @ H_star, axis=1)
    profiles = ProfileMatrix(H_star, names, None, float("nan"), {"strategy": "ls-nmf"})
    intensities = IntensityMatrix(W_tilde, resid, W_tilde.mean(axis=0))
    profiles, intensities = _reorder(profiles, intensities)
    rel_err = float(np.linalg.norm(Y - W @ H) / max(np.linalg.norm(Y), 1e-300))
    meta = {
        "K": K, "seed": seed, "l2_penalty": l2_penalty, "n_iter": it,
        "converged": converged, "objective": obj, "relative_error": rel_err,
    }
    return SourceModel(profiles, intensities, compute_attribution(intensities, profiles, names), "ls-nmf", meta)


def fit_model(matrix, K, method="geometric", seed=0, l2_penalty=0.0, **options) -> SourceModel:
    """Dispatch on ``method`` in {"geometric", "xray", "ls-nmf"}."""
    if method == "geometric":
        return fit_geometric(matrix, K, seed=seed, **options)
    if method == "xray":
        return fit_geometric(matrix, K, seed=seed, selection="xray")
    if method in ("ls-nmf", "lsnmf"):
        return ls_nmf(matrix, K, l2_penalty=l2_penalty, seed=seed, **options)
    raise ValueError(f"unknown fit method {method!r}")


# ---------------------------------------------------------------------------
# scikit-learn style estimators


class _ApportionMixin(TransformerMixin):
    def _store(self, model: SourceModel):
        self.model_ = model
        self.components_ = model.H_star
        self.intensities_ = model.W_tilde
        self.mean_intensity_ = model.intensities.column_means
        self.attribution_ = model.phi
        return self

    def transform(self, X):
        """Non-negative intensities of new rows on the fitted profiles."""
        check_is_fitted(self, "components_")
        X = check_array(X, dtype=float)
        check_non_negative(X, type(self).__name__)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return nnls_rows(X, self.components_)[0]

    def inverse_transform(self, W):
        check_is_fitted(self, "components_")
        return np.asarray(W, dtype=float) @ self.components_

    def fit_transform(self, X, y=None):
        return self.fit(X).intensities_


class GeometricNMF(_ApportionMixin, BaseEstimator):
    """Identifiable geometric NMF.

    Parameters
    ----------
    n_sources : int, default=3
    selection : {"max-volume", "xray"}, default="max-volume"
        How the K profile rows are picked from the hull of the normalized data.
    hull_method : {"auto", "lp", "directions"}, default="auto"
    n_directions : int, default=256
        Random directions used by the direction-bank vertex screen.
    prune_factor : int, default=40
        Hull vertices are thinned to ``prune_factor * n_sources`` candidates.
    subset_strategy : {"auto", "exhaustive", "greedy-swap"}, default="auto"
    subset_budget : int, default=2_000_000
        Largest number of K-subsets searched exhaustively under ``"auto"``.
    tol : float, default=1e-8
    random_state : int, default=0

    Attributes
    ----------
    components_ : ndarray of shape (n_sources, n_features)
        Row-stochastic profiles H*.
    intensities_ : ndarray of shape (n_samples, n_sources)
    mean_intensity_ : ndarray of shape (n_sources,)
    attribution_ : ndarray of shape (n_sources, n_features)
        Column-stochastic attribution matrix.
    """

    def __init__(self, n_sources=3, selection="max-volume", hull_method="auto", n_directions=256,
                 prune_factor=geometry.PRUNE_FACTOR, subset_strategy="auto",
                 subset_budget=geometry.SUBSET_BUDGET, tol=1e-8, random_state=0):
        self.n_sources = n_sources
        self.selection = selection
        self.hull_method = hull_method
        self.n_directions = n_directions
        self.prune_factor = prune_factor
        self.subset_strategy = subset_strategy
        self.subset_budget = subset_budget
        self.tol = tol
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X, dtype=float)
        check_non_negative(X, "GeometricNMF")
        self.n_features_in_ = X.shape[1]
        model = fit_geometric(
            X, self.n_sources, seed=self.random_state, selection=self.selection,
            hull_method=self.hull_method, n_directions=self.n_directions,
            prune_factor=self.prune_factor, subset_strategy=self.subset_strategy,
            subset_budget=self.subset_budget, tol=self.tol,
        )
        return self._store(model)


class LeastSquaresNMF(_ApportionMixin, BaseEstimator):
    """Alternating-NNLS factorization with an optional L2 penalty on both factors."""

    def __init__(self, n_sources=3, l2_penalty=0.0, max_iter=500, tol=1e-6, random_state=0):
        self.n_sources = n_sources
        self.l2_penalty = l2_penalty
        self.max_iter = max_iter
        self.tol = tol
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X, dtype=float)
        check_non_negative(X, "LeastSquaresNMF")
        self.n_features_in_ = X.shape[1]
        model = ls_nmf(X, self.n_sources, self.l2_penalty, self.random_state, self.max_iter, self.tol)
        self.n_iter_ = model.meta["n_iter"]
        self.converged_ = model.meta["converged"]
        self.reconstruction_err_ = model.meta["relative_error"]
        return self._store(model)
