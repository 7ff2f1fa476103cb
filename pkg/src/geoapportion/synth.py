"""Synthetic data with known profiles, intensities and attribution.

Rows are ``J * s_i * (w_i H0) + noise`` with ``w_i`` on the probability
simplex, so a row's entries average ``s_i``.
With probability ``p_pure`` per source a row is (nearly) pure, which is the
separability condition the geometric estimator relies on.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from .apportion import attribution_from
from .ingest import PollutantMatrix


@dataclass
class SynthConfig:
    n: int = 5000
    J: int = 8
    K: int = 3
    profiles: np.ndarray | None = None
    balanced_profiles: bool = True
    p_pure: float = 0.05
    epsilon: float = 0.0
    sigma: float = 0.0
    scale_low: float = 0.5
    scale_high: float = 2.0
    locations: tuple = ("L1",)
    start: str = "2023-01-02 00:00"
    seed: int = 0

    def validate(self):
        if self.K < 1 or self.J < 2 or self.n < 1:
            raise ValueError("need n >= 1, J >= 2, K >= 1")
        if not 0 <= self.p_pure * self.K <= 1:
            raise ValueError("p_pure * K must lie in [0, 1]")
        if not 0 <= self.epsilon < 0.5:
            raise ValueError("epsilon must lie in [0, 0.5)")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if not 0 < self.scale_low <= self.scale_high:
            raise ValueError("row scales must be positive")
        if self.profiles is not None:
            H = np.asarray(self.profiles, dtype=float)
            if H.shape != (self.K, self.J) or (H < 0).any():
                raise ValueError("profiles must be a non-negative K x J array")
            if not np.allclose(H.sum(axis=1), 1.0):
                raise ValueError("profile rows must sum to 1")
            if np.linalg.matrix_rank(H) < self.K:
                raise ValueError("profile rows must be affinely independent")


@dataclass
class SynthDataset:
    matrix: PollutantMatrix
    W0: np.ndarray
    H0: np.ndarray
    phi0: np.ndarray
    pure_source: np.ndarray
    config: SynthConfig
    coefficients: dict = field(default_factory=dict)

    @property
    def Y(self):
        return self.matrix.values

    def truth_bundle(self):
        return {
            "H0": self.H0.tolist(),
            "W0_means": self.W0.mean(axis=0).tolist(),
            "phi0": self.phi0.tolist(),
            "coefficients": self.coefficients,
        }


def random_profiles(K, J, rng, balanced=True):
    """Random row-stochastic profiles in the simplex interior.

    With ``balanced`` the columns are Sinkhorn-scaled to equal mass, so every
    pollutant has a comparable magnitude as it would after quantile scaling.
    """
    while True:
        H = rng.standard_exponential((K, J))
        if balanced:
            for _ in range(200):
                H /= H.sum(axis=0, keepdims=True)
                H /= H.sum(axis=1, keepdims=True)
        H /= H.sum(axis=1, keepdims=True)
        if np.linalg.matrix_rank(H) == K:
            return H


def _mixing_weights(config, rng):
    n, K = config.n, config.K
    w = rng.standard_exponential((n, K))
    w /= w.sum(axis=1, keepdims=True)
    pure = np.full(n, -1)
    u = rng.random(n)
    is_pure = u < config.p_pure * K
    pure[is_pure] = np.minimum((u[is_pure] / config.p_pure).astype(int), K - 1)
    rows = np.flatnonzero(is_pure)
    if rows.size:
        off = config.epsilon * rng.random(rows.size)
        if K > 1:
            rest = rng.standard_exponential((rows.size, K))
            rest[np.arange(rows.size), pure[rows]] = 0.0
            rest /= rest.sum(axis=1, keepdims=True)
            w[rows] = rest * off[:, None]
        else:
            w[rows] = 0.0
            off = np.zeros(rows.size)
        w[rows, pure[rows]] = 1.0 - off
    return w, pure


def _assemble(config, W0, H0, pure, rng, covariates=None, coefficients=None):
    Y = W0 @ H0
    if config.sigma > 0:
        Y = np.maximum(Y + config.sigma * rng.standard_normal(Y.shape), 0.0)
    stamps = np.datetime64(pd.Timestamp(config.start), "m") + np.arange(config.n).astype("timedelta64[m]")
    locs = np.array(config.locations, dtype=object)[np.arange(config.n) % len(config.locations)]
    matrix = PollutantMatrix(
        Y, [f"P{j + 1}" for j in range(config.J)], stamps, locs, covariates,
        report={"synthetic": True, "seed": config.seed},
    )
    phi0 = attribution_from(W0.mean(axis=0), H0)
    return SynthDataset(matrix, W0, H0, phi0, pure, config, coefficients or {})


def generate(config: SynthConfig) -> SynthDataset:
    config.validate()
    rng = np.random.default_rng(config.seed)
    H0 = random_profiles(config.K, config.J, rng, config.balanced_profiles) if config.profiles is None else np.asarray(config.profiles, float)
    w, pure = _mixing_weights(config, rng)
    # scale is per pollutant so entries are O(1), like quantile-scaled data
    scale = config.J * rng.uniform(config.scale_low, config.scale_high, config.n)
    W0 = scale[:, None] * w
    return _assemble(config, W0, H0, pure, rng)


def generate_covariates(config: SynthConfig, effects, binary=None, continuous=(), seed_offset=1):
    """Data whose intensities respond linearly to generated covariates.

    ``effects`` maps source index -> {term: coefficient}; a term is a
    covariate name or ``"a:b"`` for a product. ``binary`` maps flag name ->
    probability of 1; ``continuous`` names Uniform(0, 1) covariates. Shifted
    intensities are clipped at 0.
    """
    config.validate()
    base = generate(config)
    rng = np.random.default_rng([config.seed, seed_offset])
    if binary is None:
        names = {t for terms in effects.values() for term in terms for t in term.split(":")}
        binary = {name: 0.3 for name in sorted(names) if name not in continuous}
    cov = {}
    for name, p in binary.items():
        cov[name] = (rng.random(config.n) < p).astype(float)
    for name in continuous:
        cov[name] = rng.random(config.n)
    covariates = pd.DataFrame(cov)

    W0 = base.W0.copy()
    coefficients = {}
    for k, terms in effects.items():
        shift = np.zeros(config.n)
        for term, coef in terms.items():
            parts = term.split(":")
            missing = [p for p in parts if p not in covariates]
            if missing:
                raise ValueError(f"effect term {term!r} uses unknown covariate(s) {missing}")
            shift += coef * np.prod([covariates[p].to_numpy() for p in parts], axis=0)
        W0[:, k] = np.maximum(W0[:, k] + shift, 0.0)
        coefficients[int(k)] = dict(terms)
    cfg = replace(config)
    return _assemble(cfg, W0, base.H0, base.pure_source, rng, covariates, coefficients)
