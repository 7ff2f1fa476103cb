"""Bootstrap uncertainty for the attribution matrix and K-selection diagnostics."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.optimize import linear_sum_assignment

from .apportion import ApportionError, fit_model
from .geometry import GeometryError
from .nnls import NNLSError

logger = logging.getLogger(__name__)

FIT_ERRORS = (GeometryError, ApportionError, NNLSError, np.linalg.LinAlgError)


@dataclass
class BootstrapRun:
    replicate: int
    indices: np.ndarray
    phi: np.ndarray
    permutation: np.ndarray
    H_star: np.ndarray | None = None
    W_tilde: np.ndarray | None = None


@dataclass
class BootstrapSummary:
    phi_mean: np.ndarray
    phi_se: np.ndarray
    K: int
    B: int
    n_failed: int = 0
    samples: np.ndarray | None = None
    pollutant_names: list[str] | None = None
    failures: list = field(default_factory=list)


@dataclass
class StabilityDiagnostics:
    K: int
    cvar: float
    rank_stability: float
    per_pollutant: np.ndarray
    excluded_cells: int


def row_resampler(n, rng):
    """Row indices drawn with replacement; the unit of resampling is one record."""
    return rng.integers(0, n, size=n)


def _assignment_cost(reference, candidate):
    return np.abs(reference[:, None, :] - candidate[None, :, :]).sum(axis=2)


def align_sources(reference, candidate):
    """Permutation ``perm`` with ``candidate[perm]`` matching ``reference`` row by row.

    Minimizes the summed L1 distance between matched rows (Hungarian
    assignment). Among optimal assignments the lexicographically smallest
    permutation is returned.
    """
    ref = np.asarray(getattr(reference, "phi", getattr(reference, "H_star", reference)), dtype=float)
    cand = np.asarray(getattr(candidate, "phi", getattr(candidate, "H_star", candidate)), dtype=float)
    if ref.shape != cand.shape:
        raise ValueError(f"shape mismatch: {ref.shape} vs {cand.shape}")
    C = _assignment_cost(ref, cand)
    K = C.shape[0]
    rows, cols = linear_sum_assignment(C)
    best = C[rows, cols].sum()
    slack = 1e-12 * max(1.0, abs(best))

    perm, used, spent = [], set(), 0.0
    for k in range(K):
        for l in range(K):
            if l in used:
                continue
            rest_r = [r for r in range(k + 1, K)]
            rest_c = [c for c in range(K) if c not in used and c != l]
            tail = 0.0
            if rest_r:
                sub = C[np.ix_(rest_r, rest_c)]
                r, c = linear_sum_assignment(sub)
                tail = sub[r, c].sum()
            if spent + C[k, l] + tail <= best + slack:
                perm.append(l)
                used.add(l)
                spent += C[k, l]
                break
    return np.array(perm, dtype=int)


def _se(samples):
    # anchor at the first replicate so identical replicates give exactly 0
    base = samples[0]
    dev = samples - base
    mean = base + dev.mean(axis=0)
    centered = dev - dev.mean(axis=0)
    se = np.sqrt((centered**2).sum(axis=0) / (samples.shape[0] - 1))
    return mean, se


def _replicate(b, values, K, method, fit_seed, fit_options, seed_seq, resampler, keep_intensities, reference_phi):
    rng = np.random.default_rng(seed_seq)
    idx = np.asarray(resampler(values.shape[0], rng))
    try:
        model = fit_model(values[idx], K, method=method, seed=fit_seed, **fit_options)
    except FIT_ERRORS as exc:
        return b, idx, exc
    perm = align_sources(reference_phi, model.phi)
    return b, idx, BootstrapRun(
        replicate=b,
        indices=idx,
        phi=model.phi[perm],
        permutation=perm,
        H_star=model.H_star[perm],
        W_tilde=model.W_tilde[:, perm] if keep_intensities else None,
    )


def bootstrap(matrix, K, B=100, seed=0, method="geometric", reference=None, resampler=row_resampler,
              keep_intensities=False, keep_samples=True, n_jobs=1, **fit_options):
    """Refit on ``B`` row resamples and summarize the aligned attributions.

    Replicate ``b`` draws its rows from the ``b``-th child of
    ``SeedSequence(seed)``, so results do not depend on ``n_jobs``. Each
    replicate is aligned to ``reference`` (the full-data fit unless given).
    Failed replicates are dropped and counted.

    Returns ``(runs, summary, reference)``.
    """
    if B < 2:
        raise ValueError("need at least 2 bootstrap replicates")
    values = np.asarray(getattr(matrix, "values", matrix), dtype=float)
    names = getattr(matrix, "pollutant_names", None)
    if reference is None:
        reference = fit_model(values, K, method=method, seed=seed, **fit_options)
    children = np.random.SeedSequence(seed).spawn(B)
    jobs = (
        delayed(_replicate)(b, values, K, method, seed, fit_options, children[b], resampler,
                            keep_intensities, reference.phi)
        for b in range(B)
    )
    results = Parallel(n_jobs=n_jobs)(jobs) if n_jobs != 1 else [j[0](*j[1], **j[2]) for j in jobs]
    runs, failures = [], []
    for b, idx, out in sorted(results, key=lambda r: r[0]):
        if isinstance(out, BootstrapRun):
            runs.append(out)
        else:
            logger.warning("bootstrap replicate %d failed: %s", b, out)
            failures.append((b, str(out)))
    if len(runs) < 2:
        raise ApportionError(f"only {len(runs)} of {B} bootstrap replicates succeeded")
    samples = np.stack([r.phi for r in runs])
    mean, se = _se(samples)
    summary = BootstrapSummary(
        phi_mean=mean, phi_se=se, K=K, B=len(runs), n_failed=len(failures),
        samples=samples if keep_samples else None, pollutant_names=names, failures=failures,
    )
    return runs, summary, reference


def diagnostics(summary: BootstrapSummary, runs, mean_floor=0.03) -> StabilityDiagnostics:
    """Mean cellwise CV (cells with bootstrap mean >= ``mean_floor``) and
    dominant-source rank stability averaged over pollutants."""
    if not runs:
        raise ValueError("no bootstrap runs")
    keep = summary.phi_mean >= mean_floor
    if not keep.any():
        raise ValueError(f"every cell has bootstrap mean below {mean_floor}")
    cvar = float(np.mean(summary.phi_se[keep] / summary.phi_mean[keep]))
    top = np.argmax(summary.phi_mean, axis=0)
    tops = np.stack([np.argmax(r.phi, axis=0) for r in runs])
    per_pollutant = (tops == top[None, :]).mean(axis=0)
    return StabilityDiagnostics(
        K=summary.K,
        cvar=cvar,
        rank_stability=float(per_pollutant.mean()),
        per_pollutant=per_pollutant,
        excluded_cells=int((~keep).sum()),
    )


def select_k(matrix, K_candidates=(2, 3, 4, 5), B=100, seed=0, method="geometric", mean_floor=0.03,
             n_jobs=1, **fit_options) -> pd.DataFrame:
    """Bootstrap diagnostics per candidate K. The choice of K is left to the caller."""
    K_candidates = list(K_candidates)
    if not K_candidates:
        raise ValueError("no candidate K values")
    rows = []
    for K in K_candidates:
        runs, summary, _ = bootstrap(matrix, K, B, seed, method, n_jobs=n_jobs, keep_samples=False,
                                     **fit_options)
        diag = diagnostics(summary, runs, mean_floor)
        rows.append({
            "K": K,
            "cvar": diag.cvar,
            "rank_stability": diag.rank_stability,
            "excluded_cells": diag.excluded_cells,
            "replicates": summary.B,
            "failed": summary.n_failed,
        })
    return pd.DataFrame(rows)
