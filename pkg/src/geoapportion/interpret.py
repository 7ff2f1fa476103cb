"""Downstream analyses of fitted sources: regression with bootstrap intervals,
diurnal profiles, one-sided incident tests and model-adequacy exports."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import linalg, stats

from .geometry import SimplexCloud, normalize_rows

INTERCEPT = "(Intercept)"


class AnalysisError(ValueError):
    pass


# ---------------------------------------------------------------------------
# regression


@dataclass
class DesignSpec:
    """Linear model ``response ~ terms + interactions``.

    ``categorical`` maps a term to its reference level; other terms are
    numeric. ``contrasts`` maps a label to coefficient names whose sum is
    reported (e.g. a main effect plus its interaction).
    """

    response: str
    terms: list[str]
    interactions: list[tuple[str, str]] = field(default_factory=list)
    categorical: dict[str, object] = field(default_factory=dict)
    contrasts: dict[str, list[str]] = field(default_factory=dict)

    def __post_init__(self):
        for a, b in self.interactions:
            for name in (a, b):
                if name not in self.terms:
                    raise AnalysisError(f"interaction member {name!r} is not a main term")

    def columns(self):
        return [self.response, *self.terms]

    def with_response(self, response):
        return DesignSpec(response, list(self.terms), list(self.interactions), dict(self.categorical),
                          dict(self.contrasts))


@dataclass
class RegressionResult:
    names: list[str]
    estimate: np.ndarray
    rows_used: int
    rows_dropped: int = 0
    boot_mean: np.ndarray | None = None
    ci_low: np.ndarray | None = None
    ci_high: np.ndarray | None = None
    replicates: int = 0

    def table(self):
        out = pd.DataFrame({"term": self.names, "estimate": self.estimate})
        if self.boot_mean is not None:
            out["boot_mean"] = self.boot_mean
            out["ci_low"] = self.ci_low
            out["ci_high"] = self.ci_high
        return out


def _term_columns(frame, term, spec):
    if term in spec.categorical:
        ref = spec.categorical[term]
        levels = sorted(pd.unique(frame[term].dropna()), key=str)
        if ref not in levels:
            raise AnalysisError(f"reference level {ref!r} not present in {term!r}")
        return {f"{term}[{lvl}]": (frame[term] == lvl).astype(float).to_numpy()
                for lvl in levels if lvl != ref}
    return {term: frame[term].to_numpy(dtype=float)}


def design_matrix(frame: pd.DataFrame, spec: DesignSpec):
    """Returns ``(X, y, names, n_dropped)``; rows with missing inputs are dropped."""
    missing = [c for c in spec.columns() if c not in frame.columns]
    if missing:
        raise AnalysisError(f"unknown column(s): {', '.join(missing)}")
    complete = frame[spec.columns()].notna().all(axis=1)
    data = frame.loc[complete]
    cols = {INTERCEPT: np.ones(len(data))}
    blocks = {}
    for term in spec.terms:
        blocks[term] = _term_columns(data, term, spec)
        cols.update(blocks[term])
    for a, b in spec.interactions:
        for na, va in blocks[a].items():
            for nb, vb in blocks[b].items():
                cols[f"{na}:{nb}"] = va * vb
    names = list(cols)
    X = np.column_stack([cols[n] for n in names]) if len(data) else np.empty((0, len(names)))
    y = data[spec.response].to_numpy(dtype=float)
    return X, y, names, int((~complete).sum())


def _lstsq_qr(X, y, names):
    n, p = X.shape
    if n < p + 1:
        raise AnalysisError(f"need at least {p + 1} complete rows for {p} coefficients, have {n}")
    Q, R = linalg.qr(X, mode="economic")
    diag = np.abs(np.diag(R))
    scale = np.linalg.norm(X, axis=0)
    bad = [names[i] for i in range(p) if diag[i] <= 1e-10 * max(scale[i], 1.0)]
    if bad:
        raise AnalysisError(f"design matrix is rank deficient; offending column(s): {', '.join(bad)}")
    return linalg.solve_triangular(R, Q.T @ y)


def fit_ols(frame: pd.DataFrame, spec: DesignSpec) -> RegressionResult:
    """Least-squares fit via QR. Rows with any missing model input are dropped."""
    X, y, names, dropped = design_matrix(frame, spec)
    beta = _lstsq_qr(X, y, names)
    return RegressionResult(names, beta, rows_used=len(y), rows_dropped=dropped)


def _with_contrasts(names, beta, contrasts):
    extra_names, extra = [], []
    for label, members in contrasts.items():
        unknown = [m for m in members if m not in names]
        if unknown:
            raise AnalysisError(f"contrast {label!r} uses unknown coefficient(s) {unknown}")
        extra_names.append(label)
        extra.append(sum(beta[names.index(m)] for m in members))
    return names + extra_names, np.concatenate([beta, extra])


def _anchored_mean(samples):
    base = samples[0]
    return base + (samples - base).mean(axis=0)


def regress_sources(frame: pd.DataFrame, runs, specs, reference=None, level=0.95):
    """Bootstrap regression of each source intensity on covariates.

    ``frame`` holds covariates aligned with the full-data rows; replicate
    ``b`` uses rows ``runs[b].indices`` and its aligned ``W_tilde``. ``specs``
    maps source index -> DesignSpec (the response name is only a label).
    ``reference`` is the full-data SourceModel used for point estimates.
    Returns ``{source index: RegressionResult}``.
    """
    if not runs:
        raise AnalysisError("no bootstrap runs")
    if any(r.W_tilde is None for r in runs):
        raise AnalysisError("bootstrap runs do not carry intensities (use keep_intensities=True)")
    frame = frame.reset_index(drop=True)
    lo_q, hi_q = 100 * (1 - level) / 2, 100 * (1 + level) / 2
    results = {}
    for k, spec in specs.items():
        label = spec.response
        if reference is not None:
            data = frame.assign(**{label: reference.W_tilde[:, k]})
            point = fit_ols(data, spec)
            names, estimate = _with_contrasts(point.names, point.estimate, spec.contrasts)
            used, dropped = point.rows_used, point.rows_dropped
        else:
            names, estimate, used, dropped = None, None, 0, 0
        draws = []
        for run in runs:
            data = frame.iloc[run.indices].reset_index(drop=True).assign(**{label: run.W_tilde[:, k]})
            fit = fit_ols(data, spec)
            n_b, beta_b = _with_contrasts(fit.names, fit.estimate, spec.contrasts)
            if names is None:
                names = n_b
            elif n_b != names:
                raise AnalysisError(f"replicate {run.replicate} produced a different design ({n_b})")
            draws.append(beta_b)
        draws = np.array(draws)
        if estimate is None:
            estimate = _anchored_mean(draws)
        low = np.percentile(draws, lo_q, axis=0)
        high = np.percentile(draws, hi_q, axis=0)
        results[k] = RegressionResult(names, estimate, used, dropped, _anchored_mean(draws), low, high,
                                      len(runs))
    return results


# ---------------------------------------------------------------------------
# time-of-day features


def add_time_covariates(frame: pd.DataFrame, timestamp="timestamp") -> pd.DataFrame:
    """Add ``hour``, ``pm`` (1 when hour >= 12) and ``weekend`` (Sat/Sun) when absent."""
    out = frame.copy()
    ts = pd.to_datetime(out[timestamp])
    if "hour" not in out:
        out["hour"] = ts.dt.hour
    if "pm" not in out:
        out["pm"] = (ts.dt.hour >= 12).astype(float)
    if "weekend" not in out:
        out["weekend"] = (ts.dt.dayofweek >= 5).astype(float)
    return out


def diurnal(frame: pd.DataFrame, value, split=True, timestamp="timestamp") -> pd.DataFrame:
    """Mean of ``value`` for each hour of day, optionally by weekday/weekend.

    Hours without data have NaN mean and zero count.
    """
    ts = pd.to_datetime(frame[timestamp])
    data = pd.DataFrame({
        "hour": ts.dt.hour.to_numpy(),
        "group": np.where(ts.dt.dayofweek.to_numpy() >= 5, "weekend", "weekday") if split else "all",
        "value": frame[value].to_numpy(dtype=float),
    }).dropna(subset=["value"])
    groups = ["weekday", "weekend"] if split else ["all"]
    agg = data.groupby(["group", "hour"])["value"].agg(["mean", "count"])
    full = pd.MultiIndex.from_product([groups, range(24)], names=["group", "hour"])
    out = agg.reindex(full).reset_index()
    out["count"] = out["count"].fillna(0).astype(int)
    out.insert(0, "variable", value)
    return out


# ---------------------------------------------------------------------------
# one-sided two-sample tests


@dataclass
class TestReport:
    test: str
    statistic: float
    p_value: float
    n_x: int
    n_y: int
    alternative: str = "x stochastically larger than y"
    method: str = ""

    __test__ = False  # keep pytest from collecting this class


def mw_null_counts(n, m):
    """Counts of the U statistic over all C(n+m, n) rank assignments (no ties).

    ``counts[u]`` is the number of assignments giving ``U = u``.
    """
    # the largest pooled value is either an x (beating all j y's) or a y
    table = [[None] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        for j in range(m + 1):
            if i == 0 or j == 0:
                table[i][j] = [1] + [0] * (i * j)
                continue
            cur = [0] * (i * j + 1)
            for u, c in enumerate(table[i - 1][j]):
                cur[u + j] += c
            for u, c in enumerate(table[i][j - 1]):
                cur[u] += c
            table[i][j] = cur
    return table[n][m]


def _mw_exact_upper(u_obs, n, m):
    counts = mw_null_counts(n, m)
    k = int(math.ceil(u_obs - 1e-9))
    return sum(counts[k:]) / math.comb(n + m, n)


def mann_whitney_one_sided(x, y) -> TestReport:
    """Mann-Whitney U for ``x`` stochastically larger than ``y``.

    Exact enumeration when ``len(x) + len(y) <= 20`` without ties, otherwise
    the normal approximation with tie-corrected variance and continuity
    correction.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n, m = x.size, y.size
    if n == 0 or m == 0:
        raise AnalysisError("both samples must be non-empty")
    pooled = np.concatenate([x, y])
    ranks = stats.rankdata(pooled)
    u = float(ranks[:n].sum() - n * (n + 1) / 2)
    _, tie_counts = np.unique(pooled, return_counts=True)
    has_ties = (tie_counts > 1).any()
    if n + m <= 20 and not has_ties:
        return TestReport("MW", u, _mw_exact_upper(u, n, m), n, m, method="exact")
    N = n + m
    tie_term = float(np.sum(tie_counts.astype(float) ** 3 - tie_counts)) / (N * (N - 1))
    var = n * m / 12.0 * ((N + 1) - tie_term)
    if var <= 0:
        return TestReport("MW", u, 1.0, n, m, method="normal")
    z = (u - n * m / 2.0 - 0.5) / math.sqrt(var)
    return TestReport("MW", u, float(stats.norm.sf(z)), n, m, method="normal")


KS_EXACT_LIMIT = 10_000


def ks_one_sided(x, y) -> TestReport:
    """One-sided KS with ``D+ = sup_t F_y(t) - F_x(t)``; large when x sits to the right.

    Without ties and with both samples of at most ``KS_EXACT_LIMIT`` values the
    p-value comes from the exact null distribution of ``D+``. Otherwise it is
    the asymptotic bound ``exp(-2 D+^2 n m / (n + m))``, clipped to [0, 1].
    """
    x = np.sort(np.asarray(x, dtype=float))
    y = np.sort(np.asarray(y, dtype=float))
    n, m = x.size, y.size
    if n == 0 or m == 0:
        raise AnalysisError("both samples must be non-empty")
    grid = np.concatenate([x, y])
    Fx = np.searchsorted(x, grid, side="right") / n
    Fy = np.searchsorted(y, grid, side="right") / m
    d = float(max(0.0, np.max(Fy - Fx)))
    if d == 0.0:
        return TestReport("KS", 0.0, 1.0, n, m, method="exact")
    if np.unique(grid).size == grid.size and max(n, m) <= KS_EXACT_LIMIT:
        with warnings.catch_warnings():
            warnings.simplefilter("error", RuntimeWarning)
            try:
                # scipy's "less" alternative tests exactly this sup of F_y - F_x
                p = stats.ks_2samp(x, y, alternative="less", method="exact").pvalue
                return TestReport("KS", d, float(min(max(p, 0.0), 1.0)), n, m, method="exact")
            except RuntimeWarning:
                pass
    p = math.exp(-2.0 * d * d * n * m / (n + m))
    return TestReport("KS", d, min(max(p, 0.0), 1.0), n, m, method="asymptotic")


# ---------------------------------------------------------------------------
# incident case study


def _describe(values):
    if values.size == 0:
        return dict(count=0)
    return dict(
        count=values.size,
        mean=values.mean(),
        std=values.std(ddof=1) if values.size > 1 else np.nan,
        median=np.median(values),
        p85=np.percentile(values, 85),
        p95=np.percentile(values, 95),
        max=values.max(),
    )


def case_study(frame: pd.DataFrame, start, end, targets, group="pooled", day_offsets=(-1, 1),
               timestamp="timestamp", location="location"):
    """Compare an incident window with the same clock hours on neighbouring days.

    The window ``[start, end]`` is inclusive. ``group`` is ``"pooled"`` or
    ``"location"``. Returns ``(reports, summary)`` where ``reports`` is a list
    of ``(group, target, TestReport)`` and ``summary`` a per-group table of
    descriptive statistics with both p-values.
    """
    start, end = pd.Timestamp(start), pd.Timestamp(end)
    if end < start:
        raise AnalysisError("incident window ends before it starts")
    ts = pd.to_datetime(frame[timestamp])
    if start > ts.max() or end < ts.min():
        raise AnalysisError(f"incident window {start} - {end} lies outside the data span")
    incident = ((ts >= start) & (ts <= end)).to_numpy()
    control = np.zeros(len(frame), dtype=bool)
    for off in day_offsets:
        delta = pd.Timedelta(days=off)
        control |= ((ts >= start + delta) & (ts <= end + delta)).to_numpy()
    if group == "pooled":
        groups = [("pooled", np.ones(len(frame), dtype=bool))]
    elif group == "location":
        locs = frame.loc[incident, location].unique()
        groups = [(str(loc), (frame[location] == loc).to_numpy()) for loc in sorted(locs, key=str)]
    else:
        raise ValueError(f"unknown grouping {group!r}")

    reports, rows = [], []
    for gname, mask in groups:
        for target in targets:
            inc = frame.loc[incident & mask, target].dropna().to_numpy(dtype=float)
            ctl = frame.loc[control & mask, target].dropna().to_numpy(dtype=float)
            if inc.size == 0 or ctl.size == 0:
                raise AnalysisError(
                    f"empty {'incident' if inc.size == 0 else 'control'} sample for {target!r} in {gname}"
                )
            mw = mann_whitney_one_sided(inc, ctl)
            ks = ks_one_sided(inc, ctl)
            reports += [(gname, target, mw), (gname, target, ks)]
            for flag, sample in ((1, inc), (0, ctl)):
                row = {"group": gname, "target": target, "incident": flag, **_describe(sample)}
                row["p_mw"] = mw.p_value if flag else np.nan
                row["p_ks"] = ks.p_value if flag else np.nan
                rows.append(row)
    return reports, pd.DataFrame(rows)


# ---------------------------------------------------------------------------
# correlations and adequacy checks


def correlations(matrix) -> pd.DataFrame:
    """Pearson correlations; columns with zero variance give NaN rows and columns."""
    values = np.asarray(getattr(matrix, "values", matrix), dtype=float)
    names = getattr(matrix, "pollutant_names", None) or [f"P{j + 1}" for j in range(values.shape[1])]
    if values.shape[0] < 2:
        raise AnalysisError("need at least two rows")
    centered = values - values.mean(axis=0)
    sd = np.sqrt((centered**2).sum(axis=0))
    with np.errstate(divide="ignore", invalid="ignore"):
        z = centered / sd
        corr = z.T @ z
    corr[:, sd == 0] = np.nan
    corr[sd == 0, :] = np.nan
    corr = np.clip(corr, -1.0, 1.0)
    live = np.flatnonzero(sd > 0)
    corr[live, live] = 1.0
    return pd.DataFrame(corr, index=names, columns=names)


def separability_check(intensities, window=(0.0, 0.2), bins=20):
    """Per-source distribution of ``(1 - W*_ik) / W*_ik`` for row-normalized intensities.

    Returns ``(summary, histogram)``: the fraction of rows with ratio at most
    ``window[1]`` per source, and fixed-width bin counts over ``window``.
    """
    W = np.asarray(getattr(intensities, "W_tilde", intensities), dtype=float)
    sums = W.sum(axis=1)
    keep = sums > 0
    if not keep.any():
        raise AnalysisError("every intensity row is zero")
    W_star = W[keep] / sums[keep, None]
    with np.errstate(divide="ignore"):
        ratio = np.where(W_star > 0, (1.0 - W_star) / np.where(W_star > 0, W_star, 1.0), np.inf)
    edges = np.linspace(window[0], window[1], bins + 1)
    summary, hist = [], []
    for k in range(W.shape[1]):
        r = ratio[:, k]
        summary.append({
            "source": k + 1,
            "mass_near_zero": float(np.mean(r <= window[1])),
            "rows": int(keep.sum()),
            "zero_rows_dropped": int((~keep).sum()),
        })
        counts, _ = np.histogram(r[(r >= window[0]) & (r <= window[1])], bins=edges)
        hist += [{"source": k + 1, "bin_left": edges[b], "bin_right": edges[b + 1], "count": int(counts[b])}
                 for b in range(bins)]
    return pd.DataFrame(summary), pd.DataFrame(hist)


def hull_adequacy_export(cloud, profiles, pairs, pollutant_names=None, cap=2000, seed=0) -> pd.DataFrame:
    """Two-coordinate projections of the normalized cloud and the profile rows.

    ``pairs`` are (name, name) or (index, index). At most ``cap`` cloud rows
    are emitted, chosen without replacement by ``seed``.
    """
    if not isinstance(cloud, SimplexCloud):
        cloud = normalize_rows(cloud)
    H = np.asarray(getattr(profiles, "H_star", profiles), dtype=float)
    J = cloud.points.shape[1]
    names = pollutant_names or getattr(profiles, "pollutant_names", None) or [f"P{j + 1}" for j in range(J)]
    n = cloud.points.shape[0]
    rows = np.arange(n)
    if n > cap:
        rows = np.sort(np.random.default_rng(seed).choice(n, size=cap, replace=False))
    pieces = []
    for a, b in pairs:
        ia = names.index(a) if isinstance(a, str) else int(a)
        ib = names.index(b) if isinstance(b, str) else int(b)
        if not (0 <= ia < J and 0 <= ib < J):
            raise AnalysisError(f"invalid pollutant pair {(a, b)}")
        label = f"{names[ia]}|{names[ib]}"
        pieces.append(pd.DataFrame({
            "pair": label, "kind": "cloud", "row": cloud.retained[rows],
            "x": cloud.points[rows, ia], "y": cloud.points[rows, ib],
        }))
        pieces.append(pd.DataFrame({
            "pair": label, "kind": "profile", "row": np.arange(H.shape[0]) + 1,
            "x": H[:, ia], "y": H[:, ib],
        }))
    return pd.concat(pieces, ignore_index=True)
