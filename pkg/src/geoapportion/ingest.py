"""Sensor table ingestion, PM size-bin differencing, complete-case filtering
and the quantile-based offset scaling applied before factorization."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

TIMESTAMP_FORMAT = "%Y-%m-%d %H:%M"

CUMULATIVE_PM = ("PM1", "PM2.5", "PM10", "TSP")
SIZE_BINS = ("PM1", "PM2.5-PM1", "PM10-PM2.5", "TSP-PM10")
DEFAULT_POLLUTANTS = SIZE_BINS + ("BC", "CO", "NO", "NO2")


class IngestError(ValueError):
    """Raised when a table cannot be turned into a valid pollutant matrix."""


@dataclass
class Schema:
    """Maps canonical names to the column headers of a raw sensor table.

    ``pollutants`` and ``covariates`` map canonical name -> header.
    """

    timestamp: str = "timestamp"
    location: str = "location"
    pollutants: dict[str, str] = field(default_factory=dict)
    covariates: dict[str, str] = field(default_factory=dict)

    @classmethod
    def from_file(cls, path):
        """Read ``key=value`` lines.

        Recognised keys: ``timestamp``, ``location``, ``pollutant.<name>`` and
        ``covariate.<name>``. Blank lines and ``#`` comments are ignored.
        """
        schema = cls()
        for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise IngestError(f"{path}:{lineno}: expected key=value, got {raw!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key == "timestamp":
                schema.timestamp = value
            elif key == "location":
                schema.location = value
            elif key.startswith("pollutant."):
                schema.pollutants[key[len("pollutant."):]] = value
            elif key.startswith("covariate."):
                schema.covariates[key[len("covariate."):]] = value
            else:
                raise IngestError(f"{path}:{lineno}: unknown key {key!r}")
        return schema

    @classmethod
    def identity(cls, pollutants, covariates=()):
        return cls(pollutants={p: p for p in pollutants}, covariates={c: c for c in covariates})


@dataclass
class PollutantMatrix:
    """An n x J concentration matrix with row metadata.

    ``values`` has no missing entries. ``covariates`` is a DataFrame aligned
    with the rows (it may contain NaN). ``report`` accumulates ingestion counts.
    """

    values: np.ndarray
    pollutant_names: list[str]
    timestamps: np.ndarray
    location: np.ndarray
    covariates: pd.DataFrame | None = None
    report: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise IngestError("values must be a 2-D array")
        n, J = self.values.shape
        if len(self.pollutant_names) != J:
            raise IngestError("pollutant_names length does not match column count")
        self.pollutant_names = list(self.pollutant_names)
        self.timestamps = np.asarray(self.timestamps, dtype="datetime64[m]")
        self.location = np.asarray(self.location, dtype=object)
        if len(self.timestamps) != n or len(self.location) != n:
            raise IngestError("timestamps/location must have one entry per row")
        if self.covariates is not None and len(self.covariates) != n:
            raise IngestError("covariates must have one row per matrix row")

    @property
    def shape(self):
        return self.values.shape

    def __len__(self):
        return self.values.shape[0]

    def with_values(self, values, pollutant_names=None, **report):
        return PollutantMatrix(
            values=values,
            pollutant_names=self.pollutant_names if pollutant_names is None else pollutant_names,
            timestamps=self.timestamps,
            location=self.location,
            covariates=self.covariates,
            report={**self.report, **report},
        )

    def take(self, rows):
        rows = np.asarray(rows)
        cov = None if self.covariates is None else self.covariates.iloc[rows].reset_index(drop=True)
        return PollutantMatrix(
            self.values[rows], self.pollutant_names, self.timestamps[rows],
            self.location[rows], cov, dict(self.report),
        )

    def to_frame(self):
        """Row metadata, pollutant values and covariates as one DataFrame."""
        frame = pd.DataFrame({"timestamp": self.timestamps, "location": self.location})
        frame = pd.concat(
            [frame, pd.DataFrame(self.values, columns=self.pollutant_names)], axis=1
        )
        if self.covariates is not None:
            frame = pd.concat([frame, self.covariates.reset_index(drop=True)], axis=1)
        return frame

    @classmethod
    def from_array(cls, values, pollutant_names=None, start="2023-01-01 00:00", location="L1"):
        """Wrap a bare array with synthetic minute timestamps."""
        values = np.asarray(values, dtype=float)
        n, J = values.shape
        names = pollutant_names or [f"P{j + 1}" for j in range(J)]
        stamps = np.datetime64(pd.Timestamp(start), "m") + np.arange(n).astype("timedelta64[m]")
        return cls(values, names, stamps, np.full(n, location, dtype=object))


@dataclass
class ScalingParams:
    """Per-pollutant minimum and 85th percentile in original units."""

    pollutant_names: list[str]
    minimum: np.ndarray
    q85: np.ndarray

    def to_dict(self):
        return {
            name: {"min": float(m), "q85": float(q)}
            for name, m, q in zip(self.pollutant_names, self.minimum, self.q85)
        }

    @classmethod
    def from_dict(cls, mapping):
        names = list(mapping)
        return cls(
            names,
            np.array([mapping[n]["min"] for n in names], dtype=float),
            np.array([mapping[n]["q85"] for n in names], dtype=float),
        )

    def subset(self, names):
        index = {n: i for i, n in enumerate(self.pollutant_names)}
        missing = [n for n in names if n not in index]
        if missing:
            raise IngestError(f"no scaling parameters for pollutant(s): {', '.join(missing)}")
        rows = [index[n] for n in names]
        return ScalingParams(list(names), self.minimum[rows], self.q85[rows])


# ---------------------------------------------------------------------------
# parsing and QA


def parse_table(path, schema: Schema, sep=","):
    """Read a delimited sensor table into a DataFrame with canonical column names.

    Missing cells stay NaN. Row order is preserved. Raises ``IngestError`` for
    unreadable files, bad timestamps and duplicate (timestamp, location) pairs.
    """
    if len(schema.pollutants) < 2:
        raise IngestError("schema must name at least two pollutant columns")
    try:
        raw = pd.read_csv(path, sep=sep, dtype=str, keep_default_na=False)
    except (OSError, pd.errors.ParserError, UnicodeDecodeError) as exc:
        raise IngestError(f"cannot read {path}: {exc}") from exc

    wanted = {"timestamp": schema.timestamp, "location": schema.location}
    wanted.update(schema.pollutants)
    wanted.update(schema.covariates)
    absent = [f"{canon} (column {col!r})" for canon, col in wanted.items() if col not in raw.columns]
    if absent:
        raise IngestError(f"missing required column(s): {', '.join(absent)}")

    stamps = pd.to_datetime(raw[schema.timestamp].str.strip(), format=TIMESTAMP_FORMAT, errors="coerce")
    bad = np.flatnonzero(stamps.isna().to_numpy())
    if bad.size:
        i = bad[0]
        raise IngestError(
            f"unparseable timestamp {raw[schema.timestamp].iloc[i]!r} at data row {i + 1}"
        )

    out = pd.DataFrame({"timestamp": stamps, "location": raw[schema.location].str.strip()})
    dup = out.duplicated(["timestamp", "location"], keep="first").to_numpy()
    if dup.any():
        i = int(np.flatnonzero(dup)[0])
        raise IngestError(
            f"duplicate (timestamp, location) = ({raw[schema.timestamp].iloc[i]}, "
            f"{out['location'].iloc[i]}) at data row {i + 1}"
        )
    for canon, col in {**schema.pollutants, **schema.covariates}.items():
        cells = raw[col].str.strip().replace("", np.nan)
        try:
            out[canon] = pd.to_numeric(cells, errors="raise").astype(float)
        except ValueError as exc:
            raise IngestError(f"non-numeric value in column {col!r}: {exc}") from exc
    out.attrs["pollutants"] = list(schema.pollutants)
    out.attrs["covariates"] = list(schema.covariates)
    return out


def derive_size_bins(records: pd.DataFrame):
    """Replace cumulative PM columns by non-overlapping size increments.

    Returns ``(records, clamp_counts)``. Negative increments are set to 0 and
    counted per bin; an increment is NaN when either operand is NaN.
    """
    absent = [c for c in CUMULATIVE_PM if c not in records.columns]
    if absent:
        raise IngestError(f"size-bin derivation needs column(s): {', '.join(absent)}")
    out = records.copy()
    clamp_counts = {}
    for lo, hi in zip(CUMULATIVE_PM[:-1], CUMULATIVE_PM[1:]):
        diff = records[hi] - records[lo]
        neg = (diff < 0).to_numpy()
        clamp_counts[f"{hi}-{lo}"] = int(neg.sum())
        out[f"{hi}-{lo}"] = diff.mask(diff < 0, 0.0)
    out = out.drop(columns=list(CUMULATIVE_PM[1:]))
    pollutants = records.attrs.get("pollutants")
    if pollutants is not None:
        renamed = []
        for p in pollutants:
            if p == "PM1":
                renamed.extend(SIZE_BINS)
            elif p not in CUMULATIVE_PM:
                renamed.append(p)
        out.attrs["pollutants"] = renamed
    # canonical ordering: bins first, then the rest in input order
    meta = [c for c in ("timestamp", "location") if c in out.columns]
    rest = [c for c in out.columns if c not in meta and c not in SIZE_BINS]
    out = out[meta + list(SIZE_BINS) + rest]
    return out, clamp_counts


def filter_complete(records: pd.DataFrame, required, outlier_rules=None):
    """Keep rows where every required pollutant is present and under its threshold.

    ``outlier_rules`` maps pollutant -> exclusive upper bound. Covariates are
    carried along untouched (they may still be missing).
    """
    required = list(required)
    outlier_rules = dict(outlier_rules or {})
    absent = [p for p in required + list(outlier_rules) if p not in records.columns]
    if absent:
        raise IngestError(f"unknown pollutant(s): {', '.join(absent)}")

    complete = records[required].notna().all(axis=1).to_numpy()
    keep = complete.copy()
    for name, bound in outlier_rules.items():
        keep &= ~(records[name].to_numpy() >= bound)
    if not keep.any():
        raise IngestError("no rows survive complete-case and outlier filtering")

    kept = records.loc[keep].reset_index(drop=True)
    meta_cols = {"timestamp", "location"}
    covariate_names = [
        c for c in records.attrs.get("covariates", [])
        if c in records.columns and c not in required
    ]
    if "covariates" not in records.attrs:
        covariate_names = [c for c in records.columns if c not in meta_cols and c not in required]
    report = {
        "rows_in": int(len(records)),
        "dropped_incomplete": int((~complete).sum()),
        "dropped_outlier": int((complete & ~keep).sum()),
        "rows_out": int(keep.sum()),
    }
    return PollutantMatrix(
        values=kept[required].to_numpy(dtype=float),
        pollutant_names=required,
        timestamps=kept["timestamp"].to_numpy(),
        location=kept["location"].to_numpy(dtype=object),
        covariates=kept[covariate_names].reset_index(drop=True) if covariate_names else None,
        report=report,
    )


# ---------------------------------------------------------------------------
# scaling


class QuantileScaler(TransformerMixin, BaseEstimator):
    """Offset-and-scale each column by its minimum and upper quantile.

    ``y = (x - min(m, 0)) / (q - m)`` where ``m`` is the column minimum and
    ``q`` the ``quantile`` percentile (linear interpolation between order
    statistics). The shift only applies when ``m < 0``.

    Parameters
    ----------
    quantile : float, default=85.0
        Percentile used as the upper reference point.
    """

    def __init__(self, quantile=85.0):
        self.quantile = quantile

    def fit(self, X, y=None):
        X = check_array(X, dtype=float)
        self.n_features_in_ = X.shape[1]
        self.min_ = X.min(axis=0)
        self.upper_ = np.percentile(X, self.quantile, axis=0, method="linear")
        spread = self.upper_ - self.min_
        # a spread lost in rounding at the column's magnitude is as bad as zero
        resolution = np.finfo(float).eps * np.abs(X).max(axis=0)
        bad = np.flatnonzero(~(spread > resolution))
        if bad.size:
            raise IngestError(
                f"degenerate column(s) {bad.tolist()}: upper quantile does not exceed the minimum"
            )
        self.shift_ = np.minimum(self.min_, 0.0)
        self.scale_ = spread
        return self

    def transform(self, X):
        check_is_fitted(self, "scale_")
        X = check_array(X, dtype=float)
        return (X - self.shift_) / self.scale_

    def inverse_transform(self, X):
        check_is_fitted(self, "scale_")
        X = check_array(X, dtype=float)
        return X * self.scale_ + self.shift_


def fit_scaling(matrix: PollutantMatrix) -> ScalingParams:
    """Per-pollutant minimum and 85th percentile of an untransformed matrix."""
    if len(matrix) < 1:
        raise IngestError("cannot fit scaling on an empty matrix")
    try:
        scaler = QuantileScaler().fit(matrix.values)
    except IngestError:
        X = matrix.values
        spread = np.percentile(X, 85, axis=0) - X.min(axis=0)
        resolution = np.finfo(float).eps * np.abs(X).max(axis=0)
        names = [n for n, s, r in zip(matrix.pollutant_names, spread, resolution) if not s > r]
        raise IngestError(f"degenerate pollutant(s) with q85 <= min: {', '.join(names)}") from None
    return ScalingParams(list(matrix.pollutant_names), scaler.min_, scaler.upper_)


def _scaler_from(params: ScalingParams):
    scaler = QuantileScaler()
    scaler.n_features_in_ = len(params.pollutant_names)
    scaler.min_ = params.minimum
    scaler.upper_ = params.q85
    scaler.shift_ = np.minimum(params.minimum, 0.0)
    scaler.scale_ = params.q85 - params.minimum
    return scaler


def apply_scaling(matrix: PollutantMatrix, params: ScalingParams) -> PollutantMatrix:
    params = params.subset(matrix.pollutant_names)
    values = _scaler_from(params).transform(matrix.values)
    # values below the fitted minimum (new data) would go negative
    np.maximum(values, 0.0, out=values)
    return matrix.with_values(values, scaling=params.to_dict())


def invert_scaling(matrix: PollutantMatrix, params: ScalingParams) -> PollutantMatrix:
    params = params.subset(matrix.pollutant_names)
    return matrix.with_values(_scaler_from(params).inverse_transform(matrix.values))


def summarize(data) -> pd.DataFrame:
    """Count, mean, std, median, min, max, 15th and 85th percentiles per pollutant."""
    if isinstance(data, PollutantMatrix):
        frame = pd.DataFrame(data.values, columns=data.pollutant_names)
    else:
        names = data.attrs.get("pollutants") or [
            c for c in data.columns if c not in ("timestamp", "location")
        ]
        frame = data[names]
    if len(frame) == 0:
        raise IngestError("cannot summarize an empty table")
    rows = {}
    for name in frame.columns:
        col = frame[name].dropna().to_numpy(dtype=float)
        if col.size == 0:
            rows[name] = dict(count=0)
            continue
        rows[name] = dict(
            count=col.size,
            mean=col.mean(),
            std=col.std(ddof=1) if col.size > 1 else np.nan,
            min=col.min(),
            p15=np.percentile(col, 15),
            median=np.median(col),
            p85=np.percentile(col, 85),
            max=col.max(),
        )
    table = pd.DataFrame.from_dict(rows, orient="index")
    table.index.name = "pollutant"
    return table


# ---------------------------------------------------------------------------
# file formats


def _meta_path(path):
    path = Path(path)
    return path.with_name(path.stem + ".meta.json")


def write_matrix(matrix: PollutantMatrix, path, extra_meta=None):
    """Write the matrix as CSV plus a ``<stem>.meta.json`` sidecar."""
    path = Path(path)
    frame = matrix.to_frame()
    frame["timestamp"] = pd.to_datetime(frame["timestamp"]).dt.strftime(TIMESTAMP_FORMAT)
    frame.to_csv(path, index=False, lineterminator="\n")
    meta = {
        "pollutants": matrix.pollutant_names,
        "covariates": [] if matrix.covariates is None else list(matrix.covariates.columns),
        "report": matrix.report,
    }
    if extra_meta:
        meta.update(extra_meta)
    _meta_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def read_matrix(path) -> PollutantMatrix:
    """Inverse of :func:`write_matrix`. Without a sidecar every non-metadata
    column is taken as a pollutant."""
    path = Path(path)
    frame = pd.read_csv(path)
    meta_file = _meta_path(path)
    if meta_file.exists():
        meta = json.loads(meta_file.read_text())
        pollutants, covariates = meta["pollutants"], meta.get("covariates", [])
        report = meta.get("report", {})
    else:
        pollutants = [c for c in frame.columns if c not in ("timestamp", "location")]
        covariates, report = [], {}
    absent = [c for c in ["timestamp", "location", *pollutants, *covariates] if c not in frame.columns]
    if absent:
        raise IngestError(f"{path}: missing column(s) {', '.join(absent)}")
    values = frame[pollutants].to_numpy(dtype=float)
    if np.isnan(values).any():
        raise IngestError(f"{path}: pollutant matrix contains missing values")
    return PollutantMatrix(
        values=values,
        pollutant_names=list(pollutants),
        timestamps=pd.to_datetime(frame["timestamp"], format=TIMESTAMP_FORMAT).to_numpy(),
        location=frame["location"].astype(str).to_numpy(dtype=object),
        covariates=frame[covariates].astype(float) if covariates else None,
        report=report,
    )
