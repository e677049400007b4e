"""Trade-tape ingestion, diurnal adjustment, and residual diagnostics.

Raw durations are differences of within-session timestamps; overnight gaps
never form durations. The deterministic time-of-day pattern is estimated by
a least-squares cubic regression spline on log-durations, exponentiated and
normalized to session average one, and divided out of the raw durations
before model fitting.
"""

import json
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad
from scipy.interpolate import BSpline

from .errors import ConfigError, IngestionError, SolverError
from .inference import gaussian_quantile
from .model import DurationSeries

DEFAULT_SESSION_SECONDS = 23400.0  # 9:30 to 16:00

TIE_RULES = ("collapse", "drop")


@dataclass
class TradeTape:
    """Per-day trade timestamps, in seconds since each session open."""

    days: list
    timestamps: list
    session_length: float = DEFAULT_SESSION_SECONDS

    def __post_init__(self):
        if len(self.days) != len(self.timestamps):
            raise ConfigError("days and timestamps must align")
        if not (self.session_length > 0):
            raise ConfigError("session_length must be positive")
        self.timestamps = [np.asarray(ts, dtype=float) for ts in self.timestamps]
        for day, ts in zip(self.days, self.timestamps):
            if ts.size and (ts.min() < 0 or ts.max() > self.session_length):
                raise IngestionError(f"day {day}: timestamps outside [0, {self.session_length}]")

    @property
    def n_days(self):
        return len(self.days)

    @classmethod
    def from_csv(cls, path, session_length=DEFAULT_SESSION_SECONDS):
        """Load ``day,timestamp_seconds`` rows; rows must be grouped by day."""
        days, stamps = [], []
        current, bucket = None, []
        bad_rows = []
        with open(path) as fh:
            header = fh.readline().strip().lower().split(",")
            if header[:2] != ["day", "timestamp_seconds"]:
                raise IngestionError(f"expected header day,timestamp_seconds, got {header}")
            for lineno, line in enumerate(fh, start=2):
                line = line.strip()
                if not line:
                    continue
                day_s, ts_s = line.split(",")[:2]
                ts = float(ts_s)
                if current is None or day_s != current:
                    if current is not None:
                        days.append(current)
                        stamps.append(np.array(bucket))
                    current, bucket = day_s, []
                if bucket and ts < bucket[-1]:
                    bad_rows.append(lineno)
                bucket.append(ts)
        if current is not None:
            days.append(current)
            stamps.append(np.array(bucket))
        if bad_rows:
            raise IngestionError(
                f"timestamps decrease within a day at rows {bad_rows[:20]}", rows=bad_rows
            )
        return cls(days, stamps, session_length)

    @classmethod
    def from_epoch_csv(cls, path, session_spec_path):
        """Load ``epoch_ns`` rows using a JSON session specification.

        The spec file holds ``{"session_length": float, "days": [{"day": ...,
        "open_epoch_ns": int}, ...]}``; trades outside every session window
        are dropped with a warning.
        """
        with open(session_spec_path) as fh:
            spec = json.load(fh)
        session_length = float(spec.get("session_length", DEFAULT_SESSION_SECONDS))
        opens = [(d["day"], int(d["open_epoch_ns"])) for d in spec["days"]]
        raw = np.genfromtxt(path, delimiter=",", names=True, dtype=np.int64)
        if raw.shape == ():
            raw = raw.reshape(1)
        if "epoch_ns" not in (raw.dtype.names or ()):
            raise IngestionError("expected an epoch_ns column")
        epochs = np.sort(np.asarray(raw["epoch_ns"], dtype=np.int64))
        days, stamps, used = [], [], 0
        for day, open_ns in opens:
            rel = (epochs - open_ns) / 1e9
            mask = (rel >= 0) & (rel <= session_length)
            days.append(day)
            stamps.append(rel[mask])
            used += int(mask.sum())
        if used < epochs.size:
            warnings.warn(f"dropped {epochs.size - used} trades outside session windows", stacklevel=2)
        return cls(days, stamps, session_length)


@dataclass
class RawDurations:
    """Durations with their end-of-interval time-of-day stamps."""

    values: np.ndarray
    time_of_day: np.ndarray
    day_index: np.ndarray
    n_days: int
    session_length: float

    @property
    def n(self):
        return int(self.values.size)


def durations_from_tape(tape, tie_rule="collapse"):
    """Construct raw durations from a tape, one stream per day.

    Simultaneous trades collapse to a single event under ``"collapse"``;
    ``"drop"`` keeps the event list but removes the zero durations, which
    yields the same positive durations. Each duration is stamped with the
    time of day at which it ends.
    """
    if tie_rule not in TIE_RULES:
        raise ConfigError(f"tie_rule must be one of {TIE_RULES}, got {tie_rule!r}")
    values, stamps, day_idx = [], [], []
    for d, ts in enumerate(tape.timestamps):
        if ts.size and np.any(np.diff(ts) < 0):
            rows = list(np.nonzero(np.diff(ts) < 0)[0] + 1)
            raise IngestionError(f"day {tape.days[d]}: non-monotone timestamps", rows=rows)
        if ts.size < 2:
            continue
        if tie_rule == "collapse":
            uniq = np.unique(ts)
            diffs = np.diff(uniq)
            ends = uniq[1:]
        else:
            diffs = np.diff(ts)
            keep = diffs > 0
            diffs = diffs[keep]
            ends = ts[1:][keep]
        values.append(diffs)
        stamps.append(ends)
        day_idx.append(np.full(diffs.size, d, dtype=np.int64))
    if not values:
        raise IngestionError("tape produced no durations")
    return RawDurations(
        values=np.concatenate(values),
        time_of_day=np.concatenate(stamps),
        day_index=np.concatenate(day_idx),
        n_days=tape.n_days,
        session_length=tape.session_length,
    )


@dataclass
class DiurnalModel:
    """Positive, twice continuously differentiable time-of-day factor.

    The factor is ``exp(spline(tod) - log_norm)`` with the normalization
    chosen so its session average equals one.
    """

    knots: np.ndarray
    coefficients: np.ndarray
    log_norm: float
    session_length: float

    def _spline(self):
        return BSpline(np.asarray(self.knots), np.asarray(self.coefficients), 3, extrapolate=False)

    def curve(self, time_of_day):
        tod = np.asarray(time_of_day, dtype=float)
        if np.any(tod < 0) or np.any(tod > self.session_length):
            raise ConfigError("time of day outside the session")
        out = np.exp(self._spline()(tod) - self.log_norm)
        return out if out.ndim else float(out)

    def session_average(self):
        val, _ = quad(
            lambda u: math.exp(float(self._spline()(u)) - self.log_norm),
            0.0, self.session_length, limit=400, epsabs=1e-12, epsrel=1e-12,
        )
        return val / self.session_length

    def to_dict(self):
        return {
            "schema_version": "iacd-diurnal-1",
            "knots": [float(v) for v in self.knots],
            "coefficients": [float(v) for v in self.coefficients],
            "log_norm": self.log_norm,
            "session_length": self.session_length,
        }

    def to_json(self, path=None, indent=None):
        text = json.dumps(self.to_dict(), indent=indent)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_dict(cls, d):
        if d.get("schema_version") != "iacd-diurnal-1":
            raise ConfigError(f"unsupported diurnal schema {d.get('schema_version')!r}")
        return cls(
            knots=np.array(d["knots"]),
            coefficients=np.array(d["coefficients"]),
            log_norm=d["log_norm"],
            session_length=d["session_length"],
        )


def _knot_points(session_length, spacing):
    pts = list(np.arange(0.0, session_length, spacing))
    pts.append(session_length)
    if len(pts) < 2:
        raise ConfigError("knot spacing leaves no interval")
    return np.asarray(pts)


def fit_diurnal(raw, knot_spacing=1800.0, min_per_interval=10):
    """Least-squares cubic spline of log-duration on time of day.

    Knots sit every ``knot_spacing`` seconds across the session including
    both endpoints. Intervals holding fewer than ``min_per_interval``
    observations are merged into their neighbors (with a warning) before
    fitting. The exponentiated curve is normalized to session average one.
    """
    if raw.n < 4:
        raise ConfigError("too few durations to fit a diurnal pattern")
    pts = _knot_points(raw.session_length, knot_spacing)
    stamps = raw.time_of_day
    while len(pts) > 2:
        counts, _ = np.histogram(stamps, bins=pts)
        if counts.min() >= min_per_interval:
            break
        j = int(np.argmin(counts))
        # merge the sparse interval with a neighbor by removing an interior knot
        drop = j + 1 if j + 1 < len(pts) - 1 else j
        warnings.warn(
            f"only {counts[j]} observations in [{pts[j]:.0f}, {pts[j+1]:.0f}); "
            f"removing knot at {pts[drop]:.0f}",
            stacklevel=2,
        )
        pts = np.delete(pts, drop)
    interior = pts[1:-1]
    knots = np.concatenate(([pts[0]] * 4, interior, [pts[-1]] * 4))
    design = BSpline.design_matrix(stamps, knots, 3).toarray()
    y = np.log(raw.values)
    coef, _, rank, _ = np.linalg.lstsq(design, y, rcond=None)
    if rank < design.shape[1]:
        raise SolverError(
            f"spline design matrix rank {rank} < {design.shape[1]}; widen the knot spacing"
        )
    model = DiurnalModel(knots=knots, coefficients=coef, log_norm=0.0,
                         session_length=raw.session_length)
    avg = model.session_average()
    model.log_norm = math.log(avg)
    return model


@dataclass
class AdjustedDurations:
    """Diurnally adjusted durations and the series handed to estimation."""

    series: DurationSeries
    values: np.ndarray
    time_of_day: np.ndarray
    day_index: np.ndarray

    def write_csv(self, path):
        with open(path, "w") as fh:
            fh.write("i,x,time_of_day,day\n")
            for i, (x, tod, d) in enumerate(zip(self.values, self.time_of_day, self.day_index)):
                fh.write(f"{i},{x:.17g},{tod:.17g},{int(d)}\n")


def day_start_indices(adjusted):
    """Observation indices (into the estimation series) opening a new day.

    Suitable as ``FitOptions.reset_indices`` when the conditional-duration
    filter should restart at each session open instead of carrying state
    across the overnight gap.
    """
    changes = np.nonzero(np.diff(adjusted.day_index) != 0)[0] + 1
    # values[0] seeds the series, so position v in values is observation v - 1
    return tuple(int(v - 1) for v in changes if v - 1 >= 1)


def diurnal_adjust(raw, model):
    """Divide raw durations by the fitted time-of-day factor.

    The first adjusted duration becomes the initial value of the returned
    series; the span is the full calendar length ``n_days * session_length``.
    """
    factor = model.curve(raw.time_of_day)
    adjusted = raw.values / factor
    if adjusted.size < 2:
        raise ConfigError("need at least two adjusted durations")
    t_span = raw.n_days * raw.session_length
    series = DurationSeries(x0=float(adjusted[0]), x=adjusted[1:], t_span=t_span)
    return AdjustedDurations(
        series=series, values=adjusted, time_of_day=raw.time_of_day, day_index=raw.day_index
    )


@dataclass
class AcfResult:
    lags: np.ndarray
    values: np.ndarray
    band: float
    n: int

    def outside_band(self):
        """Lags (excluding zero) whose autocorrelation leaves the band."""
        mask = np.abs(self.values[1:]) > self.band
        return self.lags[1:][mask]

    def write_csv(self, path):
        with open(path, "w") as fh:
            fh.write("lag,acf,band\n")
            for lag, v in zip(self.lags, self.values):
                fh.write(f"{int(lag)},{v:.17g},{self.band:.17g}\n")


def acf(values, max_lag, level=0.95):
    """Sample autocorrelation with a symmetric white-noise confidence band.

    Mean-corrected with the lag-zero autocovariance as denominator; the band
    is ``+- z_{(1+level)/2} / sqrt(n)``.
    """
    x = np.asarray(values, dtype=float)
    n = x.size
    if max_lag < 1:
        raise ConfigError("max_lag must be at least 1")
    if n <= max_lag:
        raise ConfigError(f"need more observations than lags, got n={n}, max_lag={max_lag}")
    d = x - x.mean()
    denom = float(np.dot(d, d))
    if denom == 0.0:
        raise ConfigError("autocorrelation is undefined for a constant series")
    vals = np.empty(max_lag + 1)
    vals[0] = 1.0
    for k in range(1, max_lag + 1):
        vals[k] = float(np.dot(d[:-k], d[k:])) / denom
    band = gaussian_quantile(0.5 + level / 2.0) / math.sqrt(n)
    return AcfResult(lags=np.arange(max_lag + 1), values=vals, band=band, n=n)
