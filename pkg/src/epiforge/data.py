"""CSV ingestion, per-region scaling, weekly aggregation, and the synthetic
world generator used throughout the test harness.

One row per (region, date), ISO-8601 dates, daily cadence.  Scaling
statistics are always fit on an explicit training slice so the rolling
protocol can prove it never peeked past the prediction week.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .ode import Seirm, Sirs, simulate

logger = logging.getLogger("epiforge.data")

__all__ = [
    "RegionDataset",
    "TrainingView",
    "Scaler",
    "SchemaError",
    "ContiguityError",
    "load_csv",
    "write_csv",
    "standard_scale",
    "weekly_target",
    "make_synthetic_world",
]


class SchemaError(ValueError):
    """The CSV does not declare a required column."""


class ContiguityError(ValueError):
    """Dates are not a strictly increasing daily sequence."""


@dataclass
class Scaler:
    """Affine standardization (x - mean) / std with population std, fit on a
    training slice only.  Zero-variance columns are dropped, not divided."""

    mean: np.ndarray
    std: np.ndarray
    kept: np.ndarray  # boolean mask of retained columns
    fit_stop: int  # exclusive end of the slice the stats were fit on

    def transform(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return (x[:, self.kept] - self.mean[self.kept]) / self.std[self.kept]

    def inverse(self, z: np.ndarray) -> np.ndarray:
        return z * self.std[self.kept] + self.mean[self.kept]


def standard_scale(series: np.ndarray, training_slice: slice):
    """Standardize columns using stats from ``training_slice`` only.

    Returns (scaled, scaler); constant columns (sigma = 0 on the slice) are
    dropped from the output with a logged flag.
    """
    x = np.asarray(series, dtype=np.float64)
    squeeze = x.ndim == 1
    x2 = x[:, None] if squeeze else x
    sub = x2[training_slice]
    mean = sub.mean(axis=0)
    std = sub.std(axis=0)  # population std
    kept = std > 0.0
    for j in np.flatnonzero(~kept):
        logger.info("dropping constant feature column %d (zero variance on the training slice)", j)
    scaler = Scaler(mean=mean, std=std, kept=kept, fit_stop=training_slice.stop)
    scaled = scaler.transform(x2)
    return (scaled[:, 0] if squeeze and kept[0] else scaled), scaler


def weekly_target(daily: np.ndarray, mode: str) -> np.ndarray:
    """Weekly series from daily values: 7-day sums for covid, 7-day averages
    for flu.  A trailing partial week is excluded."""
    daily = np.asarray(daily, dtype=np.float64)
    n_weeks = daily.size // 7
    blocks = daily[: n_weeks * 7].reshape(n_weeks, 7)
    if mode == "covid":
        return blocks.sum(axis=1)
    if mode == "flu":
        return blocks.mean(axis=1)
    raise ValueError(f"unknown mode {mode!r}")


@dataclass
class RegionDataset:
    """Daily multivariate features and target for one region."""

    region: str
    dates: np.ndarray  # datetime64[D], strictly daily
    X: np.ndarray  # (T, D_x) raw features
    Y: np.ndarray  # (T,) raw daily target (new deaths / ILI)
    n_pop: float
    mode: str = "covid"
    feature_names: list = field(default_factory=list)
    outpatient_ratio: float = 0.05
    imputed: np.ndarray = None  # (T, D_x) bool, True where values were filled

    def __post_init__(self):
        if self.X.ndim != 2 or self.X.shape[0] != self.Y.size:
            raise ValueError("feature/target length mismatch")
        deltas = np.diff(self.dates).astype("timedelta64[D]").astype(int)
        if deltas.size and not np.all(deltas == 1):
            bad = self.dates[1:][deltas != 1][0]
            raise ContiguityError(f"dates are not contiguous around {bad}")
        if not np.all(np.isfinite(self.X)) or not np.all(np.isfinite(self.Y)):
            raise ValueError("NaNs must be imputed before constructing a dataset")

    @property
    def n_days(self) -> int:
        return self.Y.size

    @property
    def n_weeks(self) -> int:
        return self.n_days // 7

    def weekly_truth(self) -> np.ndarray:
        return weekly_target(self.Y, self.mode)

    def model(self):
        if self.mode == "covid":
            return Seirm(self.n_pop)
        return Sirs(self.n_pop, outpatient_ratio=self.outpatient_ratio)

    def view(self, through_week: int) -> "TrainingView":
        """Training window covering weeks 0..through_week inclusive."""
        n_train = (through_week + 1) * 7
        if n_train > self.n_days:
            raise ValueError(
                f"week {through_week} needs {n_train} days, dataset has {self.n_days}"
            )
        return TrainingView(self, n_train)


class TrainingView:
    """Everything a trainer may see for one prediction week.

    Scaling statistics are fit on the window itself; ``max_date`` and
    ``scaler_fit_stop`` exist so tests can assert nothing post-dates the
    prediction week.
    """

    def __init__(self, dataset: RegionDataset, n_train: int):
        self.dataset = dataset
        self.region = dataset.region
        self.mode = dataset.mode
        self.n_pop = dataset.n_pop
        self.n_train = n_train
        self.dates = dataset.dates[:n_train]

        sl = slice(0, n_train)
        self.X_scaled, self.feature_scaler = standard_scale(dataset.X[:n_train], sl)
        self.mask = np.ones(n_train, dtype=bool)

        self.Y = dataset.Y[:n_train].copy()
        if self.mode == "covid":
            observable = np.cumsum(self.Y)  # cumulative deaths
        else:
            observable = self.Y
        self.observable = observable
        obs_scaled, self.target_scaler = standard_scale(observable, sl)
        if obs_scaled.ndim == 2:  # constant observable was dropped
            raise ValueError("observable is constant over the window; nothing to fit")
        self.obs_scaled = obs_scaled

    @property
    def max_date(self):
        return self.dates[-1]

    @property
    def scaler_fit_stop(self) -> int:
        return self.feature_scaler.fit_stop

    # continuous time axis: end-of-day times 1..T in days, normalized by T
    @property
    def span_days(self) -> float:
        return float(self.n_train)

    def day_times(self) -> np.ndarray:
        return (np.arange(self.n_train) + 1.0) / self.span_days

    def future_week_times(self, horizons: int) -> np.ndarray:
        """Normalized end-of-week times for horizons 0..K (0 = window end)."""
        t_end = self.n_train
        return (t_end + 7.0 * np.arange(horizons + 1)) / self.span_days

    def scale_observable(self, value):
        s = self.target_scaler
        return (value - s.mean[0]) / s.std[0]

    def unscale_observable(self, value):
        s = self.target_scaler
        return value * s.std[0] + s.mean[0]

    def weekly_truth(self) -> np.ndarray:
        return weekly_target(self.Y, self.mode)


# -- CSV ingestion -------------------------------------------------------------


def load_csv(path, config) -> dict:
    """Parse a long-form CSV into per-region datasets.

    ``config`` is a :class:`epiforge.config.DataConfig`.  Missing feature
    values are forward-filled, then zero-filled at the series start; each
    imputation is logged.  Gaps or duplicates in the date column are errors.
    """
    df = pd.read_csv(path, float_precision="round_trip")
    need = [config.date_column, config.region_column, config.target_column]
    for col in need:
        if col not in df.columns:
            raise SchemaError(f"missing required column {col!r}")
    feat_cols = list(config.feature_columns) or [c for c in df.columns if c not in need]
    for col in feat_cols:
        if col not in df.columns:
            raise SchemaError(f"missing feature column {col!r}")

    out = {}
    for region, grp in df.groupby(config.region_column, sort=True):
        if config.regions and region not in config.regions:
            continue
        grp = grp.sort_values(config.date_column)
        dates = grp[config.date_column].to_numpy(dtype="datetime64[D]")
        dup = pd.Series(dates).duplicated()
        if dup.any():
            raise ContiguityError(f"duplicate date {dates[dup.to_numpy()][0]} in region {region}")
        deltas = np.diff(dates).astype(int)
        if deltas.size and not np.all(deltas == 1):
            raise ContiguityError(
                f"date gap before {dates[1:][deltas != 1][0]} in region {region}"
            )
        x = grp[feat_cols].to_numpy(dtype=np.float64)
        imputed = ~np.isfinite(x)
        if imputed.any():
            filled = pd.DataFrame(x).ffill().fillna(0.0).to_numpy()
            for t, j in zip(*np.nonzero(imputed)):
                logger.info("imputed %s[%s, %s] on %s", region, t, feat_cols[j], dates[t])
            x = filled
        y = grp[config.target_column].to_numpy(dtype=np.float64)
        if not np.all(np.isfinite(y)):
            raise SchemaError(f"target column has missing values in region {region}")
        if region not in config.populations:
            raise SchemaError(f"population for region {region!r} missing from config")
        out[region] = RegionDataset(
            region=str(region),
            dates=dates,
            X=x,
            Y=y,
            n_pop=float(config.populations[region]),
            mode=config.mode,
            feature_names=feat_cols,
            outpatient_ratio=config.outpatient_ratio,
            imputed=imputed,
        )
    if not out:
        raise SchemaError("no regions matched the configuration")
    return out


def write_csv(path, datasets: dict, config) -> None:
    """Inverse of :func:`load_csv`; float64 repr survives the round trip."""
    frames = []
    for ds in datasets.values():
        frame = pd.DataFrame(ds.X, columns=ds.feature_names)
        frame.insert(0, config.target_column, ds.Y)
        frame.insert(0, config.region_column, ds.region)
        frame.insert(0, config.date_column, ds.dates.astype(str))
        frames.append(frame)
    pd.concat(frames).to_csv(path, index=False, float_format=None)


# -- synthetic world ------------------------------------------------------------


def _trailing_week_sum(x: np.ndarray) -> np.ndarray:
    c = np.concatenate([[0.0], np.cumsum(x)])
    lo = np.maximum(np.arange(x.size) - 6, 0)
    return c[np.arange(x.size) + 1] - c[lo]


def make_synthetic_world(
    omega,
    n_pop: float,
    n_days: int,
    noise_scale: float,
    seed: int,
    switch_day: int = None,
    omega2=None,
    mode: str = "covid",
    region: str = "SYN",
    s0=None,
    outpatient_ratio: float = 0.05,
):
    """Simulated epidemic with surveillance-style features and hidden truth.

    The observable gets Gaussian noise sized so a 7-day aggregate carries
    roughly ``noise_scale`` relative noise; features are deterministic,
    lagged/smoothed transforms of the hidden states (they lead the target).
    Returns (RegionDataset, truth) where truth holds the state trajectory,
    the parameter schedule, and the noiseless daily observable.
    """
    rng = np.random.default_rng(seed)
    omega = np.asarray(omega, dtype=np.float64)
    schedule = np.tile(omega, (n_days, 1))
    if switch_day is not None:
        if omega2 is None:
            raise ValueError("switch_day given without omega2")
        schedule[switch_day:] = np.asarray(omega2, dtype=np.float64)

    if mode == "covid":
        model = Seirm(n_pop)
        if s0 is None:
            i0 = max(n_pop * 2e-4, 1.0)
            s0 = np.array([n_pop - 2.5 * i0, 1.5 * i0, i0, 0.0, 0.0])
        traj = simulate(model, s0, schedule, n_days)
        true_daily = np.diff(traj[:, 4])  # new deaths per day
        level = _trailing_week_sum(true_daily)
        noise = rng.normal(0.0, 1.0, size=n_days) * (noise_scale * level / np.sqrt(7.0))
        y = np.maximum(true_daily + noise, 0.0)
    elif mode == "flu":
        model = Sirs(n_pop, outpatient_ratio=outpatient_ratio)
        if s0 is None:
            i0 = max(n_pop * 1e-3, 1.0)
            s0 = np.array([n_pop - i0, i0, 0.0])
        traj = simulate(model, s0, schedule, n_days)
        frac = traj / n_pop
        true_daily = np.array(
            [model.observable_fraction(frac[k + 1], schedule[k]) for k in range(n_days)]
        )
        noise = rng.normal(0.0, 1.0, size=n_days) * (noise_scale * np.abs(true_daily))
        y = np.maximum(true_daily + noise, 0.0)
    else:
        raise ValueError(f"unknown mode {mode!r}")

    # deterministic surveillance-style signals from the hidden states
    def lag(series, k):
        return np.concatenate([np.full(k, series[0]), series[:-k]]) if k else series

    def smooth7(series):
        c = np.concatenate([[0.0], np.cumsum(series)])
        lo = np.maximum(np.arange(series.size) - 6, 0)
        return (c[np.arange(series.size) + 1] - c[lo]) / np.minimum(np.arange(series.size) + 1, 7)

    states = traj[1:]  # end-of-day states, aligned with y
    if mode == "covid":
        incidence = schedule[:, 0] * states[:, 0] * states[:, 2] / n_pop**2
        x1 = smooth7(lag(incidence, 3))
        x2 = lag(states[:, 2] / n_pop, 5)
        x3 = smooth7(lag(states[:, 1] / n_pop, 1))
    else:
        incidence = schedule[:, 0] * states[:, 0] * states[:, 1] / n_pop**2
        x1 = smooth7(lag(incidence, 3))
        x2 = lag(states[:, 1] / n_pop, 5)
        x3 = smooth7(states[:, 1] / n_pop)
    X = np.column_stack([x1, x2, x3])

    dates = np.datetime64("2020-06-01") + np.arange(n_days)
    ds = RegionDataset(
        region=region,
        dates=dates.astype("datetime64[D]"),
        X=X,
        Y=y,
        n_pop=float(n_pop),
        mode=mode,
        feature_names=["sig_incidence", "sig_prevalence", "sig_early"],
        outpatient_ratio=outpatient_ratio,
        imputed=np.zeros_like(X, dtype=bool),
    )
    truth = {
        "trajectory": traj,
        "schedule": schedule,
        "true_daily": true_daily,
        "s0": np.asarray(s0, dtype=np.float64),
    }
    return ds, truth
