"""Rolling real-time evaluation and the error/correlation metrics.

Each prediction week retrains every model on data through that week only,
forecasts K weekly targets, and scores against revised truth.  Error metrics
pool records; the correlation metric is computed per (region, week) over the
horizon sequence and aggregated median-over-weeks, then mean-over-regions.
COVID mode guards the NR1/ND denominators with +1 death; an undefined metric
(zero range, zero variance) propagates as NaN and is skipped in aggregation.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, asdict

import numpy as np

from .baselines import (
    run_ar,
    run_ensembling,
    run_generation,
    run_lasso,
    run_mechanistic,
    run_persistence,
    run_regularization,
    run_rnn,
)
from .calibration import calibrate_ode
from .training import EinnTrainer

logger = logging.getLogger("epiforge.evaluation")

__all__ = [
    "ForecastRecord",
    "nr1",
    "nr2",
    "nd",
    "pearson_per_week",
    "aggregate_scores",
    "rolling_protocol",
    "records_to_jsonl",
    "records_from_jsonl",
]


@dataclass
class ForecastRecord:
    region: str
    model: str
    week: int  # prediction week index (training ran through this week)
    horizon: int  # 1..K weeks ahead
    y_hat: float
    y_true: float
    flagged: bool = False


def _arrays(records):
    y = np.array([r.y_true for r in records], dtype=np.float64)
    yh = np.array([r.y_hat for r in records], dtype=np.float64)
    return y, yh


def nr1(records, mode: str = "covid") -> float:
    """RMSE normalized by mean |y|; covid adds the +1-death guard."""
    if not records:
        return np.nan
    y, yh = _arrays(records)
    rmse = float(np.sqrt(np.mean((y - yh) ** 2)))
    denom = float(np.mean(np.abs(y)))
    if mode == "covid":
        denom += 1.0
    return rmse / denom if denom > 0 else np.nan


def nr2(records) -> float:
    """RMSE normalized by the observed range; NaN when the range is zero."""
    if not records:
        return np.nan
    y, yh = _arrays(records)
    rmse = float(np.sqrt(np.mean((y - yh) ** 2)))
    denom = float(y.max() - y.min())
    return rmse / denom if denom > 0 else np.nan


def nd(records, mode: str = "covid") -> float:
    """Sum of absolute deviations over sum of |y|; covid adds +1 death."""
    if not records:
        return np.nan
    y, yh = _arrays(records)
    denom = float(np.abs(y).sum())
    if mode == "covid":
        denom += 1.0
    return float(np.abs(y - yh).sum()) / denom if denom > 0 else np.nan


def pearson_per_week(y_hat, y_true) -> float:
    """Correlation across the K-horizon sequence of one prediction week;
    NaN when either sequence is constant."""
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y_true = np.asarray(y_true, dtype=np.float64)
    a = y_hat - y_hat.mean()
    b = y_true - y_true.mean()
    na, nb = np.sqrt((a * a).sum()), np.sqrt((b * b).sum())
    if na == 0.0 or nb == 0.0:
        return np.nan
    return float((a * b).sum() / (na * nb))


def aggregate_scores(records, mode="covid", short=(1, 2, 3, 4), long=(5, 6, 7, 8)):
    """Score table rows per (model, region) plus pooled 'ALL' rows per model.

    Error metrics pool records over the short/long horizon splits; PC is the
    median across weeks within a region and the mean of those medians across
    regions, skipping undefined entries.
    """
    short, long = set(short), set(long)
    by_model: dict = {}
    for r in records:
        by_model.setdefault(r.model, {}).setdefault(r.region, []).append(r)

    rows = []
    for model, regions in sorted(by_model.items()):
        region_medians = []
        all_records = []
        for region, recs in sorted(regions.items()):
            all_records.extend(recs)
            pcs = []
            weeks = sorted({r.week for r in recs})
            for w in weeks:
                seq = sorted((r for r in recs if r.week == w), key=lambda r: r.horizon)
                pcs.append(pearson_per_week([r.y_hat for r in seq], [r.y_true for r in seq]))
            defined = [p for p in pcs if not np.isnan(p)]
            pc_median = float(np.median(defined)) if defined else np.nan
            region_medians.append(pc_median)
            rows.append(_score_row(model, region, recs, mode, short, long, pc_median))
        defined = [p for p in region_medians if not np.isnan(p)]
        pc_all = float(np.mean(defined)) if defined else np.nan
        rows.append(_score_row(model, "ALL", all_records, mode, short, long, pc_all))
    return rows


def _score_row(model, region, recs, mode, short, long, pc):
    s_recs = [r for r in recs if r.horizon in short]
    l_recs = [r for r in recs if r.horizon in long]
    return {
        "model": model,
        "region": region,
        "nr1_short": nr1(s_recs, mode),
        "nr2_short": nr2(s_recs),
        "nd_short": nd(s_recs, mode),
        "nr1_long": nr1(l_recs, mode),
        "nr2_long": nr2(l_recs),
        "nd_long": nd(l_recs, mode),
        "pc": pc,
        "n_records": len(recs),
    }


def records_to_jsonl(records, path):
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")


def records_from_jsonl(path):
    out = []
    with open(path) as fh:
        for line in fh:
            out.append(ForecastRecord(**json.loads(line)))
    return out


# -- the rolling protocol ----------------------------------------------------------


def _einn_forecast(view, config, calibration, horizons):
    trainer = EinnTrainer(view, config, calibration).train()
    vals, flagged = trainer.forecast(horizons)
    return vals, flagged


def run_model_for_week(name, view, config, calibration, horizons, cache):
    """Forecast values (natural units) for one model at one prediction week.

    ``cache`` carries per-week intermediates so ensembling can reuse the RNN
    and mechanistic forecasts computed for their own rows.
    """
    flagged = np.zeros(horizons, dtype=bool)
    if name == "einn":
        vals, flagged = _einn_forecast(view, config, calibration, horizons)
    elif name == "rnn":
        vals, _ = run_rnn(view, config, horizons)
        cache["rnn"] = vals
    elif name == "generation":
        vals = run_generation(view, config, calibration, horizons)
    elif name == "regularization":
        vals = run_regularization(view, config, horizons)
    elif name == "mechanistic":
        vals = run_mechanistic(view, calibration, horizons)
        cache["mechanistic"] = vals
    elif name == "persistence":
        vals = run_persistence(view, horizons)
    elif name == "ar":
        vals = run_ar(view, horizons)
    elif name == "lasso":
        vals = run_lasso(view, horizons)
    elif name == "ensembling":
        vals = _ensembling_forecast(view, config, calibration, horizons, cache)
    else:
        raise ValueError(f"unknown model {name!r}")
    return np.asarray(vals, dtype=np.float64), flagged


def _ensembling_forecast(view, config, calibration, horizons, cache):
    """Combiner over (rnn, mechanistic) trained on pseudo-held-out forecasts
    from an origin 8 weeks back in the training window."""
    ds = view.dataset
    week = view.n_train // 7 - 1
    if "rnn" not in cache:
        cache["rnn"], _ = run_rnn(view, config, horizons)
    if "mechanistic" not in cache:
        cache["mechanistic"] = run_mechanistic(view, calibration, horizons)

    origin = week - 8
    pairs = []
    if origin >= 2:
        o_view = ds.view(origin)
        o_cal = calibrate_ode(o_view.dataset.model(), o_view.Y, max_iters=150)
        o_rnn, _ = run_rnn(o_view, config, horizons)
        o_mech = run_mechanistic(o_view, o_cal, horizons)
        truth = view.weekly_truth()  # within the training window only
        for k in range(1, horizons + 1):
            if origin + k <= week:
                pairs.append((o_rnn[k - 1], o_mech[k - 1], truth[origin + k]))
    if len(pairs) < 2:
        # not enough history to train a combiner; fall back to the average
        return np.maximum((cache["rnn"] + cache["mechanistic"]) / 2.0, 0.0)
    return run_ensembling(view, config, cache["rnn"], cache["mechanistic"], pairs,
                          seed=config.train.seed)


def rolling_protocol(models, datasets, weeks, config, horizons=8, on_week=None):
    """Real-time protocol: per (region, prediction week), retrain every model
    on data through that week and score horizons 1..K against revised truth.
    Records missing truth (beyond the series) are dropped with a log line.
    """
    if isinstance(datasets, dict):
        datasets = list(datasets.values())
    records = []
    for ds in datasets:
        truth = ds.weekly_truth()
        model_obj = ds.model()
        for week in weeks:
            view = ds.view(week)
            calibration = calibrate_ode(model_obj, view.Y, max_iters=150)
            cache: dict = {}
            for name in models:
                vals, flagged = run_model_for_week(
                    name, view, config, calibration, horizons, cache
                )
                for k in range(1, horizons + 1):
                    target_week = week + k
                    if target_week >= truth.size:
                        logger.info(
                            "dropping %s %s week %d horizon %d: no revised truth",
                            ds.region, name, week, k,
                        )
                        continue
                    records.append(
                        ForecastRecord(
                            region=ds.region,
                            model=name,
                            week=week,
                            horizon=k,
                            y_hat=float(vals[k - 1]),
                            y_true=float(truth[target_week]),
                            flagged=bool(flagged[k - 1]),
                        )
                    )
            if on_week is not None:
                on_week(ds.region, week)
    return records
