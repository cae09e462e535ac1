"""Ingestion, scaling, weekly aggregation, and the synthetic generator."""

import numpy as np
import pytest

from epiforge.config import DataConfig
from epiforge.data import (
    ContiguityError,
    RegionDataset,
    SchemaError,
    load_csv,
    make_synthetic_world,
    standard_scale,
    weekly_target,
    write_csv,
)
from epiforge.ode import rk4_integrate, seirm_rhs


def toy_csv(tmp_path, rows):
    p = tmp_path / "toy.csv"
    header = "date,region,target,f1,f2\n"
    p.write_text(header + "\n".join(rows) + "\n")
    return p


def two_region_rows(n_days=10):
    rows = []
    for r in ["AA", "BB"]:
        for t in range(n_days):
            d = np.datetime64("2021-01-01") + t
            rows.append(f"{d},{r},{t + 1}.0,{0.1 * t},{1.0}")
    return rows


def base_config():
    return DataConfig(populations={"AA": 1e6, "BB": 2e6})


class TestLoadCsv:
    def test_two_region_shapes(self, tmp_path):
        path = toy_csv(tmp_path, two_region_rows())
        ds = load_csv(path, base_config())
        assert set(ds) == {"AA", "BB"}
        assert ds["AA"].n_days == 10
        assert ds["AA"].X.shape == (10, 2)

    def test_missing_column(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("date,region,f1\n2021-01-01,AA,1.0\n")
        with pytest.raises(SchemaError, match="target"):
            load_csv(p, base_config())

    def test_duplicate_date_named(self, tmp_path):
        rows = two_region_rows(5)
        rows.append(rows[0])
        path = toy_csv(tmp_path, rows)
        with pytest.raises(ContiguityError, match="2021-01-01"):
            load_csv(path, base_config())

    def test_date_gap_named(self, tmp_path):
        rows = [r for r in two_region_rows(6) if "2021-01-03,AA" not in r]
        path = toy_csv(tmp_path, rows)
        with pytest.raises(ContiguityError, match="2021-01-04"):
            load_csv(path, base_config())

    def test_missing_population(self, tmp_path):
        path = toy_csv(tmp_path, two_region_rows(5))
        with pytest.raises(SchemaError, match="population"):
            load_csv(path, DataConfig(populations={"AA": 1e6}))

    def test_feature_imputation_flagged(self, tmp_path):
        rows = two_region_rows(5)
        rows[2] = rows[2].replace("0.2,1.0", ",1.0")  # blank f1 on day 2 of AA
        path = toy_csv(tmp_path, rows)
        ds = load_csv(path, base_config())
        assert ds["AA"].imputed[2, 0]
        assert ds["AA"].X[2, 0] == pytest.approx(0.1)  # forward fill

    def test_round_trip_lossless(self, tmp_path):
        world, _ = make_synthetic_world(
            np.array([0.3, 0.2, 0.1, 0.01]), 1e6, 35, 0.05, seed=3
        )
        cfg = DataConfig(populations={"SYN": 1e6})
        out = tmp_path / "world.csv"
        write_csv(out, {"SYN": world}, cfg)
        back = load_csv(out, cfg)["SYN"]
        assert np.array_equal(back.X, world.X)
        assert np.array_equal(back.Y, world.Y)
        assert np.array_equal(back.dates, world.dates)


class TestStandardScale:
    def test_hand_case(self):
        scaled, sc = standard_scale(np.array([1.0, 2.0, 3.0]), slice(0, 3))
        assert np.allclose(scaled, [-1.224745, 0.0, 1.224745], atol=1e-6)

    def test_constant_feature_dropped(self):
        x = np.column_stack([np.arange(5.0), np.full(5, 7.0)])
        scaled, sc = standard_scale(x, slice(0, 5))
        assert scaled.shape == (5, 1)
        assert sc.kept.tolist() == [True, False]

    def test_inverse_round_trip(self):
        rng = np.random.default_rng(1)
        x = rng.normal(3.0, 2.0, size=(20, 3))
        scaled, sc = standard_scale(x, slice(0, 12))
        assert np.max(np.abs(sc.inverse(scaled) - x)) < 1e-12

    def test_training_slice_only(self):
        x = np.concatenate([np.zeros(10), np.full(10, 100.0)])
        scaled, sc = standard_scale(x, slice(0, 10))
        # stats must ignore the later jump; zero-variance slice drops the column
        assert sc.kept.tolist() == [False]

    def test_moments_on_training_slice(self):
        rng = np.random.default_rng(2)
        x = rng.normal(5.0, 3.0, size=(50, 4))
        scaled, sc = standard_scale(x, slice(0, 30))
        sub = scaled[:30]
        assert np.max(np.abs(sub.mean(axis=0))) < 1e-9
        assert np.max(np.abs(sub.std(axis=0) - 1.0)) < 1e-9


class TestWeeklyTarget:
    def test_covid_sums(self):
        assert weekly_target(np.arange(1.0, 8.0), "covid")[0] == 28.0

    def test_flu_averages(self):
        assert weekly_target(np.arange(1.0, 8.0), "flu")[0] == 4.0

    def test_partial_week_excluded(self):
        out = weekly_target(np.ones(16), "covid")
        assert out.shape == (2,)


class TestSyntheticWorld:
    def test_zero_noise_zero_mortality(self):
        ds, truth = make_synthetic_world(
            np.array([0.3, 0.2, 0.1, 1e-12]), 1e6, 28, 0.0, seed=0
        )
        assert np.allclose(ds.Y, 0.0, atol=1e-7)

    def test_seed_reproducibility(self):
        a, _ = make_synthetic_world(np.array([0.3, 0.2, 0.1, 0.01]), 1e6, 40, 0.05, seed=9)
        b, _ = make_synthetic_world(np.array([0.3, 0.2, 0.1, 0.01]), 1e6, 40, 0.05, seed=9)
        assert np.array_equal(a.Y, b.Y)
        assert np.array_equal(a.X, b.X)

    def test_deaths_match_independent_rk4(self):
        omega = np.array([0.3, 0.2, 0.1, 0.01])
        ds, truth = make_synthetic_world(omega, 1e6, 60, 0.0, seed=4, switch_day=30, omega2=np.array([0.15, 0.2, 0.1, 0.01]))
        rerun = rk4_integrate(
            lambda s, w: np.asarray(seirm_rhs(s, w, 1e6)),
            truth["s0"],
            truth["schedule"],
            1.0,
            60,
        )
        assert np.max(np.abs(np.diff(rerun[:, 4]) - truth["true_daily"])) < 1e-10

    def test_two_regime_switch_changes_dynamics(self):
        base = np.array([0.32, 0.2, 0.12, 0.01])
        ds, truth = make_synthetic_world(base, 1e6, 120, 0.0, seed=0, switch_day=60, omega2=np.array([0.1, 0.2, 0.12, 0.01]))
        assert not np.allclose(truth["schedule"][0], truth["schedule"][-1])

    def test_view_scalers_fit_inside_window(self):
        ds, _ = make_synthetic_world(np.array([0.3, 0.2, 0.1, 0.01]), 1e6, 84, 0.05, seed=2)
        view = ds.view(through_week=7)
        assert view.n_train == 56
        assert view.scaler_fit_stop == 56
        assert view.max_date == ds.dates[55]
        assert view.obs_scaled.shape == (56,)

    def test_flu_world_builds(self):
        ds, truth = make_synthetic_world(
            np.array([0.6, 4.0, 1000.0]), 1e6, 56, 0.02, seed=1, mode="flu"
        )
        assert ds.mode == "flu"
        assert np.all(ds.Y >= 0)
        view = ds.view(3)
        assert view.observable is view.Y or np.array_equal(view.observable, view.Y)
