"""Comparison systems: the plain recurrent forecaster and the standard ways
of coupling it to the mechanistic model (training on simulated curves,
discrete ODE regularization, prediction ensembling), plus persistence,
autoregression, lasso-with-features, and the calibrated-ODE continuation.

Every baseline emits plain horizon arrays in natural units, schema-identical
to the main model's forecasts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import featurenet as fn
from .autodiff import Dual, Tape, grad
from .calibration import calibrate_ode, calibrated_trajectory
from .data import weekly_target
from .featurenet import FeatureNet
from .ode import Seirm, rk4_integrate
from .training import Adam, TrainingError

__all__ = [
    "BASELINE_KINDS",
    "BaselineRnn",
    "run_persistence",
    "run_ar",
    "run_lasso",
    "run_mechanistic",
    "run_generation",
    "run_regularization",
    "Combiner",
    "run_ensembling",
]

BASELINE_KINDS = (
    "generation",
    "regularization",
    "ensembling",
    "persistence",
    "ar",
    "lasso",
    "mechanistic",
    "rnn",
)


# -- recurrent baseline ---------------------------------------------------------


class BaselineRnn:
    """Encoder + attention + decoder with a private feedforward output head.

    ``extra_states`` > 0 switches the head to predict ODE states (and
    squashed parameters) instead of the scalar observable, which is what the
    discrete-regularization baseline needs.
    """

    def __init__(self, model_config, n_features: int, rng, n_outputs: int = 1):
        self.featnet = FeatureNet(model_config, n_features, rng)
        self.params = self.featnet.params
        d_e = model_config.embed_dim
        self.params["rnnhead_0_W"] = rng.normal(0.0, 1.0 / np.sqrt(d_e), size=(d_e, 32))
        self.params["rnnhead_0_b"] = np.zeros(32)
        self.params["rnnhead_1_W"] = rng.normal(0.0, 1.0 / np.sqrt(32), size=(32, n_outputs))
        self.params["rnnhead_1_b"] = np.zeros(n_outputs)
        self.n_outputs = n_outputs
        self.history = []

    def bind(self, tape, trainable=True):
        return {
            k: (tape.param(v, k) if trainable else tape.constant(v))
            for k, v in self.params.items()
        }

    def head(self, bound, e):
        h = ad.tanh(e @ bound["rnnhead_0_W"] + bound["rnnhead_0_b"])
        return h @ bound["rnnhead_1_W"] + bound["rnnhead_1_b"]

    def _forward_days(self, bound, view):
        state = fn.encode(self.featnet, bound, view.X_scaled, view.mask)
        e = fn.decode(self.featnet, bound, state.summary, view.day_times())
        return self.head(bound, e)

    def fit_series(self, view, target_scaled: np.ndarray, epochs: int, lr=1e-3,
                   loss_fn=None):
        """Full-batch Adam on the MSE against a scaled daily series.

        ``loss_fn(out, tape) -> Node`` replaces the default MSE entirely
        (used by the state-space regularization baseline).
        """
        adam = Adam(lr)
        for epoch in range(epochs):
            tape = Tape()
            bound = self.bind(tape)
            out = self._forward_days(bound, view)
            if loss_fn is None:
                r = out[:, 0] - target_scaled
                loss = (r * r).mean()
            else:
                loss = loss_fn(out, tape)
            if not np.isfinite(loss.value):
                raise TrainingError(f"non-finite RNN loss at epoch {epoch}")
            names = [n for n, node in bound.items() if node.is_param]
            gs = grad(loss, [bound[n] for n in names])
            adam.step(self.params, dict(zip(names, gs)))
            self.history.append({"epoch": epoch, "total": float(loss.value)})
        return self

    def predict_future(self, view, horizons: int) -> np.ndarray:
        """Scaled-observable predictions at end-of-week times 0..K."""
        tape = Tape()
        bound = self.bind(tape, trainable=False)
        state = fn.encode(self.featnet, bound, view.X_scaled, view.mask)
        times = view.future_week_times(horizons)
        e = fn.decode(self.featnet, bound, state.summary, times)
        return self.head(bound, e).value


def _observable_to_weekly(view, obs_natural: np.ndarray) -> np.ndarray:
    """(K+1,) natural-unit observable at week ends -> K weekly targets."""
    if view.mode == "covid":
        return np.maximum(np.diff(obs_natural), 0.0)
    return np.maximum(obs_natural[1:], 0.0)


def run_rnn(view, config, horizons: int, target_scaled=None):
    """Plain data-driven forecaster trained on the window's own observable."""
    rng = np.random.default_rng(config.train.seed)
    net = BaselineRnn(config.model, view.X_scaled.shape[1], rng)
    if target_scaled is None:
        target_scaled = view.obs_scaled
    net.fit_series(view, target_scaled, config.train.baseline_epochs, lr=config.train.lr)
    pred_scaled = net.predict_future(view, horizons)[:, 0]
    obs_nat = view.unscale_observable(pred_scaled)
    return _observable_to_weekly(view, obs_nat), net


def run_generation(view, config, calibration, horizons: int):
    """Same recurrent model, but trained on the calibrated simulation's
    observable instead of the raw data."""
    model = view.dataset.model()
    traj = calibrated_trajectory(model, calibration, view.n_train)
    if isinstance(model, Seirm):
        sim_obs = np.cumsum(np.diff(traj[:, 4]))
    else:
        sched = calibration.daily_schedule(view.n_train)
        sim_obs = np.array(
            [
                model.observable_fraction(traj[k + 1] / model.n_pop, sched[k])
                for k in range(view.n_train)
            ]
        )
    target_scaled = view.scale_observable(sim_obs)
    vals, _ = run_rnn(view, config, horizons, target_scaled=target_scaled)
    return vals


def run_regularization(view, config, horizons: int, penalty_weight: float = 10.0):
    """Recurrent model predicting ODE states and squashed parameters, with a
    1-day forward-difference ODE penalty added to the data loss."""
    model = view.dataset.model()
    n_states = model.n_states
    n_par = len(model.box.names)
    rng = np.random.default_rng(config.train.seed)
    net = BaselineRnn(config.model, view.X_scaled.shape[1], rng, n_outputs=n_states + n_par)

    from .timenet import predicted_observable

    def state_space_loss(out, tape):
        states = out[:, :n_states]
        omega = model.box.squash(out[:, n_states:])
        data = predicted_observable(model, view, states, omega)
        r = data - view.obs_scaled
        loss = (r * r).mean()
        if penalty_weight > 0.0:
            f = model.rhs_fraction(
                [states[:, i] for i in range(n_states)],
                [omega[:, i] for i in range(n_par)],
            )
            total = None
            for i, fi in enumerate(f):
                diff = states[1:, i] - states[:-1, i]
                ri = diff - fi[:-1]  # 1-day forward difference
                sq = ri * ri
                total = sq if total is None else total + sq
            loss = loss + penalty_weight * total.mean()
        return loss

    net.fit_series(view, None, config.train.baseline_epochs, lr=config.train.lr,
                   loss_fn=state_space_loss)

    tape = Tape()
    bound = net.bind(tape, trainable=False)
    pred = net.predict_future(view, horizons)
    states = pred[:, :n_states]
    omega = model.box.squash(pred[:, n_states:])
    if isinstance(model, Seirm):
        m_pred = states[:, 4] * view.n_pop
        return np.maximum(np.diff(m_pred), 0.0)
    vals = np.array(
        [
            max(float(model.observable_fraction(states[k], omega[k])), 0.0)
            for k in range(1, horizons + 1)
        ]
    )
    return vals


# -- ensembling -----------------------------------------------------------------


class Combiner:
    """Per-horizon blender: (rnn, mechanistic) -> prediction, a 2-8-1 tanh
    network trained on held-out pairs; inputs and target share one scale."""

    def __init__(self, seed=0):
        rng = np.random.default_rng(seed)
        self.params = {
            "c0_W": rng.normal(0.0, 1.0 / np.sqrt(2), size=(2, 8)),
            "c0_b": np.zeros(8),
            "c1_W": rng.normal(0.0, 1.0 / np.sqrt(8), size=(8, 1)),
            "c1_b": np.zeros(1),
        }
        self.scale = 1.0

    def _forward(self, bound, x):
        h = ad.tanh(x @ bound["c0_W"] + bound["c0_b"])
        return (h @ bound["c1_W"] + bound["c1_b"])[:, 0]

    def fit(self, inputs: np.ndarray, targets: np.ndarray, steps=800, lr=5e-3):
        self.scale = max(float(np.abs(targets).mean()), 1e-12)
        xin = np.asarray(inputs, dtype=np.float64) / self.scale
        yin = np.asarray(targets, dtype=np.float64) / self.scale
        adam = Adam(lr)
        for _ in range(steps):
            tape = Tape()
            bound = {k: tape.param(v, k) for k, v in self.params.items()}
            pred = self._forward(bound, tape.constant(xin))
            r = pred - yin
            loss = (r * r).mean()
            names = list(bound)
            gs = grad(loss, [bound[n] for n in names])
            adam.step(self.params, dict(zip(names, gs)))
        return self

    def predict(self, inputs: np.ndarray) -> np.ndarray:
        tape = Tape()
        bound = {k: tape.constant(v) for k, v in self.params.items()}
        x = np.asarray(inputs, dtype=np.float64) / self.scale
        return self._forward(bound, tape.constant(x)).value * self.scale


def run_ensembling(view, config, rnn_vals, mech_vals, holdout_pairs, seed=0):
    """Blend the two current forecasts with a combiner trained on
    (rnn, mechanistic, truth) triples from the last training weeks."""
    inputs = np.array([[r, m] for r, m, _ in holdout_pairs])
    targets = np.array([y for _, _, y in holdout_pairs])
    comb = Combiner(seed=seed).fit(inputs, targets)
    out = comb.predict(np.column_stack([rnn_vals, mech_vals]))
    return np.maximum(out, 0.0)


# -- simple statistical baselines -------------------------------------------------


def run_persistence(view, horizons: int) -> np.ndarray:
    """Repeat the last observed weekly value at every horizon."""
    weekly = view.weekly_truth()
    if weekly.size == 0:
        raise ValueError("window shorter than one week")
    return np.full(horizons, weekly[-1])


def run_ar(view, horizons: int, lags: int = 4) -> np.ndarray:
    """OLS autoregression on weekly targets, iterated forward."""
    weekly = view.weekly_truth()
    if weekly.size < lags + 2:
        return run_persistence(view, horizons)
    rows = []
    ys = []
    for t in range(lags, weekly.size):
        rows.append(np.concatenate([[1.0], weekly[t - lags : t][::-1]]))
        ys.append(weekly[t])
    coef, *_ = np.linalg.lstsq(np.array(rows), np.array(ys), rcond=None)
    hist = list(weekly)
    out = []
    for _ in range(horizons):
        x = np.concatenate([[1.0], np.array(hist[-lags:])[::-1]])
        nxt = float(x @ coef)
        out.append(nxt)
        hist.append(nxt)
    return np.array(out)


def soft_threshold(rho: float, lam: float) -> float:
    if rho > lam:
        return rho - lam
    if rho < -lam:
        return rho + lam
    return 0.0


def lasso_coordinate_descent(X, y, lam, n_iter=2000, tol=1e-12):
    """L1-penalized least squares, objective (1/2n)||y - Xb||^2 + lam * ||b||_1,
    on centered data (intercept recovered by the caller)."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, p = X.shape
    beta = np.zeros(p)
    col_sq = (X * X).sum(axis=0) / n
    resid = y - X @ beta
    for _ in range(n_iter):
        max_move = 0.0
        for j in range(p):
            if col_sq[j] == 0.0:
                continue
            rho = (X[:, j] @ resid) / n + col_sq[j] * beta[j]
            new = soft_threshold(rho, lam) / col_sq[j]
            move = new - beta[j]
            if move != 0.0:
                resid -= X[:, j] * move
                beta[j] = new
                max_move = max(max_move, abs(move))
        if max_move < tol:
            break
    return beta


def run_lasso(view, horizons: int, lags: int = 4, lam: float = 0.01) -> np.ndarray:
    """Direct per-horizon L1 regression on lagged weekly targets and lagged
    weekly feature means (future features are never needed)."""
    weekly_y = view.weekly_truth()
    n_weeks = weekly_y.size
    feats = view.X_scaled
    n_feat = feats.shape[1]
    weekly_x = np.array(
        [feats[w * 7 : (w + 1) * 7].mean(axis=0) for w in range(n_weeks)]
    )
    if n_weeks < lags + 3:
        return run_persistence(view, horizons)

    def design_row(t):
        return np.concatenate([weekly_y[t - lags : t][::-1], weekly_x[t - lags : t][::-1].ravel()])

    out = []
    for k in range(1, horizons + 1):
        rows, ys = [], []
        for t in range(lags, n_weeks - k + 1):
            rows.append(design_row(t))
            ys.append(weekly_y[t + k - 1])
        X = np.array(rows)
        yv = np.array(ys)
        if X.shape[0] < 2:
            out.append(weekly_y[-1])
            continue
        xm, ym = X.mean(axis=0), yv.mean()
        beta = lasso_coordinate_descent(X - xm, yv - ym, lam)
        pred = float((design_row(n_weeks) - xm) @ beta + ym)
        out.append(max(pred, 0.0))
    return np.array(out)


def run_mechanistic(view, calibration, horizons: int) -> np.ndarray:
    """Continue the calibrated trajectory beyond the window with the last
    window's parameters and aggregate weekly."""
    model = view.dataset.model()
    n_train = view.n_train
    traj = calibrated_trajectory(model, calibration, n_train)
    n_future = 7 * horizons
    last_omega = calibration.omega_windows[-1]
    rhs = lambda s, w: np.asarray(model.rhs(s, w))
    future = rk4_integrate(
        rhs, traj[-1], np.tile(last_omega, (n_future, 1)), 1.0, n_future,
        floor=-1e-6 * model.n_pop,
    )
    if isinstance(model, Seirm):
        daily = np.diff(future[:, 4])
        return np.maximum(weekly_target(daily, "covid"), 0.0)
    daily = np.array(
        [
            model.observable_fraction(future[k + 1] / model.n_pop, last_omega)
            for k in range(n_future)
        ]
    )
    return np.maximum(weekly_target(daily, "flu"), 0.0)
