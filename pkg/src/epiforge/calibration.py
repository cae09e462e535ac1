"""Derivative-free calibration of compartmental parameters to observations.

Used standalone as the mechanistic baseline and to initialize the learnable
daily parameter table.  Parameters are optimized in unconstrained space and
squashed into their boxes, one calendar week per window, each window
warm-started from the previous optimum with state continuity.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ode import Seirm, Sirs, rk4_integrate

__all__ = ["nelder_mead", "calibrate_ode", "CalibrationResult", "DegenerateDataError"]


class DegenerateDataError(ValueError):
    """Observations carry no signal to calibrate against."""


def nelder_mead(objective, x0, tol=1e-10, max_iters=1000, initial_step=0.05, xtol=1e-8):
    """Simplex search (reflection 1, expansion 2, contraction 0.5, shrink 0.5).

    Terminates when the simplex function-value spread drops below ``tol``
    (and its diameter below ``xtol``, which guards against symmetric
    equal-value stalls), or after ``max_iters`` iterations.  Non-finite
    objective values are penalized as +inf rather than raised.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    d = x0.size

    def f(x):
        v = objective(x)
        return float(v) if np.isfinite(v) else np.inf

    if not np.isfinite(objective(x0)):
        raise ValueError("objective must be finite at the starting point")

    # initial simplex: perturb each coordinate (scipy-style steps)
    sim = np.tile(x0, (d + 1, 1))
    for i in range(d):
        step = initial_step * abs(x0[i]) if x0[i] != 0.0 else 0.00025
        sim[i + 1, i] += step
    fs = np.array([f(x) for x in sim])

    for _ in range(max_iters):
        order = np.argsort(fs, kind="stable")
        sim, fs = sim[order], fs[order]
        if fs[-1] - fs[0] < tol and np.max(np.abs(sim[1:] - sim[0])) < xtol:
            break
        centroid = sim[:-1].mean(axis=0)
        xr = centroid + (centroid - sim[-1])
        fr = f(xr)
        if fr < fs[0]:
            xe = centroid + 2.0 * (centroid - sim[-1])
            fe = f(xe)
            if fe < fr:
                sim[-1], fs[-1] = xe, fe
            else:
                sim[-1], fs[-1] = xr, fr
        elif fr < fs[-2]:
            sim[-1], fs[-1] = xr, fr
        else:
            toward = xr if fr < fs[-1] else sim[-1]
            xc = centroid + 0.5 * (toward - centroid)
            fc = f(xc)
            if fc < min(fr, fs[-1]):
                sim[-1], fs[-1] = xc, fc
            else:  # shrink toward the best vertex
                sim[1:] = sim[0] + 0.5 * (sim[1:] - sim[0])
                fs[1:] = [f(x) for x in sim[1:]]

    best = int(np.argmin(fs))
    return sim[best].copy(), float(fs[best])


@dataclass
class CalibrationResult:
    """Windowed parameter fit: natural-unit parameters, fitted initial state,
    and the total squared observation error at the optimum."""

    omega_windows: np.ndarray  # (n_windows, n_params)
    window_slices: list
    s0: np.ndarray
    fit_loss: float
    per_window_loss: np.ndarray = field(default=None)

    def daily_schedule(self, n_days: int) -> np.ndarray:
        """Broadcast the per-window parameters to one row per day."""
        out = np.empty((n_days, self.omega_windows.shape[1]))
        for w, sl in zip(self.omega_windows, self.window_slices):
            out[sl] = w
        last = self.window_slices[-1]
        if last.stop < n_days:
            out[last.stop:] = self.omega_windows[-1]
        return out

    def to_dict(self) -> dict:
        return {
            "omega_windows": self.omega_windows.tolist(),
            "windows": [[sl.start, sl.stop] for sl in self.window_slices],
            "s0": self.s0.tolist(),
            "fit_loss": self.fit_loss,
            "per_window_loss": self.per_window_loss.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationResult":
        return cls(
            omega_windows=np.asarray(d["omega_windows"], dtype=np.float64),
            window_slices=[slice(a, b) for a, b in d["windows"]],
            s0=np.asarray(d["s0"], dtype=np.float64),
            fit_loss=float(d["fit_loss"]),
            per_window_loss=np.asarray(d["per_window_loss"], dtype=np.float64),
        )


def week_windows(n_days: int) -> list:
    """Calendar-week partition of day indices; a trailing partial week is
    kept as its own (short) window."""
    out = [slice(i, min(i + 7, n_days)) for i in range(0, n_days, 7)]
    return out


def _observable_error(model, traj, omega, days: slice, observations):
    """Squared error of the model's observable against observed days."""
    obs = observations[days]
    if isinstance(model, Seirm):
        pred = np.diff(traj[:, 4])  # daily new deaths
    else:
        pred = np.array(
            [model.observable_fraction(traj[k] / model.n_pop, omega) for k in range(len(traj) - 1)]
        )
    return float(np.sum((pred - obs) ** 2))


def calibrate_ode(
    model,
    observations,
    windows=None,
    tol=1e-10,
    max_iters=400,
    fixed_initial=None,
    share_omega=False,
):
    """Sequential per-window Nelder-Mead fit of squashed parameters.

    The first window also fits the free initial-state variables (SEIRM:
    log E0 and log I0 with R0 = M0 = 0; SIRS: log I0 with R0 = 0); later
    windows inherit the simulated end state and warm-start from the
    previous parameter optimum.  ``share_omega`` fits a single parameter
    vector over the whole span instead (window order then irrelevant).
    """
    observations = np.asarray(observations, dtype=np.float64)
    n_days = observations.size
    if windows is None:
        windows = week_windows(n_days)
    if len(windows) < 2 and not share_omega:
        raise ValueError("need at least 2 calibration windows")
    if np.all(observations == 0.0) and fixed_initial is None:
        raise DegenerateDataError("observations are identically zero in every window")

    box = model.box
    n_par = len(box.names)
    n_pop = model.n_pop

    def build_s0(init_vars):
        if isinstance(model, Seirm):
            e0, i0 = np.exp(init_vars[0]), np.exp(init_vars[1])
            return np.array([n_pop - e0 - i0, e0, i0, 0.0, 0.0])
        i0 = np.exp(init_vars[0])
        return np.array([n_pop - i0, i0, 0.0])

    n_init = (2 if isinstance(model, Seirm) else 1) if fixed_initial is None else 0

    def simulate_window(s_start, omega, days: slice):
        n = days.stop - days.start
        rhs = lambda s, w: np.asarray(model.rhs(s, w))
        return rk4_integrate(rhs, s_start, omega, 1.0, n, floor=-1e-6 * n_pop)

    def window_objective(theta, s_start, days, with_init):
        omega = box.squash(theta[:n_par])
        if with_init:
            s_start = build_s0(theta[n_par:])
        try:
            traj = simulate_window(s_start, omega, days)
        except RuntimeError:
            return np.inf
        return _observable_error(model, traj, omega, days, observations)

    theta0 = box.unsquash((box.lo + box.hi) / 2.0 if not isinstance(model, Seirm) else np.array([0.2, 0.2, 0.1, 0.02]))
    scale = max(observations.max(), 1.0)
    if fixed_initial is not None:
        init_guess = None
        if isinstance(model, Seirm):
            e0, i0 = fixed_initial
            s_state = np.array([n_pop - e0 - i0, e0, i0, 0.0, 0.0])
        else:
            s_state = np.array([n_pop - fixed_initial[0], fixed_initial[0], 0.0])
    else:
        guess = max(10.0 * scale, 1.0)
        init_guess = np.log(np.full(n_init, guess))
        s_state = None

    if share_omega:
        full = slice(0, n_days)

        def obj(theta):
            return window_objective(theta, s_state, full, fixed_initial is None)

        x0 = theta0 if fixed_initial is not None else np.concatenate([theta0, init_guess])
        x, fval = nelder_mead(obj, x0, tol=tol, max_iters=max_iters * 4, xtol=1e-6)
        omega = box.squash(x[:n_par])
        s0 = s_state if fixed_initial is not None else build_s0(x[n_par:])
        return CalibrationResult(
            omega_windows=np.tile(omega, (len(windows), 1)),
            window_slices=list(windows),
            s0=s0,
            fit_loss=fval,
            per_window_loss=np.array([fval]),
        )

    omega_rows = []
    losses = []
    theta = theta0
    s0_out = None
    for k, days in enumerate(windows):
        with_init = k == 0 and fixed_initial is None

        def obj(x, _s=s_state, _d=days, _wi=with_init):
            return window_objective(x, _s, _d, _wi)

        x0 = np.concatenate([theta, init_guess]) if with_init else theta
        x, fval = nelder_mead(obj, x0, tol=tol, max_iters=max_iters * (3 if with_init else 1), xtol=1e-6)
        theta = x[:n_par]
        omega = box.squash(theta)
        if with_init:
            s_state = build_s0(x[n_par:])
        if k == 0:
            s0_out = s_state.copy()
        traj = simulate_window(s_state, omega, days)
        s_state = traj[-1]
        omega_rows.append(omega)
        losses.append(fval)

    return CalibrationResult(
        omega_windows=np.array(omega_rows),
        window_slices=list(windows),
        s0=s0_out,
        fit_loss=float(np.sum(losses)),
        per_window_loss=np.array(losses),
    )


def calibrated_trajectory(model, result: CalibrationResult, n_days: int) -> np.ndarray:
    """RK4 trajectory ((n_days+1) x D states, person units) under the fitted
    schedule; days beyond the last window reuse its parameters."""
    schedule = result.daily_schedule(n_days)
    rhs = lambda s, w: np.asarray(model.rhs(s, w))
    return rk4_integrate(rhs, result.s0, schedule, 1.0, n_days, floor=-1e-6 * model.n_pop)
