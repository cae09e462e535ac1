"""Time-conditioned network: Fourier features -> tanh trunk -> embedding ->
shared output head -> ODE states, plus a learnable per-day parameter table.

The network maps normalized end-of-day times in (0, 1] to state *fractions*
(states / N).  Running it in forward mode gives d(state)/d(time) for the
ODE-residual and monotonicity losses; dividing by the window length in days
converts back to per-day units.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Dual, Node, Tape, dual_concat
from .ode import Seirm

__all__ = ["FourierFeatures", "TimeNet", "OmegaTable", "time_losses"]


class FourierFeatures:
    """Random Fourier map t -> [cos(2 pi B t), sin(2 pi B t)], B ~ N(0, sigma^2).

    B is sampled once at construction and must be persisted with checkpoints;
    output dimension is 2 * dim and every component lies in [-1, 1].
    """

    def __init__(self, dim: int, sigma: float, rng: np.random.Generator):
        self.dim = dim
        self.sigma = sigma
        self.B = rng.normal(0.0, sigma, size=dim)

    def __call__(self, t: Dual) -> Dual:
        proj = t.reshape(-1, 1) @ (2.0 * np.pi * self.B[None, :])
        return dual_concat([dual_cos(proj), dual_sin(proj)], axis=1)


def dual_cos(x):
    return ad.cos(x) if isinstance(x, (Dual, Node)) else np.cos(x)


def dual_sin(x):
    return ad.sin(x) if isinstance(x, (Dual, Node)) else np.sin(x)


def _init_affine(params, name, d_in, d_out, rng):
    params[name + "_W"] = rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, d_out))
    params[name + "_b"] = np.zeros(d_out)


def _affine(bound, name, x):
    return x @ bound[name + "_W"] + bound[name + "_b"]


class TimeNet:
    """Trunk (producing the embedding) plus the output head shared with the
    feature module.  ``head`` maps embeddings to state fractions and is the
    only piece both modules train in the second phase."""

    def __init__(self, model_config, n_states: int, rng: np.random.Generator):
        mc = model_config
        if mc.trunk_widths[0] != 2 * mc.fourier_dim:
            raise ValueError(
                f"trunk input {mc.trunk_widths[0]} != 2 * fourier_dim {2 * mc.fourier_dim}"
            )
        self.fourier = FourierFeatures(mc.fourier_dim, mc.fourier_sigma, rng)
        self.embed_dim = mc.trunk_widths[-1]
        self.n_states = n_states
        self.params: dict[str, np.ndarray] = {}
        widths = list(mc.trunk_widths)
        self.trunk_names = []
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            name = f"trunk_{i}"
            _init_affine(self.params, name, a, b, rng)
            self.trunk_names.append(name)
        head_dims = [self.embed_dim, *mc.head_widths, n_states]
        self.head_names = []
        for i, (a, b) in enumerate(zip(head_dims[:-1], head_dims[1:])):
            name = f"head_{i}"
            _init_affine(self.params, name, a, b, rng)
            self.head_names.append(name)

    def param_names(self):
        return list(self.params)

    def bind(self, tape: Tape, trainable=True, prefix="time/") -> dict:
        """Register parameters on a tape; frozen parameters bind as constants
        so the reverse sweep can never touch them."""
        out = {}
        for k, v in self.params.items():
            out[k] = tape.param(v, prefix + k) if trainable else tape.constant(v)
        return out

    def trunk(self, bound, t: Dual) -> Dual:
        h = self.fourier(t)
        for name in self.trunk_names:
            h = ad.tanh(_affine(bound, name, h))
        return h  # embedding, post-activation

    def head(self, bound, e):
        h = e
        for name in self.head_names[:-1]:
            h = ad.tanh(_affine(bound, name, h))
        return _affine(bound, self.head_names[-1], h)

    def forward(self, bound, t: Dual):
        """(embedding, states) as forward-mode duals; seed t with a tangent
        to get d/dt alongside."""
        e = self.trunk(bound, t)
        s = self.head(bound, e)
        return e, s


class OmegaTable:
    """Per-day unconstrained parameters squashed into the model's box.

    Initialized from a calibration schedule (weekly values broadcast to
    days) and kept learnable.
    """

    def __init__(self, box, n_days: int, init_omega: np.ndarray = None):
        self.box = box
        self.n_days = n_days
        n_par = len(box.names)
        if init_omega is None:
            init_omega = np.tile((box.lo + box.hi) / 2.0, (n_days, 1))
        self.theta = box.unsquash(np.asarray(init_omega, dtype=np.float64)).reshape(n_days, n_par)

    def bind(self, tape: Tape, trainable=True) -> Node:
        n = tape.param(self.theta, "omega_theta") if trainable else tape.constant(self.theta)
        return n

    def omega_node(self, bound_theta: Node):
        return self.box.squash(bound_theta)

    def omega_values(self) -> np.ndarray:
        return self.box.squash(self.theta)

    def day_index(self, t_norm: float, span_days: float, margin_days: float = 56.0) -> int:
        """Nearest table day for a normalized time; errors outside
        [day 0 - margin, last day + margin]."""
        day = t_norm * span_days - 1.0
        if day < -margin_days or day > (self.n_days - 1) + margin_days:
            raise IndexError(
                f"time {t_norm:.4f} maps to day {day:.1f}, outside the parameter table range"
            )
        return int(np.clip(round(day), 0, self.n_days - 1))


def _rhs_columns(model, s_val: Node, omega: Node):
    """Apply the fraction-space right-hand side columnwise to (T, D_s) states."""
    cols = [s_val[:, i] for i in range(s_val.value.shape[1])]
    pars = [omega[:, i] for i in range(omega.value.shape[1])]
    return model.rhs_fraction(cols, pars)


def time_losses(model, view, s: Dual, omega: Node, terms=("ode", "data", "mono")):
    """The time-module loss family on the training-day collocation grid.

    ``s`` must be the forward-mode output of :meth:`TimeNet.forward` with the
    time input seeded; per-day derivatives are s.tan / span_days.
    """
    out = {}
    span = view.span_days
    if "ode" in terms:
        out["ode_t"] = loss_ode_residual(model, s, omega, span)
    if "data" in terms:
        out["data_t"] = loss_data(model, view, s.val, omega)
    if "mono" in terms:
        out["mono"] = loss_monotonicity(model, s, span)
    return out


def loss_ode_residual(model, s: Dual, omega: Node, span_days: float) -> Node:
    """Mean over days of the squared D_s-vector ODE residual, per-day units."""
    if s.tan is None:
        raise ValueError("states carry no time tangent; seed the time input")
    deriv = s.tan * (1.0 / span_days)
    f = _rhs_columns(model, s.val, omega)
    total = None
    for i, fi in enumerate(f):
        r = deriv[:, i] - fi
        sq = r * r
        total = sq if total is None else total + sq
    return total.mean()


def predicted_observable(model, view, s_val: Node, omega: Node) -> Node:
    """Scaled observable from state fractions: cumulative deaths (covid) or
    the ILI mapping (flu), pushed through the view's target scaler."""
    if isinstance(model, Seirm):
        pred_natural = s_val[:, 4] * view.n_pop
    else:
        cols = [s_val[:, i] for i in range(s_val.value.shape[1])]
        pars = [omega[:, i] for i in range(omega.value.shape[1])]
        pred_natural = model.observable_fraction(cols, pars)
    return view.scale_observable(pred_natural)


def loss_data(model, view, s_val: Node, omega: Node) -> Node:
    if view.obs_scaled.size == 0:
        raise ValueError("no observations in the training window")
    pred = predicted_observable(model, view, s_val, omega)
    r = pred - view.obs_scaled
    return (r * r).mean()


def loss_monotonicity(model, s: Dual, span_days: float):
    """Penalty for susceptible increasing / recovered decreasing (SEIRM only;
    no SIRS compartment is globally monotone)."""
    tape = s.val.tape
    if not isinstance(model, Seirm):
        return tape.constant(0.0)
    if s.tan is None:
        raise ValueError("states carry no time tangent; seed the time input")
    deriv = s.tan * (1.0 / span_days)
    dS = deriv[:, 0]
    dR = deriv[:, 3]
    up = dS * ad.relu(dS)
    down = (-1.0) * dR * ad.relu(-dR)
    return (up * up).mean() + (down * down).mean()


def loss_param_consistency(omega: Node) -> Node:
    """Mean over consecutive days of the squared parameter-vector change."""
    n = omega.value.shape[0]
    if n < 2:
        return omega.tape.constant(0.0)
    d = omega[1:] - omega[:-1]
    return (d * d).sum(axis=1).mean()


def loss_helper_reference(s_val: Node, reference: np.ndarray) -> Node:
    """MSE against the calibration trajectory (all states, fraction units)."""
    d = s_val - np.asarray(reference, dtype=np.float64)
    return (d * d).sum(axis=1).mean()
