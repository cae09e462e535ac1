"""Compartmental ODE right-hand sides, parameter boxes, and an RK4 integrator.

Two disease models: SEIRM (S, E, I, R, M; COVID mortality is the observed
state) and SIRS (S, I, R; seasonal flu, observed through an ILI mapping).
Rates are per day and states are person counts; every right-hand side is
degree-1 homogeneous in the states, so evaluating with N=1 on state
*fractions* gives the exact fractional dynamics (the networks use this).

Arithmetic is kept to `+ - * /`, so the same functions accept floats,
numpy arrays, tape nodes, and forward-mode duals.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

__all__ = [
    "ParamBox",
    "Seirm",
    "Sirs",
    "seirm_rhs",
    "sirs_rhs",
    "ili_observable",
    "rk4_integrate",
    "DomainError",
    "StabilityError",
    "ConfigError",
]


class DomainError(ValueError):
    """Inputs outside the model's mathematical domain."""


class StabilityError(RuntimeError):
    """Integration produced a meaningfully negative compartment."""


class ConfigError(ValueError):
    """A configuration value is out of its allowed range."""


@dataclass(frozen=True)
class ParamBox:
    """Box bounds plus the squashing map from unconstrained reals.

    ``squash`` uses the tanh transform lo + (hi-lo) * (tanh(x)+1)/2, so any
    real input (including +-1e6) lands strictly inside the open box.
    """

    names: tuple
    lo: np.ndarray
    hi: np.ndarray

    def squash(self, theta):
        out = self.lo + (self.hi - self.lo) * (ad.tanh(theta) + 1.0) * 0.5
        if isinstance(out, np.ndarray) or np.isscalar(out):
            # float64 tanh saturates to exactly +-1 around |x|~19; nudge the
            # readback strictly inside the box (gradient there is 0 anyway)
            eps = 1e-12 * (self.hi - self.lo)
            out = np.clip(out, self.lo + eps, self.hi - eps)
        return out

    def unsquash(self, omega: np.ndarray) -> np.ndarray:
        """Inverse of squash; clips slightly inside the box first."""
        omega = np.asarray(omega, dtype=np.float64)
        span = self.hi - self.lo
        u = (omega - self.lo) / span
        u = np.clip(u, 1e-9, 1.0 - 1e-9)
        return np.arctanh(2.0 * u - 1.0)

    def contains(self, omega) -> bool:
        omega = np.asarray(omega)
        return bool(np.all(omega > self.lo) and np.all(omega < self.hi))


# -- SEIRM -------------------------------------------------------------------

def seirm_rhs(s, omega, n_pop):
    """(dS, dE, dI, dR, dM)/dt for states (S, E, I, R, M) and rates
    (beta, alpha, gamma, mu)."""
    if not np.all(np.asarray(n_pop) > 0):
        raise DomainError(f"population must be positive, got {n_pop}")
    S, E, I, R, M = s[0], s[1], s[2], s[3], s[4]
    beta, alpha, gamma, mu = omega[0], omega[1], omega[2], omega[3]
    new_inf = beta * S * I / n_pop
    dS = -new_inf
    dE = new_inf - alpha * E
    dI = alpha * E - gamma * I - mu * I
    dR = gamma * I
    dM = mu * I
    return dS, dE, dI, dR, dM


# -- SIRS --------------------------------------------------------------------

def sirs_rhs(s, omega, n_pop):
    """(dS, dI)/dt for states (S, I, ...) and parameters (beta, D, L).

    D is the mean infectious duration (days), L the mean immunity duration
    (days).  R = N - S - I is implied; see :func:`sirs_rhs_full` for the
    3-state version the integrator and networks use.
    """
    if not np.all(np.asarray(n_pop) > 0):
        raise DomainError(f"population must be positive, got {n_pop}")
    beta, D, L = omega[0], omega[1], omega[2]
    _require_positive_durations(D, L)
    S, I = s[0], s[1]
    new_inf = beta * I * S / n_pop
    dS = (n_pop - S - I) / L - new_inf
    dI = new_inf - I / D
    return dS, dI


def sirs_rhs_full(s, omega, n_pop):
    """3-state SIRS derivative: recovery I/D feeds R, waning R/L feeds S."""
    if not np.all(np.asarray(n_pop) > 0):
        raise DomainError(f"population must be positive, got {n_pop}")
    beta, D, L = omega[0], omega[1], omega[2]
    _require_positive_durations(D, L)
    S, I, R = s[0], s[1], s[2]
    new_inf = beta * I * S / n_pop
    dS = R / L - new_inf
    dI = new_inf - I / D
    dR = I / D - R / L
    return dS, dI, dR


def _require_positive_durations(D, L):
    dv = D.value if hasattr(D, "value") else D
    lv = L.value if hasattr(L, "value") else L
    if np.any(np.asarray(dv) <= 0) or np.any(np.asarray(lv) <= 0):
        raise DomainError("SIRS durations D and L must be positive")


def ili_observable(s, omega, outpatient_ratio, n_pop):
    """ILI fraction (beta * I * S / N) / (N * OR) implied by the SIRS flow."""
    r = outpatient_ratio
    if not (0.0 < r <= 1.0):
        raise ConfigError(f"outpatient ratio must be in (0, 1], got {r}")
    S, I = s[0], s[1]
    return omega[0] * I * S / n_pop / (n_pop * r)


# -- model bundles -----------------------------------------------------------

@dataclass(frozen=True)
class Seirm:
    """SEIRM model: 5 states, 4 rates, all bounded to (0, 1) per day."""

    n_pop: float
    box: ParamBox = field(
        default_factory=lambda: ParamBox(
            ("beta", "alpha", "gamma", "mu"), np.zeros(4), np.ones(4)
        )
    )

    state_names = ("S", "E", "I", "R", "M")
    n_states = 5
    observed_state = 4  # M

    def rhs(self, s, omega, n_pop=None):
        n = self.n_pop if n_pop is None else n_pop
        return seirm_rhs(s, omega, n)

    def rhs_fraction(self, s, omega):
        """Dynamics of state fractions s/N (exact by homogeneity)."""
        return seirm_rhs(s, omega, 1.0)

    def observable_fraction(self, s, omega):
        """Fraction-space observable: cumulative mortality M/N."""
        return s[4]


DEFAULT_SIRS_BOX = ParamBox(
    ("beta", "D", "L"),
    np.array([0.0, 1.0, 180.0]),
    np.array([2.0, 14.0, 3650.0]),
)


@dataclass(frozen=True)
class Sirs:
    """SIRS model: 3 states; beta in (0,2)/day, D in (1,14) d, L in (180,3650) d."""

    n_pop: float
    outpatient_ratio: float = 0.05
    box: ParamBox = field(default_factory=lambda: DEFAULT_SIRS_BOX)

    state_names = ("S", "I", "R")
    n_states = 3
    observed_state = None  # observed through the ILI mapping

    def __post_init__(self):
        if not (0.0 < self.outpatient_ratio <= 1.0):
            raise ConfigError(
                f"outpatient ratio must be in (0, 1], got {self.outpatient_ratio}"
            )

    def rhs(self, s, omega, n_pop=None):
        n = self.n_pop if n_pop is None else n_pop
        return sirs_rhs_full(s, omega, n)

    def rhs_fraction(self, s, omega):
        return sirs_rhs_full(s, omega, 1.0)

    def observable_fraction(self, s, omega):
        """Fraction-space ILI: beta * i * s / OR for fractions (s, i)."""
        return omega[0] * s[1] * s[0] / self.outpatient_ratio


# -- integrator ---------------------------------------------------------------

def rk4_integrate(rhs, s0, omega_schedule, step: float, n_steps: int, floor=None):
    """Classic fixed-step RK4 with parameters held constant within a step.

    ``omega_schedule`` supplies the parameter vector for each step (length
    >= n_steps).  ``floor`` < 0, when given, aborts with the step index if
    any state drops below it.  Returns an (n_steps+1, D) trajectory.
    """
    if step <= 0:
        raise DomainError(f"step must be positive, got {step}")
    omega_schedule = np.asarray(omega_schedule, dtype=np.float64)
    if omega_schedule.ndim == 1:
        omega_schedule = np.broadcast_to(omega_schedule, (n_steps, omega_schedule.size))
    if omega_schedule.shape[0] < n_steps:
        raise DomainError(
            f"parameter schedule has {omega_schedule.shape[0]} entries, need {n_steps}"
        )
    s = np.asarray(s0, dtype=np.float64).copy()
    out = np.empty((n_steps + 1, s.size))
    out[0] = s
    for i in range(n_steps):
        w = omega_schedule[i]
        k1 = np.asarray(rhs(s, w))
        k2 = np.asarray(rhs(s + 0.5 * step * k1, w))
        k3 = np.asarray(rhs(s + 0.5 * step * k2, w))
        k4 = np.asarray(rhs(s + step * k3, w))
        s = s + (step / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if floor is not None and np.any(s < floor):
            raise StabilityError(
                f"negative compartment at step {i + 1}: min={s.min():.3e}"
            )
        out[i + 1] = s
    return out


def simulate(model, s0, omega_schedule, n_steps, step=1.0):
    """RK4 trajectory of a model bundle in person units, with the
    non-negativity guard scaled to the population."""
    rhs = lambda s, w: np.asarray(model.rhs(s, w))
    return rk4_integrate(rhs, s0, omega_schedule, step, n_steps, floor=-1e-9 * model.n_pop)
