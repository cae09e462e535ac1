"""Two-phase training: joint fitting of both modules, then gradient-matching
refinement of the shared head and parameter table with everything else frozen.

Phase 1 trains all parameters on every loss except the feature-module ODE
residual (its chain-rule approximation is only valid once the embeddings
agree).  Phase 2 freezes both trunks/encoders; the frozen embeddings and
their time-derivatives are then constants, so each phase-2 epoch costs a
head pass only.
"""

from __future__ import annotations

import json
import time

import numpy as np

from . import featurenet as fn
from . import timenet as tn
from .autodiff import Dual, Tape, grad
from .calibration import calibrated_trajectory
from .featurenet import FeatureNet
from .ode import Seirm
from .timenet import OmegaTable, TimeNet

__all__ = ["Adam", "EinnTrainer", "TrainingError", "PhaseGateError"]


class TrainingError(RuntimeError):
    """Non-finite loss; the message names the offending term."""


class PhaseGateError(RuntimeError):
    """The embedding-alignment precondition for phase 2 could not be met."""


class Adam:
    """Adaptive moment optimizer on a dict of named parameter arrays."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, store: dict, grads: dict):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1**self.t)
            vhat = v / (1 - b2**self.t)
            store[name] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def _finite_or_raise(terms: dict):
    for name, node in terms.items():
        if not np.isfinite(node.value):
            raise TrainingError(f"non-finite loss term {name!r}: {node.value}")


class EinnTrainer:
    """Owns both networks, the parameter table, and the training schedule for
    one region/window.  ``grad_matching=False`` reproduces the ablation that
    drops the embedding-alignment and feature-ODE losses."""

    def __init__(self, view, config, calibration, log_path=None):
        self.view = view
        self.config = config
        self.weights = config.losses
        self.plan = config.train
        self.model = view.dataset.model()
        self.grad_matching = config.train.grad_matching
        rng = np.random.default_rng(config.train.seed)
        self.timenet = TimeNet(config.model, self.model.n_states, rng)
        self.featnet = FeatureNet(config.model, view.X_scaled.shape[1], rng)
        self.calibration = calibration
        omega_init = calibration.daily_schedule(view.n_train)
        self.table = OmegaTable(self.model.box, view.n_train, omega_init)
        traj = calibrated_trajectory(self.model, calibration, view.n_train)
        self.reference = traj[1:] / self.model.n_pop  # end-of-day fractions
        self.history: list[dict] = []
        self.log_path = log_path
        self._encoder_state = None  # cached after phase 2 for forecasting
        self.diagnostics: dict = {}

    # -- parameter plumbing -----------------------------------------------

    def _store(self) -> dict:
        out = {f"time/{k}": v for k, v in self.timenet.params.items()}
        out.update({f"feat/{k}": v for k, v in self.featnet.params.items()})
        out["omega_theta"] = self.table.theta
        return out

    def head_param_names(self):
        return [f"time/{n}_{s}" for n in self.timenet.head_names for s in ("W", "b")]

    def _bind(self, tape: Tape, trainable_names):
        store = self._store()
        tb, fb = {}, {}
        theta = None
        bound = {}
        for name, arr in store.items():
            node = (
                tape.param(arr, name)
                if trainable_names is None or name in trainable_names
                else tape.constant(arr)
            )
            bound[name] = node
            if name.startswith("time/"):
                tb[name[5:]] = node
            elif name.startswith("feat/"):
                fb[name[5:]] = node
            else:
                theta = node
        return tb, fb, theta, bound

    # -- loss assembly ------------------------------------------------------

    def _phase1_losses(self):
        view, model = self.view, self.model
        tape = Tape()
        tb, fb, theta, bound = self._bind(tape, None)
        omega = self.table.omega_node(theta)
        t_dual = tape.seed_scalar(view.day_times())
        e, s = self.timenet.forward(tb, t_dual)

        terms = {
            "ode_t": tn.loss_ode_residual(model, s, omega, view.span_days),
            "data_t": tn.loss_data(model, view, s.val, omega),
            "mono": tn.loss_monotonicity(model, s, view.span_days),
            "param": tn.loss_param_consistency(omega),
            "helper": tn.loss_helper_reference(s.val, self.reference),
        }
        state = fn.encode(self.featnet, fb, view.X_scaled, view.mask)
        ef = fn.decode(self.featnet, fb, state.summary, view.day_times())
        sf = self.timenet.head(tb, Dual(ef, None))
        terms["emb"] = fn.loss_embedding(e.val, ef)
        terms["data_f"] = fn.loss_data_feature(model, view, sf.val, omega)
        terms["output"] = fn.loss_output_distillation(s.val, sf.val)
        return tape, bound, terms

    def _weighted_total(self, tape, terms: dict, include_ode_f: bool):
        w = self.weights
        weight_of = {
            "ode_t": w.w_ode,
            "data_t": w.w_data_t,
            "mono": w.w_mono,
            "param": w.w_param,
            "helper": w.w_helper,
            "emb": w.w_emb if self.grad_matching else 0.0,
            "data_f": w.w_data_f,
            "output": w.w_output,
            "ode_f": w.w_ode if (include_ode_f and self.grad_matching) else 0.0,
        }
        total = tape.constant(0.0)
        for name, node in terms.items():
            wt = weight_of[name]
            if wt != 0.0:
                total = total + node * wt
        return total

    # -- phases ---------------------------------------------------------------

    def run_phase1(self, epochs: int):
        adam = Adam(self.plan.lr)
        store = self._store()
        emb_val = np.inf
        for epoch in range(epochs):
            t0 = time.perf_counter()
            tape, bound, terms = self._phase1_losses()
            total = self._weighted_total(tape, terms, include_ode_f=False)
            _finite_or_raise({**terms, "total": total})
            names = [n for n, node in bound.items() if node.is_param]
            gs = grad(total, [bound[n] for n in names])
            adam.step(store, dict(zip(names, gs)))
            emb_val = float(terms["emb"].value)
            self._log(1, epoch, total, terms, t0)
        return emb_val

    def _freeze_embeddings(self):
        """One frozen forward pass; embeddings and their time-derivatives
        become constants for every phase-2 epoch."""
        view = self.view
        tape = Tape()
        tb, fb, _, _ = self._bind(tape, set())
        t_dual = tape.seed_scalar(view.day_times())
        e, _ = self.timenet.forward(tb, t_dual)
        state = fn.encode(self.featnet, fb, view.X_scaled, view.mask)
        ef = fn.decode(self.featnet, fb, state.summary, view.day_times())
        return e.val.value.copy(), e.tan.value.copy(), ef.value.copy()

    def run_phase2(self, epochs: int):
        e_val, e_tan, ef_val = self._freeze_embeddings()
        self.diagnostics["eq5"] = self._eq5_gap(e_tan, ef_val)
        view, model = self.view, self.model
        trainable = set(self.head_param_names()) | {"omega_theta"}
        adam = Adam(self.plan.lr)
        store = self._store()
        for epoch in range(epochs):
            t0 = time.perf_counter()
            tape = Tape()
            tb, fb, theta, bound = self._bind(tape, trainable)
            omega = self.table.omega_node(theta)
            e = Dual(tape.constant(e_val), tape.constant(e_tan))
            ef = tape.constant(ef_val)
            s = self.timenet.head(tb, e)
            terms = {
                "ode_t": tn.loss_ode_residual(model, s, omega, view.span_days),
                "data_t": tn.loss_data(model, view, s.val, omega),
                "mono": tn.loss_monotonicity(model, s, view.span_days),
                "param": tn.loss_param_consistency(omega),
                "helper": tn.loss_helper_reference(s.val, self.reference),
                "emb": fn.loss_embedding(e.val, ef),
            }
            if self.grad_matching:
                ode_f, sf = fn.loss_ode_feature(model, view, self.timenet, tb, ef, e, omega)
                terms["ode_f"] = ode_f
            else:
                sf = self.timenet.head(tb, Dual(ef, None))
            terms["data_f"] = fn.loss_data_feature(model, view, sf.val, omega)
            terms["output"] = fn.loss_output_distillation(s.val, sf.val)
            total = self._weighted_total(tape, terms, include_ode_f=True)
            _finite_or_raise({**terms, "total": total})
            names = [n for n in trainable if bound[n].is_param]
            gs = grad(total, [bound[n] for n in names])
            adam.step(store, dict(zip(names, gs)))
            self._log(2, epoch, total, terms, t0)

    def _eq5_gap(self, e_tan, ef_val):
        """Bound on the chain-rule approximation error: the head Jacobian norm
        times the embedding-derivative gap, plus the measured residual gap."""
        view = self.view
        dt_day = 1.0
        def_dt = np.gradient(ef_val, dt_day, axis=0) * view.span_days  # d ef / d t_norm
        gap_dir = np.max(np.linalg.norm(e_tan - def_dt, axis=1))
        tape = Tape()
        tb = self.timenet.bind(tape, trainable=False)
        mid = tape.seed_vector(ef_val.mean(axis=0))
        s_mid = self.timenet.head(tb, mid)
        from .autodiff import jacobian

        J = jacobian(s_mid, mid).value
        bound = float(np.linalg.norm(J) * gap_dir / view.span_days)
        return {"jacobian_norm": float(np.linalg.norm(J)), "deriv_gap": float(gap_dir), "bound": bound}

    def train(self):
        """Full schedule: phase 1, embedding gate (with one optional
        extension), then phase 2.  Returns self."""
        emb_val = self.run_phase1(self.plan.phase1_epochs)
        if self.grad_matching and emb_val >= self.plan.emb_threshold:
            if self.plan.extend_phase1:
                emb_val = self.run_phase1(self.plan.phase1_epochs)
            if emb_val >= self.plan.emb_threshold:
                raise PhaseGateError(
                    f"embedding loss {emb_val:.3e} still above the phase-2 gate "
                    f"{self.plan.emb_threshold:.3e} after extending phase 1"
                )
        self.run_phase2(self.plan.phase2_epochs)
        return self

    def _log(self, phase, epoch, total, terms, t0):
        rec = {
            "phase": phase,
            "epoch": epoch,
            "total": float(total.value),
            "wall": time.perf_counter() - t0,
        }
        rec.update({k: float(v.value) for k, v in terms.items()})
        self.history.append(rec)
        if self.log_path:
            with open(self.log_path, "a") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    # -- inference -----------------------------------------------------------

    def forecast(self, horizons: int):
        tape = Tape()
        tb = self.timenet.bind(tape, trainable=False)
        fb = self.featnet.bind(tape, trainable=False)
        omega_last = self.table.omega_values()[-1]
        return fn.forecast_observable(
            self.model, self.view, self.timenet, self.featnet, tb, fb,
            horizons, omega_last=omega_last,
        )

    # -- persistence -----------------------------------------------------------

    def checkpoint(self) -> dict:
        """Named parameter arrays plus the Fourier matrix and normalization
        constants (everything needed to reproduce the forward pass)."""
        out = {f"time/{k}": v.copy() for k, v in self.timenet.params.items()}
        out.update({f"feat/{k}": v.copy() for k, v in self.featnet.params.items()})
        out["omega_theta"] = self.table.theta.copy()
        out["fourier_B"] = self.timenet.fourier.B.copy()
        out["norm/target_mean"] = np.array([self.view.target_scaler.mean[0]])
        out["norm/target_std"] = np.array([self.view.target_scaler.std[0]])
        out["norm/span_days"] = np.array([self.view.span_days])
        return out

    def load_checkpoint(self, arrays: dict):
        for k in self.timenet.params:
            self.timenet.params[k][:] = arrays[f"time/{k}"]
        for k in self.featnet.params:
            self.featnet.params[k][:] = arrays[f"feat/{k}"]
        self.table.theta[:] = arrays["omega_theta"]
        self.timenet.fourier.B[:] = arrays["fourier_B"]
