"""Recurrent feature model: bidirectional GRU encoder over daily signals,
attention pooling to a summary vector, a time-conditioned bidirectional GRU
decoder producing embeddings aligned with the time module, and the
gradient-matching machinery that transfers the learned dynamics.

The decoder consumes only (normalized) time values, so it can be rolled over
training days for the alignment losses and over future weekly times for
forecasts without touching post-window data.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Dual, Node, Tape
from .ode import Seirm
from .timenet import _affine, _init_affine, loss_ode_residual, predicted_observable

__all__ = ["FeatureNet", "encode", "decode", "feature_losses"]


class FeatureNet:
    """Encoder GRU + attention + decoder GRU + projection to the shared
    embedding size.  The output head lives on the TimeNet (shared layers)."""

    def __init__(self, model_config, n_features: int, rng: np.random.Generator):
        mc = model_config
        self.n_features = n_features
        self.enc_hidden = mc.encoder_hidden
        self.enc_layers = mc.encoder_layers
        self.dec_hidden = mc.decoder_hidden
        self.embed_dim = mc.embed_dim
        self.summary_dim = 2 * mc.encoder_hidden
        if 2 * self.dec_hidden != self.summary_dim:
            raise ValueError("decoder hidden size must be half the summary size")
        self.params: dict[str, np.ndarray] = {}

        d_in = n_features
        for layer in range(self.enc_layers):
            for direction in ("f", "b"):
                self._init_gru(f"enc{layer}{direction}", d_in, self.enc_hidden, rng)
            d_in = 2 * self.enc_hidden
        dsum = self.summary_dim
        _init_affine(self.params, "attn_q", dsum, dsum, rng)
        _init_affine(self.params, "attn_k", dsum, dsum, rng)
        for direction in ("f", "b"):
            self._init_gru(f"dec{direction}", 1, self.dec_hidden, rng)
        _init_affine(self.params, "proj", 2 * self.dec_hidden, self.embed_dim, rng)

    def _init_gru(self, name, d_in, hidden, rng):
        p = self.params
        p[f"{name}_W"] = rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, 3 * hidden))
        p[f"{name}_U"] = rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(hidden, 3 * hidden))
        p[f"{name}_bx"] = np.zeros(3 * hidden)
        p[f"{name}_bh"] = np.zeros(3 * hidden)

    def param_names(self):
        return list(self.params)

    def bind(self, tape: Tape, trainable=True, prefix="feat/") -> dict:
        out = {}
        for k, v in self.params.items():
            out[k] = tape.param(v, prefix + k) if trainable else tape.constant(v)
        return out


def _gru_pass(bound, name, x_rows, hidden, h0=None, reverse=False):
    """One GRU direction over a sequence of row nodes; returns per-step
    hidden-state nodes in forward time order."""
    tape = x_rows.tape
    T = x_rows.value.shape[0]
    H = hidden
    gates_x = x_rows @ bound[f"{name}_W"] + bound[f"{name}_bx"]  # (T, 3H)
    h = tape.constant(np.zeros(H)) if h0 is None else h0
    U = bound[f"{name}_U"]
    bh = bound[f"{name}_bh"]
    order = range(T - 1, -1, -1) if reverse else range(T)
    hs = [None] * T
    for i in order:
        gx = gates_x[i]
        gh = h @ U + bh
        r = ad.sigmoid(gx[0:H] + gh[0:H])
        z = ad.sigmoid(gx[H : 2 * H] + gh[H : 2 * H])
        n = ad.tanh(gx[2 * H : 3 * H] + r * gh[2 * H : 3 * H])
        h = (1.0 - z) * n + z * h
        hs[i] = h
    return hs


class EncoderState:
    """Per-step hidden states, masked-softmax attention weights, and the
    attention-weighted summary used to seed the decoder."""

    def __init__(self, hidden: Node, weights: np.ndarray, summary: Node, mask: np.ndarray):
        self.hidden = hidden  # (T, 2H) node
        self.weights = weights  # (T,) numpy, exact zeros on masked steps
        self.summary = summary  # (2H,) node
        self.mask = mask


def encode(net: FeatureNet, bound, x_scaled: np.ndarray, mask=None) -> EncoderState:
    """GRU stack + attention pooling.  ``mask`` marks valid steps; only
    trailing padding is supported, and padded steps get attention weight
    exactly 0 (they are never touched by the recurrences either)."""
    tape = _tape_of(bound)
    x_scaled = np.asarray(x_scaled, dtype=np.float64)
    T_full = x_scaled.shape[0]
    if mask is None:
        mask = np.ones(T_full, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    n_valid = int(mask.sum())
    if n_valid == 0:
        raise ValueError("all-masked sequence: nothing to encode")
    if not np.all(mask[:n_valid]):
        raise ValueError("only trailing padding is supported in the mask")

    rows = tape.constant(x_scaled[:n_valid])
    for layer in range(net.enc_layers):
        hf = _gru_pass(bound, f"enc{layer}f", rows, net.enc_hidden)
        hb = _gru_pass(bound, f"enc{layer}b", rows, net.enc_hidden, reverse=True)
        rows = ad.stack([ad.concat([a, b]) for a, b in zip(hf, hb)])
    hidden = rows  # (n_valid, 2H)

    # scaled dot-product attention: query from the last valid step
    q = _affine(bound, "attn_q", hidden[n_valid - 1])
    keys = _affine(bound, "attn_k", hidden)
    scores = keys @ q * (1.0 / np.sqrt(net.summary_dim))  # (n_valid,)
    smax = float(scores.value.max())
    e = ad.exp(scores - smax)
    a = e / e.sum()
    summary = (hidden * a.reshape(-1, 1)).sum(axis=0)

    weights = np.zeros(T_full)
    weights[:n_valid] = a.value
    return EncoderState(hidden=hidden, weights=weights, summary=summary, mask=mask)


def decode(net: FeatureNet, bound, summary: Node, times: np.ndarray) -> Node:
    """Embeddings at the given normalized times: bidirectional GRU seeded
    with the summary, one step per time value, projected to the shared
    embedding dimension.  Returns a (len(times), D_e) node."""
    tape = _tape_of(bound)
    times = np.atleast_1d(np.asarray(times, dtype=np.float64))
    rows = tape.constant(times[:, None])
    H = net.dec_hidden
    h0f = summary[0:H]
    h0b = summary[H : 2 * H]
    hf = _gru_pass(bound, "decf", rows, H, h0=h0f)
    hb = _gru_pass(bound, "decb", rows, H, h0=h0b, reverse=True)
    stacked = ad.stack([ad.concat([a, b]) for a, b in zip(hf, hb)])
    return _affine(bound, "proj", stacked)


def _tape_of(bound) -> Tape:
    return next(iter(bound.values())).tape


# -- alignment and transfer losses -------------------------------------------


def loss_embedding(e_time: Node, e_feat: Node) -> Node:
    """Mean over days of the squared embedding gap (Dual inputs accepted)."""
    et = e_time.val if isinstance(e_time, Dual) else e_time
    ef = e_feat.val if isinstance(e_feat, Dual) else e_feat
    d = et - ef
    return (d * d).sum(axis=1).mean()


def loss_output_distillation(s_time: Node, s_feat: Node) -> Node:
    """Mean over days of the squared state-vector gap between the modules."""
    st = s_time.val if isinstance(s_time, Dual) else s_time
    sf = s_feat.val if isinstance(s_feat, Dual) else s_feat
    d = st - sf
    return (d * d).sum(axis=1).mean()


def loss_ode_feature(model, view, timenet, head_bound, e_feat: Node, dedt_time, omega: Node):
    """Feature-module ODE residual via the chain-rule trick.

    d(states)/dt is approximated by the head's Jacobian-vector product at
    the feature embedding in the direction of the *time module's* embedding
    time-derivative; exact whenever the two embeddings coincide.  Returns
    (loss, s_feat_dual).
    """
    dedt = dedt_time.tan if isinstance(dedt_time, Dual) else dedt_time
    if dedt is None:
        raise ValueError("time-module embeddings carry no time tangent")
    sf = timenet.head(head_bound, Dual(e_feat, dedt))
    return loss_ode_residual(model, sf, omega, view.span_days), sf


def loss_data_feature(model, view, s_feat: Node, omega: Node) -> Node:
    if view.obs_scaled.size == 0:
        raise ValueError("no observations in the training window")
    pred = predicted_observable(model, view, s_feat, omega)
    r = pred - view.obs_scaled
    return (r * r).mean()


# -- forecasting ----------------------------------------------------------------


def forecast_observable(model, view, timenet, featnet, time_bound, feat_bound, horizons: int,
                        omega_last: np.ndarray = None, margin_weeks: int = None):
    """Point forecasts for horizons 1..K in natural units.

    Encodes the full window, decodes at end-of-week times (including the
    window end as an anchor), maps through the shared head, and converts:
    covid = week-over-week difference of predicted cumulative deaths,
    flu = the decoded ILI value (which needs the last table day's parameters
    via ``omega_last``).  Returns (values, flagged) where ``flagged`` marks
    horizons beyond the decoder's trained-range margin.
    """
    state = encode(featnet, feat_bound, view.X_scaled, view.mask)
    times = view.future_week_times(horizons)
    e_f = decode(featnet, feat_bound, state.summary, times)
    s_f = timenet.head(time_bound, Dual(e_f, None))
    s_vals = s_f.val.value

    if isinstance(model, Seirm):
        m_pred = s_vals[:, 4] * view.n_pop
        vals = np.maximum(np.diff(m_pred), 0.0)
    else:
        if omega_last is None:
            raise ValueError("flu forecasts need the last parameter-table row")
        vals = np.array(
            [
                max(float(model.observable_fraction(s_vals[k], omega_last)), 0.0)
                for k in range(1, horizons + 1)
            ]
        )
    if margin_weeks is None:
        margin_weeks = horizons
    flagged = np.arange(1, horizons + 1) > margin_weeks
    return vals, flagged
