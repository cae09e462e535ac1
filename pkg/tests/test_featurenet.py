"""Encoder/attention/decoder behavior and the transfer-loss contracts."""

import numpy as np
import pytest

from conftest import assert_grad_matches_fd, small_model_config
from epiforge.autodiff import Dual, Tape, grad, jacobian
from epiforge.data import make_synthetic_world
from epiforge.featurenet import (
    FeatureNet,
    decode,
    encode,
    forecast_observable,
    loss_data_feature,
    loss_embedding,
    loss_ode_feature,
    loss_output_distillation,
)
from epiforge.ode import Seirm
from epiforge.timenet import OmegaTable, TimeNet, loss_ode_residual


def build_nets(seed=0, n_features=3, n_states=5, **kw):
    cfg = small_model_config(**kw)
    rng = np.random.default_rng(seed)
    tnet = TimeNet(cfg, n_states, rng)
    fnet = FeatureNet(cfg, n_features, rng)
    return tnet, fnet, cfg


class TestEncode:
    def test_single_step_weight_one_summary_is_hidden(self):
        _, fnet, _ = build_nets(seed=1)
        tape = Tape()
        bound = fnet.bind(tape)
        x = np.random.default_rng(0).normal(size=(1, 3))
        st = encode(fnet, bound, x)
        assert st.weights.tolist() == [1.0]
        assert np.allclose(st.summary.value, st.hidden.value[0], atol=0)

    def test_zero_weights_zero_summary(self):
        _, fnet, _ = build_nets(seed=2)
        for k in fnet.params:
            fnet.params[k][:] = 0.0
        tape = Tape()
        bound = fnet.bind(tape)
        st = encode(fnet, bound, np.ones((5, 3)))
        assert np.all(st.hidden.value == 0.0)
        assert np.all(st.summary.value == 0.0)

    def test_trailing_padding_equals_unpadded(self):
        _, fnet, _ = build_nets(seed=3)
        rng = np.random.default_rng(4)
        x = rng.normal(size=(6, 3))
        pad = np.concatenate([x, rng.normal(size=(3, 3))])
        mask = np.array([True] * 6 + [False] * 3)

        tape = Tape()
        bound = fnet.bind(tape)
        plain = encode(fnet, bound, x)
        padded = encode(fnet, bound, pad, mask)
        assert np.array_equal(plain.summary.value, padded.summary.value)
        assert np.array_equal(padded.weights[:6], plain.weights)
        assert np.all(padded.weights[6:] == 0.0)

    def test_attention_weights_sum_to_one(self):
        _, fnet, _ = build_nets(seed=5)
        tape = Tape()
        bound = fnet.bind(tape)
        st = encode(fnet, bound, np.random.default_rng(1).normal(size=(7, 3)))
        assert st.weights.sum() == pytest.approx(1.0, abs=1e-12)

    def test_all_masked_rejected(self):
        _, fnet, _ = build_nets()
        tape = Tape()
        bound = fnet.bind(tape)
        with pytest.raises(ValueError, match="all-masked"):
            encode(fnet, bound, np.ones((4, 3)), np.zeros(4, dtype=bool))


class TestDecode:
    def test_deterministic(self):
        _, fnet, _ = build_nets(seed=7)
        outs = []
        for _ in range(2):
            tape = Tape()
            bound = fnet.bind(tape)
            st = encode(fnet, bound, np.ones((4, 3)))
            outs.append(decode(fnet, bound, st.summary, np.array([0.5, 1.0])).value.copy())
        assert np.array_equal(outs[0], outs[1])

    def test_zero_projection_zero_embedding(self):
        _, fnet, _ = build_nets(seed=8)
        fnet.params["proj_W"][:] = 0.0
        fnet.params["proj_b"][:] = 0.0
        tape = Tape()
        bound = fnet.bind(tape)
        st = encode(fnet, bound, np.ones((4, 3)))
        ef = decode(fnet, bound, st.summary, np.array([0.25, 0.5, 1.0]))
        assert np.all(ef.value == 0.0)

    def test_head_jacobian_matches_fd(self):
        tnet, fnet, cfg = build_nets(seed=9)
        e0 = np.random.default_rng(2).normal(size=cfg.embed_dim) * 0.5
        h = 1e-5

        def head_val(e):
            tape = Tape()
            bound = tnet.bind(tape)
            return tnet.head(bound, Dual(tape.constant(e), None)).val.value

        fd = np.zeros((5, cfg.embed_dim))
        for i in range(cfg.embed_dim):
            ep, em = e0.copy(), e0.copy()
            ep[i] += h
            em[i] -= h
            fd[:, i] = (head_val(ep) - head_val(em)) / (2 * h)

        tape = Tape()
        bound = tnet.bind(tape)
        e = tape.seed_vector(e0)
        s = tnet.head(bound, e)
        J = jacobian(s, e)
        assert np.max(np.abs(J.value - fd) / (np.abs(fd) + 1e-8)) < 1e-4


def fit_view(n_days=21, seed=1):
    ds, truth = make_synthetic_world(
        np.array([0.3, 0.2, 0.12, 0.02]), 1e6, n_days, 0.0, seed=seed
    )
    return ds.view(n_days // 7 - 1), truth


class TestTransferLosses:
    def test_embedding_loss_cases(self):
        tape = Tape()
        e = tape.constant(np.random.default_rng(0).normal(size=(4, 20)))
        assert loss_embedding(e, e).value == 0.0
        ef = e + 0.1
        assert loss_embedding(e, ef).value == pytest.approx(20 * 0.01, rel=1e-9)
        a = tape.constant(np.random.default_rng(1).normal(size=(4, 20)))
        assert loss_embedding(e, a).value == pytest.approx(loss_embedding(a, e).value)

    def test_output_distillation_cases(self):
        tape = Tape()
        s = tape.constant(np.random.default_rng(0).normal(size=(3, 5)))
        assert loss_output_distillation(s, s).value == 0.0
        diff = np.zeros((3, 5))
        diff[:, 0] = 1.0
        sf = s + diff
        assert loss_output_distillation(s, sf).value == pytest.approx(1.0)

    def test_data_feature_hand_case(self):
        view, truth = fit_view()
        model = Seirm(1e6)
        # construct scaled predictions equal to observations -> loss 0
        tape = Tape()
        frac = truth["trajectory"][1 : view.n_train + 1] / 1e6
        table = OmegaTable(model.box, view.n_train, truth["schedule"][: view.n_train])
        omega = table.omega_node(table.bind(tape))
        assert loss_data_feature(model, view, tape.constant(frac), omega).value < 1e-18

    def test_feature_ode_loss_exact_when_embeddings_shared(self):
        # with e^F := e_t and the shared head, the chain rule collapses and
        # the feature residual equals the time residual bit-for-bit
        view, truth = fit_view()
        model = Seirm(1e6)
        tnet, fnet, cfg = build_nets(seed=11)
        table = OmegaTable(model.box, view.n_train, truth["schedule"][: view.n_train])

        tape = Tape()
        tb = tnet.bind(tape)
        omega = table.omega_node(table.bind(tape))
        e, s = tnet.forward(tb, tape.seed_scalar(view.day_times()))
        l_time = loss_ode_residual(model, s, omega, view.span_days)
        l_feat, sf = loss_ode_feature(model, view, tnet, tb, e.val, e, omega)
        assert abs(l_feat.value - l_time.value) <= 1e-10

    def test_jvp_matches_fd_time_derivative_of_head(self):
        # (ds/de)(de/dt) should equal d/dt head(e(t)) when e^F = e
        view, truth = fit_view()
        model = Seirm(1e6)
        tnet, fnet, cfg = build_nets(seed=13)

        def states_at(tval):
            tape = Tape()
            tb = tnet.bind(tape)
            _, s = tnet.forward(tb, tape.seed_scalar(np.array([tval])))
            return s.value[0]

        t0 = 0.4
        h = 1e-5
        fd = (states_at(t0 + h) - states_at(t0 - h)) / (2 * h)

        tape = Tape()
        tb = tnet.bind(tape)
        e, _ = tnet.forward(tb, tape.seed_scalar(np.array([t0])))
        sf = tnet.head(tb, Dual(e.val, e.tan))
        assert np.max(np.abs(sf.tan.value[0] - fd) / (np.abs(fd) + 1e-8)) < 1e-3


class TestFeatureGradients:
    def test_transfer_loss_gradients_match_fd(self):
        # toy sizes per the contract: T=3 days, 2 features, hidden 4
        rng = np.random.default_rng(31)
        view, truth = fit_view(n_days=21)
        model = Seirm(1e6)
        cfg_kw = dict(encoder_hidden=4, decoder_hidden=4)
        tnet, fnet, cfg = build_nets(seed=15, n_features=3, **cfg_kw)
        table = OmegaTable(model.box, view.n_train, truth["schedule"][: view.n_train])
        store = {}
        store.update({f"time/{k}": v for k, v in tnet.params.items()})
        store.update({f"feat/{k}": v for k, v in fnet.params.items()})

        def build():
            tape = Tape()
            tb = {k: tape.param(v, f"time/{k}") for k, v in tnet.params.items()}
            fb = {k: tape.param(v, f"feat/{k}") for k, v in fnet.params.items()}
            omega = table.omega_node(tape.constant(table.theta))
            e, s = tnet.forward(tb, tape.seed_scalar(view.day_times()))
            st = encode(fnet, fb, view.X_scaled)
            ef = decode(fnet, fb, st.summary, view.day_times())
            l_emb = loss_embedding(e.val, ef)
            l_odef, sf = loss_ode_feature(model, view, tnet, tb, ef, e, omega)
            l_kd = loss_output_distillation(s.val, sf.val)
            total = l_emb + l_odef + l_kd
            bound = {f"time/{k}": v for k, v in tb.items()}
            bound.update({f"feat/{k}": v for k, v in fb.items()})
            return total, bound

        assert_grad_matches_fd(build, store, rng, n_checks=2, rtol=1e-4)


class TestForecast:
    def test_shapes_flags_and_determinism(self):
        view, truth = fit_view(n_days=28)
        model = Seirm(1e6)
        tnet, fnet, cfg = build_nets(seed=17)
        runs = []
        for _ in range(2):
            tape = Tape()
            tb = tnet.bind(tape, trainable=False)
            fb = fnet.bind(tape, trainable=False)
            vals, flagged = forecast_observable(model, view, tnet, fnet, tb, fb, horizons=8)
            runs.append(vals)
            assert vals.shape == (8,)
            assert flagged.shape == (8,)
            assert not flagged.any()  # default margin = K
        assert np.array_equal(runs[0], runs[1])

    def test_margin_flagging(self):
        view, truth = fit_view(n_days=28)
        model = Seirm(1e6)
        tnet, fnet, cfg = build_nets(seed=18)
        tape = Tape()
        tb = tnet.bind(tape, trainable=False)
        fb = fnet.bind(tape, trainable=False)
        vals, flagged = forecast_observable(
            model, view, tnet, fnet, tb, fb, horizons=8, margin_weeks=4
        )
        assert flagged.tolist() == [False] * 4 + [True] * 4
