import copy

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from cagmamba import engine
from cagmamba.engine import Tensor, parameter
from cagmamba.gcmn import (
    GcmnLayer,
    GcmnStack,
    gcmn_layer_forward,
    gcmn_layer_macs,
    gcmn_layer_params,
    gcmn_stack_forward,
    last_valid_onehot,
    reinject,
)

KW = dict(state_dim=2, skip=True)


def _seqs(seed, bsz=2, L=3, f=4, scale=1.0):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((bsz, L, f)) * scale, rng.standard_normal((bsz, L, f)) * scale


def _layer(f=4, seed=0, gate_mode="learnable", **kw):
    return GcmnLayer(f, np.random.default_rng(seed), gate_mode, **{**KW, **kw})


def _swap_halves(W, f):
    return np.concatenate([W[f:], W[:f]], axis=0)


class TestLayer:
    def test_compositional_oracle(self):
        layer = _layer(f=4, seed=1)
        S_t, S_a = _seqs(2, L=2)
        out = gcmn_layer_forward(layer, S_t, S_a)
        t_ref, a_ref, gt_ref, ga_ref = oracles.gcmn_layer(layer, S_t, S_a)
        np.testing.assert_allclose(out.t_final.data, t_ref, rtol=1e-11, atol=1e-13)
        np.testing.assert_allclose(out.a_final.data, a_ref, rtol=1e-11, atol=1e-13)
        np.testing.assert_allclose(out.gate_t.data, gt_ref, rtol=1e-12)
        np.testing.assert_allclose(out.gate_a.data, ga_ref, rtol=1e-12)

    def test_audio_first_concatenation(self):
        layer = _layer(f=3, seed=3)
        S_t, S_a = _seqs(3, f=3)
        H = layer(S_t, S_a).parts["H_cross"].data
        ref = layer.bssm_cross(np.concatenate([S_a, S_t], axis=-1)).data
        np.testing.assert_array_equal(H, ref)

    def test_zero_gate_projection_gives_half(self):
        layer = _layer(seed=4)
        for g in (layer.gate_t, layer.gate_a):
            g.W.data[:] = 0.0
            g.b.data[:] = 0.0
        out = layer(*_seqs(4))
        p = out.parts
        np.testing.assert_array_equal(out.gate_t.data, 0.5)
        np.testing.assert_allclose(out.t_final.data, p["F_t_uni"].data + 0.5 * p["F_t_cross"].data, rtol=1e-15)
        np.testing.assert_allclose(out.a_final.data, p["F_a_uni"].data + 0.5 * p["F_a_cross"].data, rtol=1e-15)

    @pytest.mark.parametrize("zero_weights", [True, False])
    def test_saturated_low_gates_recover_unimodal(self, zero_weights):
        layer = _layer(seed=5)
        for g in (layer.gate_t, layer.gate_a):
            if zero_weights:
                g.W.data[:] = 0.0
            g.b.data[:] = -20.0 if zero_weights else -30.0
        out = layer(*_seqs(5))
        np.testing.assert_allclose(out.t_final.data, out.parts["F_t_uni"].data, rtol=0, atol=1e-8)
        np.testing.assert_allclose(out.a_final.data, out.parts["F_a_uni"].data, rtol=0, atol=1e-8)

    def test_fixed_gate(self):
        layer = _layer(seed=6, gate_mode="fixed")
        out = layer(*_seqs(6))
        assert not hasattr(layer, "gate_t")
        np.testing.assert_array_equal(out.gate_t.data, 0.5)
        np.testing.assert_allclose(
            out.t_final.data, out.parts["F_t_uni"].data + 0.5 * out.parts["F_t_cross"].data, rtol=1e-15
        )

    def test_single_path(self):
        layer = _layer(seed=7, gate_mode="single")
        assert not hasattr(layer, "bssm_text")
        S_t, S_a = _seqs(7)
        out = layer(S_t, S_a)
        H_last = layer.bssm_cross(np.concatenate([S_a, S_t], axis=-1)).data[:, -1]
        np.testing.assert_allclose(out.t_final.data, H_last @ layer.W_c2t.W.data, rtol=1e-12)
        assert out.gates == (None, None)

    def test_subblocks_have_disjoint_parameters(self):
        layer = _layer()
        ids = [id(p) for p in layer.named_parameters().values()]
        assert len(ids) == len(set(ids))
        assert layer.bssm_text is not layer.bssm_audio

    def test_modality_swap_symmetry(self):
        f = 3
        layer = _layer(f=f, seed=8)
        swapped = copy.deepcopy(layer)
        swapped.bssm_text, swapped.bssm_audio = swapped.bssm_audio, swapped.bssm_text
        swapped.W_c2t, swapped.W_c2a = swapped.W_c2a, swapped.W_c2t
        swapped.gate_t, swapped.gate_a = swapped.gate_a, swapped.gate_t
        # the concat order and the joint gate input both flip under the swap
        first = swapped.bssm_cross.mlp_in.layers[0].W
        first.data = _swap_halves(first.data, f)
        for g in (swapped.gate_t, swapped.gate_a):
            g.W.data = _swap_halves(g.W.data, f)
        S_t, S_a = _seqs(8, f=f)
        out = layer(S_t, S_a)
        sw = swapped(S_a, S_t)
        np.testing.assert_allclose(sw.t_final.data, out.a_final.data, rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(sw.a_final.data, out.t_final.data, rtol=1e-12, atol=1e-14)

    def test_length_mismatch_rejected(self):
        with pytest.raises(engine.ShapeError, match="gcmn"):
            _layer()(np.zeros((1, 3, 4)), np.zeros((1, 2, 4)))

    def test_unknown_gate_mode(self):
        with pytest.raises(ValueError, match="gate mode"):
            _layer(gate_mode="soft")


class TestGateRange:
    @settings(max_examples=30, deadline=None)
    @given(scale=st.floats(0.0, 50.0), seed=st.integers(0, 10_000))
    def test_gates_strictly_inside_unit_interval(self, scale, seed):
        layer = _layer(f=2, seed=seed % 7)
        out = layer(*_seqs(seed, f=2, scale=scale))
        for g in out.gates:
            assert np.all(g.data > 0.0) and np.all(g.data < 1.0)


class TestReadout:
    def test_last_valid_step(self):
        mask = np.array([[0, 0, 1, 1], [1, 1, 1, 1], [0, 1, 1, 0]], dtype=float)
        np.testing.assert_array_equal(np.argmax(last_valid_onehot(mask, 3, 4), axis=1), [3, 3, 2])

    def test_all_masked_rejected(self):
        with pytest.raises(ValueError, match="unmasked"):
            last_valid_onehot(np.zeros((1, 3)), 1, 3)

    def test_reinject_replaces_only_readout_slot(self):
        seq = Tensor(np.arange(12.0).reshape(1, 3, 4))
        out = reinject(seq, Tensor(-np.ones((1, 4))), None).data
        np.testing.assert_array_equal(out[0, :2], seq.data[0, :2])
        np.testing.assert_array_equal(out[0, 2], -1.0)


class TestStack:
    def test_single_layer_without_reverse_equals_layer(self):
        stack = GcmnStack(4, 1, np.random.default_rng(9), reverse=False, **KW)
        S_t, S_a = _seqs(9)
        out = gcmn_stack_forward(stack, S_t, S_a)
        ref = stack.layers[0](S_t, S_a)
        np.testing.assert_array_equal(out.t_final.data, ref.t_final.data)
        np.testing.assert_array_equal(out.a_final.data, ref.a_final.data)
        assert out.t_ctx is None

    @pytest.mark.parametrize("gate_mode", ["learnable", "fixed", "single"])
    def test_two_layers_equal_manual_chaining(self, gate_mode):
        stack = GcmnStack(4, 2, np.random.default_rng(10), gate_mode, reverse=False, **KW)
        S_t, S_a = _seqs(10)
        first = stack.layers[0](S_t, S_a)
        # documented wiring: readout slot <- F_final, other slots <- stream outputs
        nt = first.t_seq.data.copy()
        na = first.a_seq.data.copy()
        nt[:, -1] = first.t_final.data
        na[:, -1] = first.a_final.data
        second = stack.layers[1](nt, na)
        out = stack(S_t, S_a)
        np.testing.assert_allclose(out.t_final.data, second.t_final.data, rtol=1e-13, atol=1e-15)
        np.testing.assert_allclose(out.a_final.data, second.a_final.data, rtol=1e-13, atol=1e-15)

    def test_flip_swaps_main_and_context_finals(self):
        stack = GcmnStack(4, 2, np.random.default_rng(11), **KW)
        S_t, S_a = _seqs(11, L=4)
        out = stack(S_t, S_a)
        rev = stack(S_t[:, ::-1].copy(), S_a[:, ::-1].copy())
        np.testing.assert_allclose(rev.t_final.data, out.t_ctx.data, rtol=1e-13)
        np.testing.assert_allclose(rev.t_ctx.data, out.t_final.data, rtol=1e-13)
        np.testing.assert_allclose(rev.a_final.data, out.a_ctx.data, rtol=1e-13)

    def test_reverse_pass_shares_parameters(self):
        with_rev = GcmnStack(4, 2, np.random.default_rng(12), reverse=True, **KW)
        without = GcmnStack(4, 2, np.random.default_rng(12), reverse=False, **KW)
        assert with_rev.num_params() == without.num_params()
        assert len(with_rev(*_seqs(12)).gates) == 4

    def test_context_needs_two_steps(self):
        stack = GcmnStack(4, 1, np.random.default_rng(0), **KW)
        with pytest.raises(ValueError, match="L=1"):
            stack(*_seqs(0, L=1))
        out = stack(*_seqs(0, L=1), context=False)
        assert out.t_ctx is None

    def test_left_padding_is_invisible(self):
        stack = GcmnStack(3, 2, np.random.default_rng(13), **KW)
        S_t, S_a = _seqs(13, L=3, f=3)
        rng = np.random.default_rng(14)
        pad = lambda S: np.concatenate([rng.standard_normal((2, 2, 3)) * 10, S], axis=1)  # noqa: E731
        mask = np.array([[0, 0, 1, 1, 1]] * 2, dtype=float)
        ref = stack(S_t, S_a)
        out = stack(pad(S_t), pad(S_a), mask, mask)
        for name in ("t_final", "a_final", "t_ctx", "a_ctx"):
            np.testing.assert_allclose(getattr(out, name).data, getattr(ref, name).data, atol=1e-12)

    def test_needs_a_layer(self):
        with pytest.raises(ValueError):
            GcmnStack(4, 0, np.random.default_rng(0))

    def test_gradients_through_full_stack(self):
        stack = oracles.condition_for_gradcheck(GcmnStack(2, 2, np.random.default_rng(15), state_dim=1, skip=True))
        S_t = parameter(5.0 * np.random.default_rng(16).standard_normal((2, 3, 2)))
        S_a = parameter(5.0 * np.random.default_rng(17).standard_normal((2, 3, 2)))

        def fn():
            o = stack(S_t, S_a)
            return engine.concat([o.t_final, o.a_final, o.t_ctx, o.a_ctx], axis=-1)

        inputs = [S_t, S_a, *stack.named_parameters().values()]
        assert engine.gradcheck(fn, inputs, seed=15) < 1e-5


class TestCost:
    @pytest.mark.parametrize("gate_mode", ["learnable", "fixed", "single"])
    @pytest.mark.parametrize("skip", [False, True])
    def test_param_formula(self, gate_mode, skip):
        layer = GcmnLayer(3, np.random.default_rng(0), gate_mode, state_dim=2, skip=skip)
        assert layer.num_params() == gcmn_layer_params(3, gate_mode, state_dim=2, skip=skip)

    @pytest.mark.parametrize("gate_mode", ["learnable", "fixed", "single"])
    def test_mac_formula(self, gate_mode):
        layer = GcmnLayer(3, np.random.default_rng(0), gate_mode, state_dim=2)
        with engine.count_macs() as box:
            layer(*_seqs(0, bsz=2, L=4, f=3))
        assert box[0] == gcmn_layer_macs(2, 4, 3, gate_mode, state_dim=2)
