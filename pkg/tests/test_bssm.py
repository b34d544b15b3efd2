import time

import numpy as np
import pytest

import oracles
from cagmamba import engine
from cagmamba.bssm import BssmBlock, bssm_forward, bssm_macs, bssm_params
from cagmamba.engine import Tensor, parameter


def _block(d=3, seed=0, **kw):
    kw.setdefault("state_dim", 2)
    return BssmBlock(d, np.random.default_rng(seed), **kw)


class PassThrough:
    """Stands in for an SSM with A_bar = 0 and C . B_bar = 1, so y_t = x_t."""

    def __call__(self, x, method="sequential"):
        return x


class TestForward:
    @pytest.mark.parametrize("shape", [(1, 1, 3), (2, 5, 3), (4, 2, 3)])
    def test_shape_preserved(self, shape):
        X = np.random.default_rng(0).standard_normal(shape)
        assert bssm_forward(_block(), X).shape == shape

    def test_expansion_width(self):
        blk = _block(d=5, expand=3)
        assert blk.d_inner == 15 and blk.mlp_in.layers[0].W.shape == (5, 15)
        assert blk.mlp_gate.layers[0].W.shape == (15, 15)

    @pytest.mark.parametrize("skip", [False, True])
    def test_single_step_hand_composition(self, skip):
        blk = _block(d=3, seed=4, skip=skip)
        X = np.random.default_rng(1).standard_normal((2, 1, 3))
        np.testing.assert_allclose(blk(X).data, oracles.bssm(blk, X), rtol=1e-12, atol=1e-14)

    @pytest.mark.parametrize("L", [2, 3, 6])
    def test_matches_loop_oracle(self, L):
        blk = _block(d=2, seed=L, skip=True, state_dim=3)
        X = np.random.default_rng(L).standard_normal((2, L, 2))
        np.testing.assert_allclose(blk(X).data, oracles.bssm(blk, X), rtol=1e-11, atol=1e-13)

    def test_pass_through_configuration(self):
        blk = _block(d=3, seed=2)
        for conv in (blk.conv_fwd, blk.conv_bwd):
            conv.W.data[:] = 0.0
            conv.W.data[:, 0] = 1.0
            conv.b.data[:] = 0.0
        blk.ssm_fwd = PassThrough()
        blk.ssm_bwd = PassThrough()
        X = np.random.default_rng(3).standard_normal((2, 4, 3))
        parts = blk.forward_parts(X)
        Z = parts["Z"].data
        np.testing.assert_allclose(parts["O_bi"].data, oracles.silu(Z) * oracles.silu(Z), rtol=1e-14)

    def test_backward_branch_reads_future(self):
        blk = _block(d=2, seed=5)
        X = np.random.default_rng(0).standard_normal((1, 5, 2))
        X2 = X.copy()
        X2[:, 4] += 1.0
        # the backward branch lets the last step influence every earlier one
        assert np.all(np.abs(blk(X).data[:, :4] - blk(X2).data[:, :4]) > 0)

    def test_left_padding_masked_out(self):
        blk = _block(d=3, seed=6, skip=True)
        rng = np.random.default_rng(7)
        real = rng.standard_normal((2, 3, 3))
        padded = np.concatenate([rng.standard_normal((2, 2, 3)) * 50, real], axis=1)
        mask = np.array([[0, 0, 1, 1, 1]] * 2, dtype=float)
        out = blk(padded, mask=mask).data
        np.testing.assert_allclose(out[:, 2:], blk(real).data, atol=1e-12)

    def test_parallel_method_matches(self):
        blk = _block(d=3, seed=8)
        X = np.random.default_rng(8).standard_normal((2, 9, 3))
        np.testing.assert_allclose(blk(X, method="parallel").data, blk(X).data, atol=1e-12)

    def test_dropout_only_in_training(self):
        blk = _block(d=3, seed=9, dropout=0.5)
        X = np.random.default_rng(9).standard_normal((2, 3, 3))
        a = blk(X).data
        np.testing.assert_array_equal(a, blk(X, train=False).data)
        b = blk(X, rng=np.random.default_rng(0), train=True).data
        assert np.any(a != b)

    def test_shape_error(self):
        with pytest.raises(engine.ShapeError, match="bssm"):
            _block(d=3)(np.zeros((1, 2, 4)))


class TestFlipEquivariance:
    @pytest.mark.parametrize("L", [1, 2, 3, 4, 8])
    def test_tied_block(self, L):
        for seed in range(20):
            blk = _block(d=3, seed=seed, tied=True, skip=bool(seed % 2))
            X = np.random.default_rng(100 + seed).standard_normal((2, L, 3))
            lhs = blk(X[:, ::-1].copy()).data
            rhs = blk(X).data[:, ::-1]
            np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-9)

    def test_untied_block_is_not_equivariant(self):
        blk = _block(d=3, seed=1, skip=True)
        X = np.random.default_rng(1).standard_normal((1, 4, 3))
        assert np.max(np.abs(blk(X[:, ::-1].copy()).data - blk(X).data[:, ::-1])) > 1e-3

    def test_tied_shares_parameters(self):
        blk = _block(tied=True)
        assert blk.ssm_fwd is blk.ssm_bwd and blk.conv_fwd is blk.conv_bwd
        untied = _block()
        assert untied.num_params() - blk.num_params() == (
            untied.conv_bwd.num_params() + untied.ssm_bwd.num_params()
        )


class TestGradients:
    @pytest.mark.parametrize("skip", [False, True])
    def test_end_to_end(self, skip):
        blk = _block(d=3, seed=10, state_dim=2, skip=skip)
        # a large constant output offset would swamp the O(1e-8) differences
        blk.mlp_out.layers[0].b.data[:] = 0.0
        X = parameter(np.random.default_rng(10).standard_normal((2, 3, 3)))
        inputs = [X, *blk.named_parameters().values()]
        assert engine.gradcheck(lambda: blk(X), inputs, seed=10) < 1e-5

    def test_masked(self):
        blk = _block(d=2, seed=11, skip=True)
        blk.mlp_out.layers[0].b.data[:] = 0.0
        X = parameter(np.random.default_rng(11).standard_normal((2, 4, 2)))
        mask = np.array([[0, 1, 1, 1], [1, 1, 1, 1]], dtype=float)
        inputs = [X, *blk.named_parameters().values()]
        assert engine.gradcheck(lambda: blk(X, mask=mask), inputs, seed=11) < 1e-5


class TestCost:
    @pytest.mark.parametrize("hidden", [None, 5])
    @pytest.mark.parametrize("skip", [False, True])
    def test_param_formula(self, hidden, skip):
        blk = BssmBlock(4, np.random.default_rng(0), expand=2, state_dim=3, kernel=4, mlp_hidden=hidden, skip=skip)
        assert blk.num_params() == bssm_params(4, 2, 3, 4, hidden, skip)

    @pytest.mark.parametrize("hidden", [None, 5])
    def test_mac_formula(self, hidden):
        blk = BssmBlock(4, np.random.default_rng(0), state_dim=3, mlp_hidden=hidden)
        with engine.count_macs() as box:
            blk(Tensor(np.zeros((2, 7, 4))))
        assert box[0] == bssm_macs(2, 7, 4, 2, 3, 4, hidden)

    def test_linear_time(self):
        blk = _block(d=2, seed=0)

        def best_of(L, reps=3):
            X = Tensor(np.random.default_rng(0).standard_normal((1, L, 2)))
            times = []
            for _ in range(reps):
                t0 = time.perf_counter()
                with engine.no_grad():
                    blk(X)
                times.append(time.perf_counter() - t0)
            return min(times)

        best_of(64, 1)  # warm-up
        assert best_of(4096) / best_of(512) < 10
