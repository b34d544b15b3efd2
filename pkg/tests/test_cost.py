import numpy as np
import pytest

from cagmamba import engine
from cagmamba.bssm import bssm_params
from cagmamba.cost import checkpoint_param_count, count_cost, instrumented_cost
from cagmamba.engine import Tensor
from cagmamba.layers import Linear, MLP, mlp_macs, mlp_params
from cagmamba.model import CagMamba, ModelConfig


def random_config(rng) -> ModelConfig:
    return ModelConfig(
        d_t=int(rng.integers(1, 7)),
        d_a=int(rng.integers(1, 7)),
        f=int(rng.integers(1, 6)),
        n_layers=int(rng.integers(1, 3)),
        state_dim=int(rng.integers(1, 5)),
        conv_kernel=int(rng.integers(1, 5)),
        expand=int(rng.integers(1, 3)),
        k_t=int(rng.integers(0, 4)),
        k_a=int(rng.integers(0, 3)),
        gate_mode=str(rng.choice(["learnable", "fixed", "single"])),
        context_mode=str(rng.choice(["sequence", "concat", "none"])),
        bssm_hidden=None if rng.random() < 0.5 else int(rng.integers(1, 5)),
        head_hidden=None if rng.random() < 0.5 else int(rng.integers(1, 5)),
        reverse_pass=bool(rng.random() < 0.7),
        ssm_skip=bool(rng.random() < 0.5),
    )


class TestAnalyticMatchesInstrumented:
    @pytest.mark.parametrize("seed", range(10))
    def test_random_config(self, seed):
        cfg = random_config(np.random.default_rng(seed))
        assert count_cost(cfg) == instrumented_cost(cfg, seed)

    def test_default_config(self):
        cfg = ModelConfig()
        assert count_cost(cfg) == instrumented_cost(cfg)

    def test_flops_are_twice_macs(self):
        r = count_cost(ModelConfig(f=4))
        assert r.flops_forward == 2 * r.macs_forward


class TestHandCounts:
    def test_affine_four_to_three(self):
        lin = Linear(4, 3, np.random.default_rng(0))
        assert lin.num_params() == 15
        assert mlp_params(4, 3) == 15

    def test_affine_macs(self):
        lin = Linear(4, 3, np.random.default_rng(0))
        with engine.count_macs() as box:
            lin(Tensor(np.ones((5, 4))))
        assert box[0] == 60 == mlp_macs(5, 4, 3)

    def test_matmul_flops(self):
        with engine.count_macs() as box:
            engine.matmul(Tensor(np.ones((1, 4))), Tensor(np.ones((4, 3))))
        assert box[0] == 12 and 2 * box[0] == 24

    def test_two_layer_mlp(self):
        # 4*2 + 2 + 2*3 + 3
        assert MLP(4, 3, np.random.default_rng(0), hidden=2).num_params() == 19 == mlp_params(4, 3, 2)

    def test_smallest_bssm(self):
        # three 1->1 affines (6), two convs of width 1 (4), two scans with A, B, C, delta W and b (10)
        assert bssm_params(1, 1, 1, 1, None, False) == 20

    def test_checkpoint_count(self):
        model = CagMamba(ModelConfig(f=4))
        assert checkpoint_param_count(model.state_dict()) == count_cost(model.cfg).param_count


class TestScaling:
    def test_macs_linear_in_sequence_length(self):
        # projection, scans and the text head all grow linearly with the text window
        base = dict(f=4, k_a=0, reverse_pass=False)
        macs = [count_cost(ModelConfig(k_t=k, **base)).macs_forward for k in range(1, 7)]
        diffs = np.diff(macs)
        assert diffs[0] > 0 and len(set(diffs.tolist())) == 1
