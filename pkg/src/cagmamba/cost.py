"""Parameter and FLOP accounting.

Conventions: one multiply-accumulate (MAC) is 2 FLOPs; counts are for a single
inference-mode forward pass at batch size 1 with sequence length
``max(k_t, k_a) + 1`` (1 for the concat / no-context variants).  Only
contraction ops are counted: affine maps, depthwise convolutions, and the
scan (one MAC per state element for the update, one for the readout).
Elementwise activations, gating products, masking and ZOH discretization
are not counted.

Closed forms, with d' = expand * d and state size N:

    affine a -> b (bias)          a*b + b params        a*b MACs per row
    SSM over D channels           3*D*N + D*D + D       L*(D*D + 2*D*N) + 2*L*D*N
    (skip vector D_skip)          + D                   elementwise, uncounted
    depthwise conv, kernel K      D*K + D               L*D*K
    BSSM(d)                       in d->d', gate d'->d', out d'->d,
                                  2 convs, 2 SSMs over d'
    fusion layer (learnable)      BSSM(2f) + 2*BSSM(f) + 2*(2f*f) + 2*(2f*f + f)
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from cagmamba import engine
from cagmamba.data import Sample
from cagmamba.gcmn import gcmn_layer_macs, gcmn_layer_params
from cagmamba.layers import mlp_macs, mlp_params
from cagmamba.model import CagMamba, ModelConfig

CONVENTIONS = "1 MAC = 2 FLOPs; batch 1; L = max(k_t, k_a) + 1; contraction ops only"


@dataclass
class CostReport:
    param_count: int
    macs_forward: int
    flops_forward: int
    conventions: str = CONVENTIONS

    def to_dict(self) -> dict:
        return asdict(self)


def _bssm_kw(cfg: ModelConfig) -> dict:
    return {"expand": cfg.expand, "state_dim": cfg.state_dim, "kernel": cfg.conv_kernel, "mlp_hidden": cfg.bssm_hidden, "skip": cfg.ssm_skip}


def _proj_in(cfg: ModelConfig) -> tuple[int, int]:
    if cfg.context_mode == "concat":
        return cfg.d_t * (cfg.k_t + 1), cfg.d_a * (cfg.k_a + 1)
    return cfg.d_t, cfg.d_a


def count_params(cfg: ModelConfig) -> int:
    cfg.validate()
    f, h = cfg.f, cfg.hidden
    in_t, in_a = _proj_in(cfg)
    n = (in_t + in_a) * f
    n += cfg.n_layers * gcmn_layer_params(f, cfg.gate_mode, **_bssm_kw(cfg))
    n += mlp_params(cfg.d_t * (cfg.eff_k_t + 1), 1, h)
    n += mlp_params(cfg.d_a * (cfg.eff_k_a + 1), 1, h)
    n += mlp_params(4 * f, 1, h)
    return n


def count_macs(cfg: ModelConfig) -> int:
    cfg.validate()
    f, h, L = cfg.f, cfg.hidden, cfg.seq_len
    in_t, in_a = _proj_in(cfg)
    n = L * (in_t + in_a) * f
    chains = 2 if cfg.reverse_pass and L >= 2 else 1
    n += chains * cfg.n_layers * gcmn_layer_macs(1, L, f, cfg.gate_mode, **_bssm_kw(cfg))
    n += mlp_macs(1, cfg.d_t * (cfg.eff_k_t + 1), 1, h)
    n += mlp_macs(1, cfg.d_a * (cfg.eff_k_a + 1), 1, h)
    n += mlp_macs(1, 4 * f, 1, h)
    return n


def count_cost(cfg: ModelConfig) -> CostReport:
    macs = count_macs(cfg)
    return CostReport(count_params(cfg), macs, 2 * macs)


def probe_sample(cfg: ModelConfig) -> Sample:
    """A batch-1 input with full context, used by the instrumented counter."""
    return Sample(
        id="probe",
        label=0.0,
        text=[0.1] * cfg.d_t,
        audio=[0.1] * cfg.d_a,
        text_ctx=[[0.1] * cfg.d_t for _ in range(cfg.k_t)],
        audio_ctx=[[0.1] * cfg.d_a for _ in range(cfg.k_a)],
    )


def instrumented_cost(cfg: ModelConfig, seed: int = 0) -> CostReport:
    """Count parameters from a built model and MACs from a real forward pass."""
    model = CagMamba(cfg, seed=seed)
    params = sum(p.size for p in model.named_parameters().values())
    with engine.no_grad(), engine.count_macs() as box:
        model.forward([probe_sample(cfg)])
    return CostReport(int(params), box[0], 2 * box[0])


def checkpoint_param_count(state: dict[str, np.ndarray]) -> int:
    return int(sum(v.size for v in state.values()))
