"""Bi-directional selective scanning block.

    Z     = MLP_in(X)
    Z_fwd = SiLU(conv_fwd(Z))           O_fwd = SSM_fwd(Z_fwd)
    Z_bwd = SiLU(conv_bwd(flip(Z)))     O_bwd = SSM_bwd(Z_bwd)
    O_bi  = O_fwd * flip(O_bwd)
    G     = SiLU(MLP_gate(Z))
    out   = MLP_out(G * O_bi)

An optional ``mask`` (batch x L, 1 = real step, 0 = padding) zeroes ``Z``
before the convolutions and zeroes both scan inputs at padded steps, so a
padded step never writes into the SSM state.
"""

from __future__ import annotations

import numpy as np

from cagmamba import engine
from cagmamba.engine import Tensor
from cagmamba.layers import MLP, Module, mlp_macs, mlp_params, uniform
from cagmamba.ssm import SsmParams, scan_macs, ssm_params


class CausalConv(Module):
    def __init__(self, D: int, kernel: int, rng: np.random.Generator):
        self.W = engine.parameter(uniform(rng, kernel, (D, kernel)))
        self.b = engine.parameter(uniform(rng, kernel, (D,)))

    def __call__(self, x) -> Tensor:
        return engine.causal_conv1d(x, self.W, self.b)


class BssmBlock(Module):
    def __init__(
        self,
        d: int,
        rng: np.random.Generator,
        expand: int = 2,
        state_dim: int = 16,
        kernel: int = 4,
        dropout: float = 0.0,
        exact: bool = True,
        mlp_hidden: int | None = None,
        tied: bool = False,
        skip: bool = False,
    ):
        self.d = d
        self.d_inner = expand * d
        self.dropout = dropout
        self.mlp_in = MLP(d, self.d_inner, rng, hidden=mlp_hidden)
        self.conv_fwd = CausalConv(self.d_inner, kernel, rng)
        self.conv_bwd = self.conv_fwd if tied else CausalConv(self.d_inner, kernel, rng)
        self.ssm_fwd = SsmParams(self.d_inner, state_dim, rng, exact=exact, skip=skip)
        self.ssm_bwd = self.ssm_fwd if tied else SsmParams(self.d_inner, state_dim, rng, exact=exact, skip=skip)
        self.mlp_gate = MLP(self.d_inner, self.d_inner, rng, hidden=mlp_hidden)
        self.mlp_out = MLP(self.d_inner, d, rng, hidden=mlp_hidden)

    def forward_parts(
        self,
        X,
        mask: np.ndarray | None = None,
        rng: np.random.Generator | None = None,
        train: bool = False,
        method: str = "sequential",
    ) -> dict[str, Tensor]:
        X = engine.as_tensor(X)
        if X.ndim != 3 or X.shape[2] != self.d:
            raise engine.ShapeError(f"bssm: incompatible shapes {X.shape} and (*, *, {self.d})")
        m = None if mask is None else np.asarray(mask, dtype=np.float64)[:, :, None]
        Z = self.mlp_in(X)
        if m is not None:
            Z = Z * m
        Z_fwd = engine.silu(self.conv_fwd(Z))
        Z_bwd = engine.silu(self.conv_bwd(engine.flip(Z, 1)))
        if m is not None:
            Z_fwd = Z_fwd * m
            Z_bwd = Z_bwd * np.flip(m, 1)
        O_fwd = self.ssm_fwd(Z_fwd, method=method)
        O_bwd = self.ssm_bwd(Z_bwd, method=method)
        O_bi = O_fwd * engine.flip(O_bwd, 1)
        G = engine.silu(self.mlp_gate(Z))
        out = self.mlp_out(G * O_bi)
        out = engine.dropout(out, self.dropout, rng, train)
        return {"Z": Z, "Z_fwd": Z_fwd, "Z_bwd": Z_bwd, "O_fwd": O_fwd, "O_bwd": O_bwd, "O_bi": O_bi, "G": G, "out": out}

    def __call__(self, X, mask=None, rng=None, train: bool = False, method: str = "sequential") -> Tensor:
        return self.forward_parts(X, mask, rng, train, method)["out"]


def bssm_forward(block: BssmBlock, X, mask=None, rng=None, train: bool = False) -> Tensor:
    return block(X, mask=mask, rng=rng, train=train)


def bssm_params(
    d: int, expand: int = 2, state_dim: int = 16, kernel: int = 4, mlp_hidden: int | None = None, skip: bool = False
) -> int:
    """Closed-form parameter count of an untied :class:`BssmBlock`."""
    di = expand * d
    conv = di * kernel + di
    return (
        mlp_params(d, di, mlp_hidden)
        + mlp_params(di, di, mlp_hidden)
        + mlp_params(di, d, mlp_hidden)
        + 2 * conv
        + 2 * ssm_params(di, state_dim, skip)
    )


def bssm_macs(
    batch: int,
    L: int,
    d: int,
    expand: int = 2,
    state_dim: int = 16,
    kernel: int = 4,
    mlp_hidden: int | None = None,
    skip: bool = False,
) -> int:
    """Closed-form MAC count of one :class:`BssmBlock` forward.

    The skip term is elementwise and so adds no MACs.
    """
    di = expand * d
    rows = batch * L
    return (
        mlp_macs(rows, d, di, mlp_hidden)
        + mlp_macs(rows, di, di, mlp_hidden)
        + mlp_macs(rows, di, d, mlp_hidden)
        + 2 * rows * di * kernel
        + 2 * scan_macs(batch, L, di, state_dim)
    )
