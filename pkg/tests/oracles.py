"""Plain-numpy reference implementations used as test oracles.

These are written loop-first from the defining equations and share no code
with the package beyond reading parameter arrays.
"""

import numpy as np


def silu(x):
    return x / (1.0 + np.exp(-x))


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def affine(mlp, x):
    """Evaluate an MLP's affine layers (SiLU between them, no dropout)."""
    for i, lin in enumerate(mlp.layers):
        if i:
            x = silu(x)
        x = x @ lin.W.data + (0.0 if lin.b is None else lin.b.data)
    return x


def conv(convmod, x):
    W, b = convmod.W.data, convmod.b.data
    bsz, L, D = x.shape
    out = np.tile(b, (bsz, L, 1)).astype(float)
    for t in range(L):
        for j in range(W.shape[1]):
            if t - j >= 0:
                out[:, t] += W[:, j] * x[:, t - j]
    return out


def ssm(params, x):
    """Per-step loop: discretize with expm1, update the state, read out."""
    A = -np.exp(params.A_log.data)
    bsz, L, D = x.shape
    y = np.zeros_like(x)
    for b in range(bsz):
        h = np.zeros_like(A)
        for t in range(L):
            xt = x[b, t]
            dt = np.logaddexp(0.0, xt @ params.W_delta.data + params.b_delta.data)
            Bt = xt @ params.W_B.data
            Ct = xt @ params.W_C.data
            z = dt[:, None] * A
            a_bar = np.exp(z)
            b_bar = np.expm1(z) / A * Bt[None, :]  # (1/A)(e^{dA} - 1) B
            h = a_bar * h + b_bar * xt[:, None]
            y[b, t] = h @ Ct
            if params.D_skip is not None:
                y[b, t] += params.D_skip.data * xt
    return y


def bssm(block, X):
    Z = affine(block.mlp_in, X)
    Z_fwd = silu(conv(block.conv_fwd, Z))
    Z_bwd = silu(conv(block.conv_bwd, Z[:, ::-1]))
    O_bi = ssm(block.ssm_fwd, Z_fwd) * ssm(block.ssm_bwd, Z_bwd)[:, ::-1]
    G = silu(affine(block.mlp_gate, Z))
    return affine(block.mlp_out, G * O_bi)


def gcmn_layer(layer, S_t, S_a):
    """Learnable-gate fusion read out at the last step; returns (t_final, a_final, G_t, G_a)."""
    H = bssm(layer.bssm_cross, np.concatenate([S_a, S_t], axis=-1))[:, -1]
    F_t_cross = H @ layer.W_c2t.W.data
    F_a_cross = H @ layer.W_c2a.W.data
    F_t_uni = bssm(layer.bssm_text, S_t)[:, -1]
    F_a_uni = bssm(layer.bssm_audio, S_a)[:, -1]
    joint = np.concatenate([F_t_cross, F_a_cross], axis=-1)
    G_t = sigmoid(np.clip(affine_lin(layer.gate_t, joint), -30, 30))
    G_a = sigmoid(np.clip(affine_lin(layer.gate_a, joint), -30, 30))
    return F_t_uni + G_t * F_t_cross, F_a_uni + G_a * F_a_cross, G_t, G_a


def affine_lin(lin, x):
    return x @ lin.W.data + lin.b.data


def condition_for_gradcheck(module, ssm_scale=2.0):
    """Move a module to a point where finite differences resolve every gradient.

    Each block's output is cubic in its expanded input, so at initialization
    deep parameters can have gradients near 1e-10 on top of O(1) outputs,
    below float64 difference resolution.  Zeroing the constant output offsets
    and enlarging the scan projections fixes that without touching any
    gradient formula.
    """
    from cagmamba.bssm import BssmBlock

    stack = [module]
    seen = set()
    while stack:
        m = stack.pop()
        if id(m) in seen:
            continue
        seen.add(id(m))
        if isinstance(m, BssmBlock):
            m.mlp_out.layers[-1].b.data[:] = 0.0
            for s in {id(m.ssm_fwd): m.ssm_fwd, id(m.ssm_bwd): m.ssm_bwd}.values():
                s.W_B.data *= ssm_scale
                s.W_C.data *= ssm_scale
        for v in vars(m).values():
            if isinstance(v, (list, tuple)):
                stack.extend(x for x in v if hasattr(x, "named_parameters"))
            elif hasattr(v, "named_parameters"):
                stack.append(v)
    return module


def condition_model(model, weight_scale=1.6):
    """Whole-model version: block conditioning plus every weight matrix
    (state matrices excluded) scaled up so the fused path carries O(1)
    signal into the loss."""
    condition_for_gradcheck(model)
    for name, p in model.params.items():
        if p.data.ndim == 2 and not name.endswith("A_log"):
            p.data *= weight_scale
        elif name.endswith("b_delta"):
            p.data[:] = 0.5  # step size near 1, where the state matrix matters
    return model
