"""Gated cross-modal fusion layers and their N-layer, two-direction stack.

One layer runs three BSSM streams over the text and audio sequences:

    H_cross = BSSM_cross([S_a || S_t])          concat on features, audio first
    F_cross^m = W_c2m H_cross[last]
    F_uni^m = BSSM_m(S_m)[last]
    G^m = sigmoid(W_g^m [F_cross^t || F_cross^a] + b_g^m)    logit clamped to +-30
    F_final^m = F_uni^m + G^m * F_cross^m

"last" is the last real (unmasked) step of each sample, which is the final
position whenever no padding is present.

Gate modes: ``learnable`` (above), ``fixed`` (G = 0.5), ``single`` (no
unimodal streams, F_final = F_cross).

Stacking: after each layer the readout slot of every modality's sequence is
replaced by F_final^m while the other slots take that layer's per-step stream
output, so sequence shapes never change.  The stack runs this chain once over
the sequence as given (context -> main, main-position finals) and, with the
same parameters, once over the time-reversed sequence (main -> context,
context-position finals).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from cagmamba import engine
from cagmamba.bssm import BssmBlock, bssm_macs, bssm_params
from cagmamba.engine import Tensor
from cagmamba.layers import Linear, Module

GATE_MODES = ("learnable", "fixed", "single")
# float64 sigmoid rounds to exactly 0 or 1 past about |x| = 37; clamping the
# pre-activation keeps every gate strictly inside (0, 1)
GATE_LOGIT_BOUND = 30.0


def last_valid_onehot(mask: np.ndarray | None, batch: int, L: int) -> np.ndarray:
    """batch x L one-hot of each row's last unmasked step."""
    onehot = np.zeros((batch, L))
    if mask is None:
        onehot[:, -1] = 1.0
        return onehot
    valid = np.asarray(mask) > 0
    if not valid.any(axis=1).all():
        raise ValueError("gcmn: every sample needs at least one unmasked step")
    idx = L - 1 - np.argmax(valid[:, ::-1], axis=1)
    onehot[np.arange(batch), idx] = 1.0
    return onehot


def readout(H: Tensor, onehot: np.ndarray) -> Tensor:
    """Select one step per sample: (batch, L, d) -> (batch, d)."""
    if np.all(onehot[:, -1] == 1.0):
        return H[:, -1, :]
    return engine.sum(H * onehot[:, :, None], axis=1)


@dataclass
class LayerOutput:
    t_final: Tensor
    a_final: Tensor
    gate_t: Tensor | None
    gate_a: Tensor | None
    t_seq: Tensor
    a_seq: Tensor
    parts: dict[str, Tensor] = field(default_factory=dict)

    @property
    def gates(self) -> tuple[Tensor | None, Tensor | None]:
        return self.gate_t, self.gate_a


class GcmnLayer(Module):
    def __init__(self, f: int, rng: np.random.Generator, gate_mode: str = "learnable", **bssm_kw):
        if gate_mode not in GATE_MODES:
            raise ValueError(f"gcmn: unknown gate mode {gate_mode!r}")
        self.f = f
        self.gate_mode = gate_mode
        self.bssm_cross = BssmBlock(2 * f, rng, **bssm_kw)
        if gate_mode != "single":
            self.bssm_text = BssmBlock(f, rng, **bssm_kw)
            self.bssm_audio = BssmBlock(f, rng, **bssm_kw)
        self.W_c2t = Linear(2 * f, f, rng, bias=False)
        self.W_c2a = Linear(2 * f, f, rng, bias=False)
        if gate_mode == "learnable":
            self.gate_t = Linear(2 * f, f, rng)
            self.gate_a = Linear(2 * f, f, rng)

    def __call__(
        self,
        S_t,
        S_a,
        mask_t: np.ndarray | None = None,
        mask_a: np.ndarray | None = None,
        rng: np.random.Generator | None = None,
        train: bool = False,
    ) -> LayerOutput:
        S_t, S_a = engine.as_tensor(S_t), engine.as_tensor(S_a)
        if S_t.ndim != 3 or S_a.ndim != 3 or S_t.shape[:2] != S_a.shape[:2]:
            raise engine.ShapeError(f"gcmn: incompatible shapes {S_t.shape} and {S_a.shape}")
        bsz, L, _ = S_t.shape
        mask_c = None
        if mask_t is not None or mask_a is not None:
            mt = np.ones((bsz, L)) if mask_t is None else np.asarray(mask_t, dtype=np.float64)
            ma = np.ones((bsz, L)) if mask_a is None else np.asarray(mask_a, dtype=np.float64)
            mask_c = np.maximum(mt, ma)
        sel_c = last_valid_onehot(mask_c, bsz, L)
        sel_t = last_valid_onehot(mask_t, bsz, L)
        sel_a = last_valid_onehot(mask_a, bsz, L)

        S_cross = engine.concat([S_a, S_t], axis=-1)
        H_cross = self.bssm_cross(S_cross, mask_c, rng, train)
        if self.gate_mode == "single":
            # per-step decoupling feeds re-injection; readout commutes with it
            t_seq = self.W_c2t(H_cross)
            a_seq = self.W_c2a(H_cross)
            F_t_cross = readout(t_seq, sel_c)
            F_a_cross = readout(a_seq, sel_c)
            parts = {"H_cross": H_cross, "F_t_cross": F_t_cross, "F_a_cross": F_a_cross}
            return LayerOutput(F_t_cross, F_a_cross, None, None, t_seq, a_seq, parts)
        h_last = readout(H_cross, sel_c)
        F_t_cross = self.W_c2t(h_last)
        F_a_cross = self.W_c2a(h_last)
        parts = {"H_cross": H_cross, "F_t_cross": F_t_cross, "F_a_cross": F_a_cross}

        H_t = self.bssm_text(S_t, mask_t, rng, train)
        H_a = self.bssm_audio(S_a, mask_a, rng, train)
        F_t_uni = readout(H_t, sel_t)
        F_a_uni = readout(H_a, sel_a)
        parts.update(F_t_uni=F_t_uni, F_a_uni=F_a_uni)
        if self.gate_mode == "learnable":
            both = engine.concat([F_t_cross, F_a_cross], axis=-1)
            G_t = engine.sigmoid(engine.clip(self.gate_t(both), -GATE_LOGIT_BOUND, GATE_LOGIT_BOUND))
            G_a = engine.sigmoid(engine.clip(self.gate_a(both), -GATE_LOGIT_BOUND, GATE_LOGIT_BOUND))
        else:
            G_t = engine.Tensor(np.full(F_t_cross.shape, 0.5))
            G_a = engine.Tensor(np.full(F_a_cross.shape, 0.5))
        t_final = F_t_uni + G_t * F_t_cross
        a_final = F_a_uni + G_a * F_a_cross
        return LayerOutput(t_final, a_final, G_t, G_a, H_t, H_a, parts)


def gcmn_layer_forward(layer: GcmnLayer, S_t, S_a, **kw) -> LayerOutput:
    return layer(S_t, S_a, **kw)


def reinject(seq: Tensor, final: Tensor, mask: np.ndarray | None) -> Tensor:
    """Write ``final`` into the readout slot of ``seq``; keep the other slots."""
    bsz, L, f = seq.shape
    sel = last_valid_onehot(mask, bsz, L)[:, :, None]
    return seq * (1.0 - sel) + engine.reshape(final, (bsz, 1, f)) * sel


@dataclass
class StackOutput:
    t_final: Tensor
    a_final: Tensor
    t_ctx: Tensor | None
    a_ctx: Tensor | None
    gates: list[tuple[Tensor | None, Tensor | None]]


class GcmnStack(Module):
    def __init__(self, f: int, n_layers: int, rng: np.random.Generator, gate_mode: str = "learnable", reverse: bool = True, **bssm_kw):
        if n_layers < 1:
            raise ValueError("gcmn: stack needs at least one layer")
        self.reverse = reverse
        self.layers = [GcmnLayer(f, rng, gate_mode, **bssm_kw) for _ in range(n_layers)]

    def run_chain(self, S_t, S_a, mask_t=None, mask_a=None, rng=None, train=False) -> tuple[LayerOutput, list]:
        gates = []
        out = None
        for i, layer in enumerate(self.layers):
            if i:
                S_t = reinject(out.t_seq, out.t_final, mask_t)
                S_a = reinject(out.a_seq, out.a_final, mask_a)
            out = layer(S_t, S_a, mask_t, mask_a, rng, train)
            gates.append(out.gates)
        return out, gates

    def __call__(
        self,
        S_t,
        S_a,
        mask_t: np.ndarray | None = None,
        mask_a: np.ndarray | None = None,
        rng: np.random.Generator | None = None,
        train: bool = False,
        context: bool | None = None,
    ) -> StackOutput:
        S_t, S_a = engine.as_tensor(S_t), engine.as_tensor(S_a)
        context = self.reverse if context is None else context
        if context and S_t.shape[1] < 2:
            raise ValueError(f"gcmn: context finals need at least 2 steps, got L={S_t.shape[1]}")
        main, gates = self.run_chain(S_t, S_a, mask_t, mask_a, rng, train)
        t_ctx = a_ctx = None
        if context:
            flip_m = lambda m: None if m is None else np.flip(np.asarray(m), 1)  # noqa: E731
            rev, rgates = self.run_chain(engine.flip(S_t, 1), engine.flip(S_a, 1), flip_m(mask_t), flip_m(mask_a), rng, train)
            t_ctx, a_ctx = rev.t_final, rev.a_final
            gates = gates + rgates
        return StackOutput(main.t_final, main.a_final, t_ctx, a_ctx, gates)


def gcmn_stack_forward(stack: GcmnStack, S_t, S_a, **kw) -> StackOutput:
    return stack(S_t, S_a, **kw)


def gcmn_layer_params(f: int, gate_mode: str = "learnable", **bssm_kw) -> int:
    n = bssm_params(2 * f, **bssm_kw) + 2 * (2 * f * f)
    if gate_mode != "single":
        n += 2 * bssm_params(f, **bssm_kw)
    if gate_mode == "learnable":
        n += 2 * (2 * f * f + f)
    return n


def gcmn_layer_macs(batch: int, L: int, f: int, gate_mode: str = "learnable", **bssm_kw) -> int:
    n = bssm_macs(batch, L, 2 * f, **bssm_kw)
    if gate_mode == "single":
        # decoupling applied to every step for re-injection
        return n + 2 * batch * L * 2 * f * f
    n += 2 * batch * 2 * f * f
    n += 2 * bssm_macs(batch, L, f, **bssm_kw)
    if gate_mode == "learnable":
        n += 2 * batch * 2 * f * f
    return n
