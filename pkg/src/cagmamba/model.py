"""End-to-end model: projections, sequence construction, fusion stack, heads."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from cagmamba import engine
from cagmamba.data import Batch, Sample, collate
from cagmamba.engine import Tensor
from cagmamba.gcmn import GATE_MODES, GcmnStack
from cagmamba.layers import MLP, Linear, Module

CONTEXT_MODES = ("sequence", "concat", "none")
CHECKPOINT_MAGIC = b"CAGMAMBA-CKPT"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    d_t: int = 8
    d_a: int = 8
    f: int = 16
    n_layers: int = 2
    state_dim: int = 16
    conv_kernel: int = 4
    expand: int = 2
    k_t: int = 2
    k_a: int = 1
    alpha: float = 0.5
    beta: float = 0.5
    gamma: float = 1.0
    dropout: float = 0.3
    gate_mode: str = "learnable"
    context_mode: str = "sequence"
    zoh_exact: bool = True
    bssm_hidden: int | None = None
    head_hidden: int | None = None  # None -> f
    reverse_pass: bool = True
    ssm_skip: bool = True

    def validate(self) -> ModelConfig:
        for name in ("d_t", "d_a", "f", "n_layers", "state_dim", "conv_kernel", "expand"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be >= 1")
        if self.k_t < 0 or self.k_a < 0:
            raise ConfigError("model.k_t and model.k_a must be >= 0")
        weights = (self.alpha, self.beta, self.gamma)
        if min(weights) < 0 or max(weights) == 0:
            raise ConfigError("loss weights must be >= 0 and not all zero")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("model.dropout must lie in [0, 1)")
        if self.gate_mode not in GATE_MODES:
            raise ConfigError(f"model.gate_mode must be one of {GATE_MODES}")
        if self.context_mode not in CONTEXT_MODES:
            raise ConfigError(f"model.context_mode must be one of {CONTEXT_MODES}")
        return self

    @property
    def eff_k_t(self) -> int:
        return 0 if self.context_mode == "none" else self.k_t

    @property
    def eff_k_a(self) -> int:
        return 0 if self.context_mode == "none" else self.k_a

    @property
    def seq_len(self) -> int:
        if self.context_mode != "sequence":
            return 1
        return max(self.k_t, self.k_a) + 1

    @property
    def hidden(self) -> int:
        return self.head_hidden or self.f

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d).validate()


@dataclass
class ModalSequence:
    values: Tensor  # batch x L x f, context oldest first, main last
    mask: np.ndarray  # batch x L, 0 marks padding


@dataclass
class Prediction:
    y_t: Tensor
    y_a: Tensor
    y_m: Tensor
    gates: list
    embedding: Tensor  # [F_t_final || F_a_final || F_t_ctx || F_a_ctx]


class CagMamba(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg.validate()
        rng = np.random.default_rng(seed)
        f = cfg.f
        if cfg.context_mode == "concat":
            self.proj_t = Linear(cfg.d_t * (cfg.k_t + 1), f, rng, bias=False)
            self.proj_a = Linear(cfg.d_a * (cfg.k_a + 1), f, rng, bias=False)
        else:
            self.proj_t = Linear(cfg.d_t, f, rng, bias=False)
            self.proj_a = Linear(cfg.d_a, f, rng, bias=False)
        self.gcmn = GcmnStack(
            f,
            cfg.n_layers,
            rng,
            gate_mode=cfg.gate_mode,
            reverse=cfg.reverse_pass,
            expand=cfg.expand,
            state_dim=cfg.state_dim,
            kernel=cfg.conv_kernel,
            dropout=cfg.dropout,
            exact=cfg.zoh_exact,
            mlp_hidden=cfg.bssm_hidden,
            skip=cfg.ssm_skip,
        )
        h = cfg.hidden
        self.head_t = MLP(cfg.d_t * (cfg.eff_k_t + 1), 1, rng, hidden=h, dropout=cfg.dropout)
        self.head_a = MLP(cfg.d_a * (cfg.eff_k_a + 1), 1, rng, hidden=h, dropout=cfg.dropout)
        self.head_m = MLP(4 * f, 1, rng, hidden=h, dropout=cfg.dropout)

    @property
    def params(self) -> dict[str, Tensor]:
        return self.named_parameters()

    # -- sequence construction ---------------------------------------------

    def build_sequences(self, batch: Batch) -> tuple[ModalSequence, ModalSequence]:
        cfg = self.cfg
        self._check_dims(batch)
        bsz = len(batch)
        if cfg.context_mode == "none":
            return (
                ModalSequence(engine.reshape(self.proj_t(batch.text), (bsz, 1, cfg.f)), np.ones((bsz, 1))),
                ModalSequence(engine.reshape(self.proj_a(batch.audio), (bsz, 1, cfg.f)), np.ones((bsz, 1))),
            )
        if cfg.context_mode == "concat":
            flat_t = np.concatenate([batch.text, batch.text_ctx.reshape(bsz, -1)], axis=1)
            flat_a = np.concatenate([batch.audio, batch.audio_ctx.reshape(bsz, -1)], axis=1)
            return (
                ModalSequence(engine.reshape(self.proj_t(flat_t), (bsz, 1, cfg.f)), np.ones((bsz, 1))),
                ModalSequence(engine.reshape(self.proj_a(flat_a), (bsz, 1, cfg.f)), np.ones((bsz, 1))),
            )
        L = cfg.seq_len

        def stack(main, ctx, ctx_mask, proj):
            k = ctx.shape[1]
            # shared projection for context and main; zero rows stay zero (no bias)
            steps = np.concatenate([np.zeros((bsz, L - 1 - k, main.shape[1])), ctx, main[:, None, :]], axis=1)
            mask = np.concatenate([np.zeros((bsz, L - 1 - k)), ctx_mask, np.ones((bsz, 1))], axis=1)
            return ModalSequence(proj(steps), mask)

        return (
            stack(batch.text, batch.text_ctx, batch.text_ctx_mask, self.proj_t),
            stack(batch.audio, batch.audio_ctx, batch.audio_ctx_mask, self.proj_a),
        )

    def _check_dims(self, batch: Batch) -> None:
        cfg = self.cfg
        if batch.text.shape[1] != cfg.d_t:
            raise engine.ShapeError(f"text features have {batch.text.shape[1]} dims, expected d_t={cfg.d_t}")
        if batch.audio.shape[1] != cfg.d_a:
            raise engine.ShapeError(f"audio features have {batch.audio.shape[1]} dims, expected d_a={cfg.d_a}")
        if batch.text_ctx.shape[1] != cfg.eff_k_t or batch.audio_ctx.shape[1] != cfg.eff_k_a:
            raise engine.ShapeError(
                f"context counts ({batch.text_ctx.shape[1]}, {batch.audio_ctx.shape[1]}) "
                f"do not match (k_t, k_a)=({cfg.eff_k_t}, {cfg.eff_k_a})"
            )

    def collate(self, samples: list[Sample]) -> Batch:
        return collate(samples, self.cfg.eff_k_t, self.cfg.eff_k_a)

    # -- forward -----------------------------------------------------------

    def forward(self, batch: Batch | list[Sample], train: bool = False, rng: np.random.Generator | None = None) -> Prediction:
        if not isinstance(batch, Batch):
            if not batch:
                raise ValueError("forward: empty batch")
            batch = self.collate(batch)
        if len(batch) == 0:
            raise ValueError("forward: empty batch")
        if train and self.cfg.dropout > 0 and rng is None:
            raise ValueError("forward: train mode with dropout needs a random generator")
        cfg = self.cfg
        bsz = len(batch)
        S_t, S_a = self.build_sequences(batch)
        masked = cfg.context_mode == "sequence" and not (S_t.mask.all() and S_a.mask.all())
        mt = S_t.mask if masked else None
        ma = S_a.mask if masked else None
        use_ctx = cfg.reverse_pass and S_t.values.shape[1] >= 2
        out = self.gcmn(S_t.values, S_a.values, mt, ma, rng=rng, train=train, context=use_ctx)
        if use_ctx:
            t_ctx, a_ctx = out.t_ctx, out.a_ctx
        else:
            t_ctx = a_ctx = Tensor(np.zeros((bsz, cfg.f)))
        embedding = engine.concat([out.t_final, out.a_final, t_ctx, a_ctx], axis=-1)

        head_in_t = np.concatenate([batch.text, batch.text_ctx.reshape(bsz, -1)], axis=1)
        head_in_a = np.concatenate([batch.audio, batch.audio_ctx.reshape(bsz, -1)], axis=1)
        y_t = self.head_t(head_in_t, rng, train)
        y_a = self.head_a(head_in_a, rng, train)
        y_m = self.head_m(embedding, rng, train)
        flat = lambda y: engine.reshape(y, (bsz,))  # noqa: E731
        gates = [tuple(None if g is None else g.data for g in pair) for pair in out.gates]
        return Prediction(flat(y_t), flat(y_a), flat(y_m), gates, embedding)

    __call__ = forward

    def predict(self, samples: list[Sample], batch_size: int = 256) -> np.ndarray:
        """Inference-mode fused predictions (the y_m branch)."""
        out = []
        with engine.no_grad():
            for lo in range(0, len(samples), batch_size):
                out.append(self.forward(samples[lo : lo + batch_size]).y_m.data)
        return np.concatenate(out) if out else np.zeros(0)

    def embed(self, samples: list[Sample], batch_size: int = 256) -> np.ndarray:
        out = []
        with engine.no_grad():
            for lo in range(0, len(samples), batch_size):
                out.append(self.forward(samples[lo : lo + batch_size]).embedding.data)
        return np.concatenate(out) if out else np.zeros((0, 4 * self.cfg.f))

    # -- state -------------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        if set(state) != set(params):
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            raise ValueError(f"state mismatch: missing {missing}, unexpected {extra}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"state mismatch for {k}: shape {arr.shape}, expected {p.shape}")
            p.data[...] = arr


def loss(pred: Prediction, y, cfg: ModelConfig) -> Tensor:
    """alpha * MSE(y_t) + beta * MSE(y_a) + gamma * MSE(y_m)."""
    y = engine.as_tensor(y)
    total = None
    for w, branch in ((cfg.alpha, pred.y_t), (cfg.beta, pred.y_a), (cfg.gamma, pred.y_m)):
        if w == 0:
            continue
        term = engine.mse(branch, y) * w
        total = term if total is None else total + term
    return total


# --- checkpoints ------------------------------------------------------------
#
# Layout: b"CAGMAMBA-CKPT <version>\n", one JSON header line
# {"config": {...}, "tensors": [{"name", "shape"}, ...]} then the tensors'
# raw little-endian float64 bytes, concatenated in header order.


def save_checkpoint(model: CagMamba, path: str | Path) -> None:
    state = model.state_dict()
    header = {
        "config": asdict(model.cfg),
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in state.items()],
    }
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + b" %d\n" % CHECKPOINT_VERSION)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for v in state.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def read_checkpoint(path: str | Path) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        magic = fh.readline().split()
        if len(magic) != 2 or magic[0] != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        if int(magic[1]) != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {int(magic[1])}")
        try:
            header = json.loads(fh.readline())
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
        state = {}
        for t in header["tensors"]:
            n = int(np.prod(t["shape"], dtype=np.int64))
            buf = fh.read(8 * n)
            if len(buf) != 8 * n:
                raise CheckpointError(f"{path}: truncated tensor {t['name']}")
            state[t["name"]] = np.frombuffer(buf, dtype="<f8").reshape(t["shape"]).astype(np.float64)
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after last tensor")
    return ModelConfig.from_dict(header["config"]), state


def load_checkpoint(path: str | Path) -> CagMamba:
    cfg, state = read_checkpoint(path)
    model = CagMamba(cfg)
    model.load_state_dict(state)
    return model
