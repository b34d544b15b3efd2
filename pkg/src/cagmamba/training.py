"""AdamW training with early stopping on validation loss, plus embedding export."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from cagmamba import engine
from cagmamba.data import Sample, batch_iter, split_samples
from cagmamba.metrics import MetricReport, evaluate
from cagmamba.model import CagMamba, loss

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    def __init__(self, epoch: int, step: int, detail: str = ""):
        super().__init__(f"training diverged at epoch {epoch}, step {step}{': ' + detail if detail else ''}")
        self.epoch = epoch
        self.step = step


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 16
    patience: int = 8
    lr: float = 1e-3
    weight_decay: float = 0.01
    seed: int = 0

    def validate(self) -> TrainConfig:
        if self.epochs < 1:
            raise ValueError("train.epochs must be >= 1")
        if self.patience < 1:
            raise ValueError("train.patience must be >= 1")
        if self.batch_size < 1:
            raise ValueError("train.batch_size must be >= 1")
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError("train.lr and train.weight_decay must be >= 0")
        return self


class EarlyStopper:
    """Tracks the best validation loss; ``update`` returns True once
    ``patience`` consecutive epochs fail to improve on it."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = np.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, value: float) -> bool:
        if value < self.best:
            self.best = value
            self.best_epoch = epoch
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience


@dataclass
class TrainResult:
    model: CagMamba
    history: list[dict]
    best_epoch: int
    best_valid_loss: float
    stopped_epoch: int
    valid_report: MetricReport | None = field(default=None)


def validation_loss(model: CagMamba, samples: list[Sample], batch_size: int = 256) -> float:
    """Sample-weighted multi-task loss in inference mode."""
    total = 0.0
    with engine.no_grad():
        for batch in batch_iter(samples, batch_size):
            b = model.collate(batch)
            pred = model.forward(b)
            total += float(loss(pred, b.labels, model.cfg).data) * len(b)
    return total / len(samples)


def train(model: CagMamba, samples: list[Sample], tcfg: TrainConfig) -> TrainResult:
    """Train on the ``train`` split, select on the ``valid`` split.

    The returned model holds the parameters of the epoch with the lowest
    validation loss.
    """
    tcfg.validate()
    train_set = split_samples(samples, "train")
    valid_set = split_samples(samples, "valid")
    if not train_set or not valid_set:
        raise ValueError("train: dataset needs non-empty train and valid splits")

    seeds = np.random.SeedSequence(tcfg.seed)
    shuffle_root, dropout_seed = seeds.spawn(2)
    drop_rng = np.random.default_rng(dropout_seed)
    opt = engine.AdamW(model.params, lr=tcfg.lr, weight_decay=tcfg.weight_decay)
    stopper = EarlyStopper(tcfg.patience)
    best_state = model.state_dict()
    history = []
    epoch = 0
    for epoch in range(1, tcfg.epochs + 1):
        shuffle_seed = int(shuffle_root.spawn(1)[0].generate_state(1)[0])
        running = 0.0
        for step, batch in enumerate(batch_iter(train_set, tcfg.batch_size, shuffle_seed), start=1):
            b = model.collate(batch)
            try:
                pred = model.forward(b, train=True, rng=drop_rng)
                value = loss(pred, b.labels, model.cfg)
            except engine.NonFiniteError as exc:
                raise DivergenceError(epoch, step, str(exc)) from exc
            if not np.isfinite(value.data):
                raise DivergenceError(epoch, step, "loss is not finite")
            opt.zero_grad()
            value.backward()
            opt.step()
            running += float(value.data) * len(b)
        train_loss = running / len(train_set)
        try:
            valid_loss = validation_loss(model, valid_set)
        except engine.NonFiniteError as exc:
            raise DivergenceError(epoch, 0, str(exc)) from exc
        if not np.isfinite(valid_loss):
            raise DivergenceError(epoch, 0, "validation loss is not finite")
        history.append({"epoch": epoch, "train_loss": train_loss, "valid_loss": valid_loss})
        log.info("epoch %d train %.5f valid %.5f", epoch, train_loss, valid_loss)
        improved = valid_loss < stopper.best
        stop = stopper.update(epoch, valid_loss)
        if improved:
            best_state = model.state_dict()
        if stop:
            break

    model.load_state_dict(best_state)
    report = evaluate(model.predict(valid_set), [s.label for s in valid_set]) if len(valid_set) >= 2 else None
    return TrainResult(model, history, stopper.best_epoch, float(stopper.best), epoch, report)


def evaluate_split(model: CagMamba, samples: list[Sample], split: str) -> MetricReport:
    subset = split_samples(samples, split)
    return evaluate(model.predict(subset), [s.label for s in subset])


def write_history(path: str | Path, history: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in history:
            fh.write(json.dumps(row) + "\n")


def export_embeddings(model: CagMamba, samples: list[Sample], path: str | Path) -> int:
    """Write one ``{"id", "label", "embedding"}`` line per sample; returns the count."""
    emb = model.embed(samples)
    with open(path, "w", encoding="utf-8") as fh:
        for s, vec in zip(samples, emb):
            fh.write(json.dumps({"id": s.id, "label": s.label, "embedding": vec.tolist()}) + "\n")
    return len(samples)


def train_config_dict(tcfg: TrainConfig) -> dict:
    return asdict(tcfg)
