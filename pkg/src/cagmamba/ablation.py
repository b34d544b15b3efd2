"""Context-strategy, gate-strategy and context-window ablations on synthetic data."""

from __future__ import annotations

import logging
from collections.abc import Iterable, Sequence
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from cagmamba.data import generate_synthetic
from cagmamba.model import CagMamba, ModelConfig
from cagmamba.training import TrainConfig, evaluate_split, train

log = logging.getLogger(__name__)

# name -> (context_mode, gate_mode)
VARIANTS: dict[str, tuple[str, str]] = {
    "ordered_learnable": ("sequence", "learnable"),
    "ordered_fixed": ("sequence", "fixed"),
    "ordered_single": ("sequence", "single"),
    "concat_learnable": ("concat", "learnable"),
    "none_learnable": ("none", "learnable"),
}

CONTEXT_WINDOWS: tuple[tuple[int, int], ...] = ((0, 0), (1, 0), (0, 1), (1, 1), (1, 2), (2, 2), (3, 1), (2, 1))


@dataclass
class AblationSettings:
    n: int = 2000
    context_strength: float = 0.5
    context_weights: tuple[float, ...] = (1.0,)
    d_t: int = 8
    d_a: int = 8
    f: int = 8
    state_dim: int = 4
    n_layers: int = 2
    k_t: int = 2
    k_a: int = 1
    dropout: float = 0.0
    epochs: int = 30
    patience: int = 5
    batch_size: int = 64
    lr: float = 5e-3
    weight_decay: float = 0.01
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    # data is generated with this much context so every window can be served
    data_k: int = 3

    def model_config(self, **overrides) -> ModelConfig:
        base = ModelConfig(
            d_t=self.d_t,
            d_a=self.d_a,
            f=self.f,
            n_layers=self.n_layers,
            state_dim=self.state_dim,
            k_t=self.k_t,
            k_a=self.k_a,
            dropout=self.dropout,
        )
        return replace(base, **overrides).validate()

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            patience=self.patience,
            lr=self.lr,
            weight_decay=self.weight_decay,
            seed=seed,
        )


@dataclass
class CellResult:
    name: str
    overrides: dict
    acc2: list[float] = field(default_factory=list)
    mae: list[float] = field(default_factory=list)

    @property
    def median_acc2(self) -> float:
        return float(np.median(self.acc2))

    @property
    def median_mae(self) -> float:
        return float(np.median(self.mae))

    def row(self) -> dict:
        return {
            "name": self.name,
            **self.overrides,
            "median_acc2": self.median_acc2,
            "median_mae": self.median_mae,
            "acc2": self.acc2,
        }


def run_cell(settings: AblationSettings, name: str, overrides: dict, seeds: Iterable[int] | None = None) -> CellResult:
    """Train one configuration on every seed and collect test metrics."""
    result = CellResult(name, dict(overrides))
    for seed in settings.seeds if seeds is None else seeds:
        samples = generate_synthetic(
            seed,
            settings.n,
            settings.d_t,
            settings.d_a,
            settings.data_k,
            settings.data_k,
            settings.context_strength,
            settings.context_weights,
        )
        cfg = settings.model_config(**overrides)
        trained = train(CagMamba(cfg, seed=seed), samples, settings.train_config(seed))
        report = evaluate_split(trained.model, samples, "test")
        result.acc2.append(100.0 * report.acc2_nn)
        result.mae.append(report.mae)
        log.info("%s seed %d: acc2 %.2f mae %.4f", name, seed, 100 * report.acc2_nn, report.mae)
    return result


def variant_grid(names: Sequence[str] = tuple(VARIANTS)) -> list[tuple[str, dict]]:
    return [(n, {"context_mode": VARIANTS[n][0], "gate_mode": VARIANTS[n][1]}) for n in names]


def window_grid(windows: Sequence[tuple[int, int]] = CONTEXT_WINDOWS) -> list[tuple[str, dict]]:
    return [(f"window_{kt}_{ka}", {"k_t": kt, "k_a": ka}) for kt, ka in windows]


def default_grid(settings: AblationSettings) -> list[tuple[str, dict]]:
    """Strategy variants at the settings' window, then every window with the
    learnable ordered model; cells that coincide are run once."""
    cells: list[tuple[str, dict]] = []
    seen: set[tuple] = set()
    for name, ov in variant_grid():
        full = {"context_mode": ov["context_mode"], "gate_mode": ov["gate_mode"], "k_t": settings.k_t, "k_a": settings.k_a}
        cells.append((name, full))
        seen.add(tuple(full.values()))
    for name, ov in window_grid():
        full = {"context_mode": "sequence", "gate_mode": "learnable", **ov}
        if tuple(full.values()) not in seen:
            seen.add(tuple(full.values()))
            cells.append((name, full))
    return cells


def run_grid(settings: AblationSettings, cells: Sequence[tuple[str, dict]]) -> list[CellResult]:
    return [run_cell(settings, name, ov) for name, ov in cells]


def results_table(results: Sequence[CellResult]) -> list[dict]:
    """Rows ordered best-first by median test Acc-2."""
    return sorted((r.row() for r in results), key=lambda row: -row["median_acc2"])


def settings_dict(settings: AblationSettings) -> dict:
    return asdict(settings)
