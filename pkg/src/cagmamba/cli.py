"""Command-line entry point.

Every command writes its outputs and a ``manifest.json`` under ``--out``.
On failure a single JSON object ``{"error": {...}}`` is printed to stderr and
the process exits with a code from :data:`EXIT_CODES`.

Log verbosity comes from the ``CAGMAMBA_LOG_LEVEL`` environment variable
(default ``WARNING``).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from cagmamba import __version__, ablation
from cagmamba.config import RunConfig, load_config
from cagmamba.cost import count_cost, instrumented_cost
from cagmamba.data import DataError, generate_synthetic, header_for, load_dataset, save_dataset, split_samples, SPLITS
from cagmamba.model import CagMamba, CheckpointError, ConfigError, load_checkpoint, save_checkpoint
from cagmamba.training import DivergenceError, evaluate_split, export_embeddings, train, write_history

EXIT_CODES = {"ok": 0, "internal": 1, "usage": 2, "config": 3, "data": 4, "divergence": 5}
LOG_ENV = "CAGMAMBA_LOG_LEVEL"

log = logging.getLogger("cagmamba")


class CliError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _write_json(path: Path, obj) -> None:
    path.write_text(_dump(obj), encoding="utf-8")


def _samples(cfg: RunConfig, data_path: str | None):
    path = data_path or cfg.data.path
    if path is None:
        d = cfg.data
        return generate_synthetic(
            cfg.seed, d.n, d.d_t, d.d_a, d.k_t, d.k_a, d.context_strength, d.context_weights, d.text_noise, d.audio_noise
        )
    if not Path(path).is_file():
        raise CliError("data", f"dataset file not found: {path}")
    header, samples = load_dataset(path)
    if (header.d_t, header.d_a) != (cfg.model.d_t, cfg.model.d_a):
        raise DataError(
            f"{path}: feature sizes d_t={header.d_t}, d_a={header.d_a} do not match "
            f"model.d_t={cfg.model.d_t}, model.d_a={cfg.model.d_a}"
        )
    return samples


def _checkpoint(path: str | None) -> CagMamba:
    if path is None:
        raise CliError("usage", "--checkpoint is required for this command")
    if not Path(path).is_file():
        raise CliError("data", f"checkpoint not found: {path}")
    return load_checkpoint(path)


def cmd_generate(cfg: RunConfig, args, out: Path) -> dict:
    d = cfg.data
    samples = generate_synthetic(
        cfg.seed, d.n, d.d_t, d.d_a, d.k_t, d.k_a, d.context_strength, d.context_weights, d.text_noise, d.audio_noise
    )
    save_dataset(out / "dataset.jsonl", header_for(samples, d.d_t, d.d_a, d.k_t, d.k_a), samples)
    return {"dataset": "dataset.jsonl", "samples": len(samples)}


def cmd_train(cfg: RunConfig, args, out: Path) -> dict:
    samples = _samples(cfg, args.data)
    result = train(CagMamba(cfg.model, seed=cfg.seed), samples, cfg.train_config())
    save_checkpoint(result.model, out / "model.ckpt")
    write_history(out / "history.jsonl", result.history)
    report = result.valid_report.to_dict() if result.valid_report else None
    _write_json(out / "metrics_valid.json", report)
    return {
        "checkpoint": "model.ckpt",
        "best_epoch": result.best_epoch,
        "best_valid_loss": result.best_valid_loss,
        "stopped_epoch": result.stopped_epoch,
        "valid": report,
    }


def cmd_eval(cfg: RunConfig, args, out: Path) -> dict:
    model = _checkpoint(args.checkpoint)
    cfg.model = model.cfg
    samples = _samples(cfg, args.data)
    split = args.split or "test"
    if len(split_samples(samples, split)) < 2:
        raise DataError(f"split {split!r} has fewer than 2 samples")
    report = evaluate_split(model, samples, split).to_dict()
    _write_json(out / f"metrics_{split}.json", report)
    return {"split": split, split: report}


def cmd_cost(cfg: RunConfig, args, out: Path) -> dict:
    analytic = count_cost(cfg.model).to_dict()
    measured = instrumented_cost(cfg.model, seed=cfg.seed).to_dict()
    report = {"analytic": analytic, "instrumented": measured, "match": analytic == measured}
    _write_json(out / "cost.json", report)
    return report


def cmd_export(cfg: RunConfig, args, out: Path) -> dict:
    model = _checkpoint(args.checkpoint)
    cfg.model = model.cfg
    samples = _samples(cfg, args.data)
    if args.split:
        samples = split_samples(samples, args.split)
    name = f"embeddings_{args.split or 'all'}.jsonl"
    count = export_embeddings(model, samples, out / name)
    return {"embeddings": name, "count": count, "dim": 4 * model.cfg.f}


def cmd_ablate(cfg: RunConfig, args, out: Path) -> dict:
    settings = cfg.ablate
    cells = {
        "all": ablation.default_grid(settings),
        "variants": ablation.variant_grid(),
        "windows": ablation.window_grid(),
    }[args.grid]
    rows = ablation.results_table(ablation.run_grid(settings, cells))
    _write_json(out / "ablation.json", rows)
    return {"table": "ablation.json", "best": rows[0]["name"], "rows": [(r["name"], r["median_acc2"]) for r in rows]}


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "cost": cmd_cost,
    "export": cmd_export,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML file of dotted keys")
    common.add_argument("--out", default="runs", help="output directory (created if missing)")
    common.add_argument("--seed", type=int, help="global seed, overrides the config value")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    common.add_argument("--split", choices=SPLITS)
    common.add_argument("--data", help="dataset file, overrides data.path")
    common.add_argument("--checkpoint", help="model checkpoint (eval, export)")

    parser = _Parser(prog="cagmamba", description="Context-aware gated cross-modal Mamba sentiment regression.")
    parser.add_argument("--version", action="version", version=f"cagmamba {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "ablate":
            p.add_argument("--grid", choices=("all", "variants", "windows"), default="all")
    return parser


def _manifest(cfg: RunConfig, args) -> dict:
    return {
        "command": args.command,
        "version": __version__,
        "numpy": np.__version__,
        "seed": cfg.seed,
        "config": cfg.to_flat(),
        "inputs": {k: getattr(args, k) for k in ("config", "data", "checkpoint", "split") if getattr(args, k, None)},
    }


def _error(kind: str, message: str) -> int:
    code = EXIT_CODES[kind]
    sys.stderr.write(json.dumps({"error": {"type": kind, "code": code, "message": message}}) + "\n")
    return code


def main(argv: list[str] | None = None) -> int:
    level = getattr(logging, os.environ.get(LOG_ENV, "WARNING").upper(), logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        cfg = load_config(args.config, args.overrides, args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        # non-finite values are reported by the engine, not as numpy warnings
        with np.errstate(all="ignore"):
            summary = COMMANDS[args.command](cfg, args, out)
        _write_json(out / "manifest.json", _manifest(cfg, args))
    except CliError as exc:
        return _error(exc.kind, str(exc))
    except ConfigError as exc:
        return _error("config", str(exc))
    except (DataError, CheckpointError) as exc:
        return _error("data", str(exc))
    except DivergenceError as exc:
        return _error("divergence", str(exc))
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except Exception as exc:
        log.debug("internal error", exc_info=True)
        return _error("internal", f"{type(exc).__name__}: {exc}")
    sys.stdout.write(_dump(summary))
    return 0


if __name__ == "__main__":
    sys.exit(main())
