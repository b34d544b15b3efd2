"""Sample records, dataset files, the synthetic generator and batching.

Dataset files are JSON Lines.  The first line is the header::

    {"format": "cagmamba-dataset", "version": 1, "d_t": 8, "d_a": 8,
     "k_t": 2, "k_a": 1, "counts": {"train": 1400, "valid": 300, "test": 300}}

and every following line is one record with the fields ``id``, ``label``,
``split``, ``text``, ``audio``, ``text_ctx``, ``audio_ctx``.  Context lists
hold up to ``k_t`` / ``k_a`` vectors, oldest first.  Floats are written with
``repr`` precision, so a save/load round trip is exact.
"""

from __future__ import annotations

import json
import math
from collections.abc import Iterator, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT = "cagmamba-dataset"
VERSION = 1
SPLITS = ("train", "valid", "test")


class DataError(ValueError):
    """Malformed dataset file or inconsistent record."""


@dataclass
class Sample:
    id: str
    label: float
    text: list[float]
    audio: list[float]
    text_ctx: list[list[float]] = field(default_factory=list)
    audio_ctx: list[list[float]] = field(default_factory=list)
    split: str = "train"

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "label": self.label,
            "split": self.split,
            "text": list(self.text),
            "audio": list(self.audio),
            "text_ctx": [list(v) for v in self.text_ctx],
            "audio_ctx": [list(v) for v in self.audio_ctx],
        }


@dataclass
class DatasetHeader:
    d_t: int
    d_a: int
    k_t: int
    k_a: int
    counts: dict[str, int] = field(default_factory=dict)
    version: int = VERSION

    def to_record(self) -> dict:
        return {
            "format": FORMAT,
            "version": self.version,
            "d_t": self.d_t,
            "d_a": self.d_a,
            "k_t": self.k_t,
            "k_a": self.k_a,
            "counts": {s: self.counts.get(s, 0) for s in SPLITS},
        }


def validate_sample(s: Sample, header: DatasetHeader) -> None:
    def bad(msg: str):
        raise DataError(f"record {s.id!r}: {msg}")

    if s.split not in SPLITS:
        bad(f"unknown split {s.split!r}")
    if not math.isfinite(s.label):
        bad("label is not finite")
    if len(s.text) != header.d_t:
        bad(f"text has {len(s.text)} values, expected d_t={header.d_t}")
    if len(s.audio) != header.d_a:
        bad(f"audio has {len(s.audio)} values, expected d_a={header.d_a}")
    if len(s.text_ctx) > header.k_t:
        bad(f"{len(s.text_ctx)} text context vectors exceed k_t={header.k_t}")
    if len(s.audio_ctx) > header.k_a:
        bad(f"{len(s.audio_ctx)} audio context vectors exceed k_a={header.k_a}")
    for v in s.text_ctx:
        if len(v) != header.d_t:
            bad(f"text context vector has {len(v)} values, expected d_t={header.d_t}")
    for v in s.audio_ctx:
        if len(v) != header.d_a:
            bad(f"audio context vector has {len(v)} values, expected d_a={header.d_a}")


def header_for(samples: Sequence[Sample], d_t: int, d_a: int, k_t: int, k_a: int) -> DatasetHeader:
    counts = {s: 0 for s in SPLITS}
    for smp in samples:
        counts[smp.split] = counts.get(smp.split, 0) + 1
    return DatasetHeader(d_t, d_a, k_t, k_a, counts)


def save_dataset(path: str | Path, header: DatasetHeader, samples: Sequence[Sample]) -> None:
    for s in samples:
        validate_sample(s, header)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header.to_record()) + "\n")
        for s in samples:
            fh.write(json.dumps(s.to_record()) + "\n")


def load_dataset(path: str | Path) -> tuple[DatasetHeader, list[Sample]]:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DataError(f"{path}: empty file, expected a header line")
    try:
        head = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}:1: malformed header: {exc.msg}") from None
    if not isinstance(head, dict) or head.get("format") != FORMAT:
        raise DataError(f"{path}:1: not a {FORMAT} header")
    if head.get("version") != VERSION:
        raise DataError(f"{path}:1: unsupported format version {head.get('version')!r}")
    try:
        header = DatasetHeader(
            int(head["d_t"]), int(head["d_a"]), int(head["k_t"]), int(head["k_a"]), dict(head.get("counts", {})), VERSION
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}:1: malformed header field: {exc}") from None

    samples = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            s = Sample(
                id=str(rec["id"]),
                label=float(rec["label"]),
                text=[float(v) for v in rec["text"]],
                audio=[float(v) for v in rec["audio"]],
                text_ctx=[[float(v) for v in vec] for vec in rec.get("text_ctx", [])],
                audio_ctx=[[float(v) for v in vec] for vec in rec.get("audio_ctx", [])],
                split=str(rec.get("split", "train")),
            )
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{lineno}: malformed record: {exc.msg}") from None
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}:{lineno}: malformed record: {exc!r}") from None
        validate_sample(s, header)
        samples.append(s)

    found = {sp: 0 for sp in SPLITS}
    for s in samples:
        found[s.split] += 1
    declared = {sp: int(header.counts.get(sp, 0)) for sp in SPLITS}
    if header.counts and declared != found:
        raise DataError(f"{path}: header counts {declared} disagree with records {found}")
    return header, samples


# --- synthetic data -------------------------------------------------------


def generate_synthetic(
    seed: int,
    n: int,
    d_t: int = 8,
    d_a: int = 8,
    k_t: int = 1,
    k_a: int = 1,
    context_strength: float = 0.5,
    context_weights: Sequence[float] = (1.0,),
    text_noise: float = 0.1,
    audio_noise: float = 0.3,
    split_fractions: tuple[float, float] = (0.7, 0.15),
) -> list[Sample]:
    """Dialogue-style samples whose label mixes the current and earlier sentiment.

    Each sample draws a main latent and ``max(k_t, k_a, len(context_weights))``
    context latents uniformly from [-3, 3] (index 0 = most recent).  The label is

        y = clip((1 - lam) * s_main + lam * sum_k w_k s_ctx[k], -3, 3)

    Text vectors are ``s * u_t + N(0, text_noise)`` for a fixed random
    direction ``u_t``; audio vectors encode ``sign(s) |s|^0.5`` along ``u_a``
    with ``audio_noise``.  Context vectors use the same encoders on their own
    latents.  Splits are assigned by position: the first 70% train, the next
    15% valid, the rest test.
    """
    if n < 1:
        raise ValueError("generate_synthetic: n must be >= 1")
    if not 0.0 <= context_strength <= 1.0:
        raise ValueError("generate_synthetic: context_strength must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    u_t = rng.standard_normal(d_t)
    u_t /= np.linalg.norm(u_t)
    u_a = rng.standard_normal(d_a)
    u_a /= np.linalg.norm(u_a)
    w = np.zeros(max(k_t, k_a, len(context_weights)))
    w[: len(context_weights)] = context_weights
    n_ctx = w.size
    lam = context_strength

    s_main = rng.uniform(-3.0, 3.0, n)
    s_ctx = rng.uniform(-3.0, 3.0, (n, n_ctx))
    y = np.clip((1.0 - lam) * s_main + lam * (s_ctx @ w), -3.0, 3.0)

    def text_enc(s, size):
        return s[..., None] * u_t + text_noise * rng.standard_normal(size + (d_t,))

    def audio_enc(s, size):
        return (np.sign(s) * np.sqrt(np.abs(s)))[..., None] * u_a + audio_noise * rng.standard_normal(size + (d_a,))

    text = text_enc(s_main, (n,))
    audio = audio_enc(s_main, (n,))
    text_ctx = text_enc(s_ctx[:, :k_t], (n, k_t))
    audio_ctx = audio_enc(s_ctx[:, :k_a], (n, k_a))

    n_train = int(round(split_fractions[0] * n))
    n_valid = int(round(split_fractions[1] * n))
    samples = []
    for i in range(n):
        split = "train" if i < n_train else "valid" if i < n_train + n_valid else "test"
        samples.append(
            Sample(
                id=f"syn-{seed}-{i:06d}",
                label=float(y[i]),
                text=text[i].tolist(),
                audio=audio[i].tolist(),
                # stored oldest first; column 0 is the most recent
                text_ctx=text_ctx[i, ::-1].tolist(),
                audio_ctx=audio_ctx[i, ::-1].tolist(),
                split=split,
            )
        )
    return samples


def split_samples(samples: Sequence[Sample], split: str) -> list[Sample]:
    return [s for s in samples if s.split == split]


# --- batching -------------------------------------------------------------


def batch_iter(samples: Sequence[Sample], batch_size: int, shuffle_seed: int | None = None) -> Iterator[list[Sample]]:
    """Yield consecutive batches; the last one may be short.

    With ``shuffle_seed`` the order is a seeded permutation, otherwise the
    input order.
    """
    if batch_size < 1:
        raise ValueError("batch_iter: batch_size must be >= 1")
    order = np.arange(len(samples))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(samples))
    for lo in range(0, len(samples), batch_size):
        yield [samples[i] for i in order[lo : lo + batch_size]]


@dataclass
class Batch:
    """Dense arrays for one batch.  Context arrays are left-padded (oldest slots
    zeroed) to exactly ``k`` entries; the masks mark real context vectors."""

    ids: list[str]
    labels: np.ndarray
    text: np.ndarray
    audio: np.ndarray
    text_ctx: np.ndarray
    audio_ctx: np.ndarray
    text_ctx_mask: np.ndarray
    audio_ctx_mask: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)


def _stack_ctx(vectors: list[list[list[float]]], k: int, d: int) -> tuple[np.ndarray, np.ndarray]:
    out = np.zeros((len(vectors), k, d))
    mask = np.zeros((len(vectors), k))
    if k == 0:
        return out, mask
    for i, ctx in enumerate(vectors):
        recent = ctx[-k:]
        if recent:
            out[i, k - len(recent) :] = recent
            mask[i, k - len(recent) :] = 1.0
    return out, mask


def collate(samples: Sequence[Sample], k_t: int, k_a: int) -> Batch:
    """Stack samples, keeping the ``k`` most recent context vectors per modality."""
    if not samples:
        raise ValueError("collate: empty batch")
    d_t = len(samples[0].text)
    d_a = len(samples[0].audio)
    text_ctx, tmask = _stack_ctx([s.text_ctx for s in samples], k_t, d_t)
    audio_ctx, amask = _stack_ctx([s.audio_ctx for s in samples], k_a, d_a)
    return Batch(
        ids=[s.id for s in samples],
        labels=np.array([s.label for s in samples], dtype=np.float64),
        text=np.array([s.text for s in samples], dtype=np.float64),
        audio=np.array([s.audio for s in samples], dtype=np.float64),
        text_ctx=text_ctx,
        audio_ctx=audio_ctx,
        text_ctx_mask=tmask,
        audio_ctx_mask=amask,
    )
