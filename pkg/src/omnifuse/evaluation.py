"""Text metrics, the evaluation loop, record files and the adapter latency bench."""

from __future__ import annotations

import base64
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import tensor as T
from .adapters import AdapterKind, AdapterVariant, build_adapter, output_token_count
from .data import Record
from .errors import ConfigError, ContractError, SequenceBudgetError
from .tensor import Tensor
from .vision import TOY_ENCODERS, EncoderConfig, LayerFeatures

log = logging.getLogger(__name__)

EvalRecord = Record


def levenshtein(a: str, b: str) -> int:
    """Unit-cost edit distance between two strings (two-row DP)."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def ned(pred: str, ref: str) -> float:
    """Levenshtein distance over the longer length; two empty strings score 0."""
    longest = max(len(pred), len(ref))
    if longest == 0:
        log.info("ned of two empty strings defined as 0")
        return 0.0
    return levenshtein(pred, ref) / longest


def normalize_text(s: str) -> str:
    return " ".join(s.lower().split())


def exact_match(pred: str, ref: str, normalize: bool = True) -> int:
    if normalize:
        pred, ref = normalize_text(pred), normalize_text(ref)
    return int(pred == ref)


def token_accuracy(pred: str, ref: str) -> float:
    """Share of aligned character positions that agree, over the longer length."""
    longest = max(len(pred), len(ref))
    if longest == 0:
        return 1.0
    return sum(p == r for p, r in zip(pred, ref)) / longest


METRICS: dict[str, Callable[[str, str], float]] = {
    "exact_match": exact_match,
    "ned": ned,
    "token_accuracy": token_accuracy,
}


@dataclass
class EvalReport:
    metrics: dict[str, float]
    records: list[dict]
    n: int
    skipped: int
    tiling: str
    skipped_ids: list[str] = field(default_factory=list)
    runtime_s: float = 0.0

    def to_dict(self, include_runtime: bool = False) -> dict:
        out = {
            "tiling": self.tiling,
            "metrics": [
                {"metric": name, "value": value, "n": self.n, "skipped": self.skipped}
                for name, value in self.metrics.items()
            ],
            "skipped_ids": self.skipped_ids,
            "records": self.records,
        }
        if include_runtime:
            out["runtime_s"] = self.runtime_s
        return out

    def to_json(self, include_runtime: bool = False) -> str:
        return json.dumps(self.to_dict(include_runtime), indent=2, sort_keys=True) + "\n"


def _tiling_flag(tiling) -> bool:
    if isinstance(tiling, bool):
        return tiling
    if tiling in ("on", "off"):
        return tiling == "on"
    raise ConfigError(f"tiling must be 'on' or 'off', got {tiling!r}")


def evaluate(model, records: Sequence[Record], metrics: Iterable[str] = ("exact_match", "ned"),
             tiling="off", max_new: int = 48) -> EvalReport:
    """Greedy answers for every record, scored per record and averaged.

    Records whose sequence does not fit the context are skipped and counted.
    """
    if not records:
        raise ContractError("evaluate needs at least one record")
    metrics = list(metrics)
    unknown = [m for m in metrics if m not in METRICS]
    if unknown or not metrics:
        raise ConfigError(f"unknown metrics {unknown}; available: {sorted(METRICS)}")
    on = _tiling_flag(tiling)
    start = time.perf_counter()
    rows, skipped = [], []
    for rec in sorted(records, key=lambda r: r.id):
        if not rec.reference:
            raise ContractError(f"record {rec.id!r} has an empty reference")
        try:
            example = model.prepare(rec.image, rec.prompt, None, tiling=on, id=rec.id)
            pred, truncated = model.answer(example, max_new)
        except SequenceBudgetError as exc:
            log.warning("record %s skipped: %s", rec.id, exc)
            skipped.append(rec.id)
            continue
        scores = {m: float(METRICS[m](pred, rec.reference)) for m in metrics}
        rows.append({"id": rec.id, "prediction": pred, "reference": rec.reference,
                     "truncated": truncated, "scores": scores})
    agg = {m: (float(np.mean([r["scores"][m] for r in rows])) if rows else float("nan"))
           for m in metrics}
    return EvalReport(agg, rows, len(rows), len(skipped), "on" if on else "off", skipped,
                      time.perf_counter() - start)


# -- record files ---------------------------------------------------------------

def encode_pixels(image: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(image, dtype="<f4").tobytes()).decode("ascii")


def decode_pixels(text: str, shape: Sequence[int]) -> np.ndarray:
    return np.frombuffer(base64.b64decode(text), dtype="<f4").reshape(shape).astype(np.float64)


def save_records(records: Sequence[Record], path) -> Path:
    """Line-delimited JSON with inline base64 float32 pixels."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps({"id": r.id, "pixels": encode_pixels(r.image),
                                "shape": list(r.image.shape), "prompt": r.prompt,
                                "reference": r.reference}) + "\n")
    return path


def load_records(path) -> list[Record]:
    """Read records; ``image_path`` (a ``.npy`` array) is resolved next to the file."""
    path = Path(path)
    out = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            if "pixels" in obj:
                image = decode_pixels(obj["pixels"], obj["shape"])
            elif "image_path" in obj:
                image = np.load(path.parent / obj["image_path"]).astype(np.float64)
            else:
                raise KeyError("pixels or image_path")
            out.append(Record(str(obj["id"]), image, obj["prompt"], obj["reference"]))
        except (KeyError, ValueError, TypeError) as exc:
            raise ConfigError(f"{path}:{lineno}: bad record ({exc})") from None
    return out


# -- adapter latency bench ------------------------------------------------------

DEFAULT_BENCH_ENCODERS = (TOY_ENCODERS["cliplike"], TOY_ENCODERS["dinolike"])


@dataclass
class BenchRow:
    variant: str
    encoders: str
    tokens: int
    expected_tokens: int
    median_ms: float
    p90_ms: float


def synthetic_features(cfg: EncoderConfig, rng: np.random.Generator, batch: int = 1) -> LayerFeatures:
    layers = [Tensor(rng.standard_normal((batch, cfg.token_count, cfg.hidden_dim)))
              for _ in range(cfg.num_layers)]
    return LayerFeatures(layers, cfg.name, cfg)


def bench_adapters(geometries: Sequence[Sequence[EncoderConfig]] = (DEFAULT_BENCH_ENCODERS,),
                   variants: Sequence[AdapterVariant] | None = None, repeats: int = 5,
                   d_lm: int = 32, batch: int = 1, seed: int = 0) -> list[BenchRow]:
    """Median and p90 forward latency per (geometry, variant) on identical features.

    Single-encoder variants see the first encoder of each geometry.
    """
    if repeats < 3:
        raise ConfigError(f"repeats must be >= 3, got {repeats}")
    if variants is None:
        variants = [AdapterVariant(k, kv_rows=16) for k in AdapterKind]
    rows = []
    for geometry in geometries:
        rng = np.random.default_rng(seed)
        feats = [synthetic_features(cfg, rng, batch) for cfg in geometry]
        for variant in variants:
            encs = list(geometry[:max(variant.arity)])
            adapter = build_adapter(variant, encs, d_lm, seed=seed)
            times = []
            with T.no_grad():
                for _ in range(repeats):
                    t0 = time.perf_counter()
                    out = adapter(feats[:len(encs)])
                    times.append((time.perf_counter() - t0) * 1e3)
            rows.append(BenchRow(variant.kind.value, "+".join(c.name for c in encs),
                                 out.shape[-2], output_token_count(variant, encs),
                                 float(np.median(times)), float(np.percentile(times, 90))))
    return rows


def format_bench(rows: Sequence[BenchRow]) -> str:
    header = f"{'variant':<22} {'encoders':<20} {'tokens':>6} {'expected':>8} {'median_ms':>10} {'p90_ms':>8}"
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(f"{r.variant:<22} {r.encoders:<20} {r.tokens:>6} {r.expected_tokens:>8} "
                     f"{r.median_ms:>10.3f} {r.p90_ms:>8.3f}")
    return "\n".join(lines)
