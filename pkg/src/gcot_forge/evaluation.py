"""Few-shot sampling, answer equivalence, and accuracy reporting."""

import json
import math
import random
from collections.abc import Mapping, Sequence

from .model import EvalReport, GcotForgeError, QASample
from .targets import CURRENCY_SYMBOLS

STANDARD_SIZES = (8, 16, 32, 64, 128)

EXACT_REL_TOL = 1e-6
RELAXED_REL_TOL = 5e-2


class NotEnoughSamples(GcotForgeError):
    """Requested few-shot size exceeds the dataset."""


class LengthMismatch(GcotForgeError):
    """Predictions and golds are not aligned."""


def sample_fewshot(dataset: Sequence[QASample], n: int, seed: int) -> list[QASample]:
    """Uniform sample without replacement, fully determined by the seed."""
    if n > len(dataset):
        raise NotEnoughSamples(f"asked for {n} of {len(dataset)} samples")
    return random.Random(seed).sample(list(dataset), n)


def normalize_answer(text: str) -> str:
    """Trim, case-fold, and strip currency symbols and thousands separators."""
    out = text.strip().casefold()
    for sym in CURRENCY_SYMBOLS + ",":
        out = out.replace(sym, "")
    return out.rstrip(".").strip()


def answers_equivalent(predicted: str, gold: str, relaxed: bool = False) -> bool:
    """Answer match after normalization.

    Both sides numeric: compared as decimals, within relative 1e-6 (or 5e-2
    in relaxed mode, the chart-QA convention). Otherwise exact string
    equality on the normalized forms.
    """
    p, g = normalize_answer(predicted), normalize_answer(gold)
    try:
        pv, gv = float(p), float(g)
    except ValueError:
        return p == g
    if not (math.isfinite(pv) and math.isfinite(gv)):
        # "nan"/"inf" strings are words, not measurements
        return p == g
    tol = RELAXED_REL_TOL if relaxed else EXACT_REL_TOL
    return abs(pv - gv) <= tol * max(abs(pv), abs(gv), 1e-9)


def accuracy(
    predictions: Sequence[str], golds: Sequence[str], relaxed: bool = False
) -> float:
    """Percentage of predictions equivalent to their gold answers."""
    if len(predictions) != len(golds):
        raise LengthMismatch(f"{len(predictions)} predictions vs {len(golds)} golds")
    if not golds:
        raise LengthMismatch("empty run")
    hits = sum(1 for p, g in zip(predictions, golds) if answers_equivalent(p, g, relaxed))
    return 100.0 * hits / len(golds)


def evaluate(
    predictions: Mapping[tuple[int, int], Sequence[str]],
    golds: Mapping[tuple[int, int], Sequence[str]],
    sizes: Sequence[int],
    seeds: Sequence[int],
    relaxed: bool = False,
) -> list[EvalReport]:
    """One report per sample size over independent seeded runs.

    ``predictions`` and ``golds`` are keyed by (size, seed) and must be
    aligned within each run. Reported std is the population standard
    deviation over the per-seed accuracies.
    """
    reports = []
    for size in sizes:
        accs = []
        for seed in seeds:
            key = (size, seed)
            if key not in predictions or key not in golds:
                raise LengthMismatch(f"missing run for size={size} seed={seed}")
            accs.append(accuracy(predictions[key], golds[key], relaxed))
        reports.append(EvalReport.from_accuracies(size, list(seeds), accs))
    return reports


def reports_to_json(reports: Sequence[EvalReport], relaxed: bool = False) -> str:
    """Canonical JSON rendering; byte-stable for identical inputs."""
    payload = {
        "schema": "v1",
        "metric": "accuracy_percent",
        "numeric_mode": "relaxed" if relaxed else "exact",
        "reports": [
            {
                "sample_size": r.sample_size,
                "seeds": list(r.seeds),
                "per_seed_accuracy": [round(a, 4) for a in r.per_seed_accuracy],
                "mean": round(r.mean, 4),
                "std": round(r.std, 4),
            }
            for r in reports
        ],
    }
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def reports_to_table(reports: Sequence[EvalReport]) -> str:
    """Aligned plain-text table of mean ± std per sample size."""
    lines = [f"{'size':>6}  {'mean':>8}  {'std':>8}  per-seed"]
    for r in reports:
        per_seed = ", ".join(f"{a:.2f}" for a in r.per_seed_accuracy)
        lines.append(f"{r.sample_size:>6}  {r.mean:>8.2f}  {r.std:>8.4f}  [{per_seed}]")
    return "\n".join(lines) + "\n"


def reports_to_csv(reports: Sequence[EvalReport]) -> str:
    """Per-seed rows: sample_size,seed,accuracy."""
    lines = ["sample_size,seed,accuracy"]
    for r in reports:
        for seed, acc in zip(r.seeds, r.per_seed_accuracy):
            lines.append(f"{r.sample_size},{seed},{acc:.4f}")
    return "\n".join(lines) + "\n"
