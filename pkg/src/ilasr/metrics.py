"""Greedy CTC decoding, character error rate, and correlation statistics."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .model import BLANK, Posteriors


def greedy_decode(posteriors, blank_id: int = BLANK) -> list[list[int]]:
    """Best-path decoding: frame argmax (ties to the lowest index), merge repeats, drop blanks.

    Accepts a Posteriors batch, a (K, M) matrix, or a (B, K, M) array and
    returns one transcript per sample.
    """
    if isinstance(posteriors, Posteriors):
        scores, mask = posteriors.log_probs.data, posteriors.mask
    else:
        scores = np.asarray(posteriors, dtype=np.float64)
        if scores.ndim == 2:
            scores = scores[None]
        mask = np.ones(scores.shape[:2], dtype=bool)
    best = scores.argmax(axis=-1)
    out = []
    for b in range(best.shape[0]):
        path = best[b, mask[b]]
        keep = np.ones(len(path), dtype=bool)
        keep[1:] = path[1:] != path[:-1]
        out.append([int(c) for c in path[keep] if c != blank_id])
    return out


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    """Levenshtein distance with unit insertion, deletion and substitution costs."""
    if len(ref) < len(hyp):
        ref, hyp = hyp, ref
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def corpus_cer(edits: Sequence[int], ref_lengths: Sequence[int]) -> float:
    """Total edits over total reference length (a ratio, not a percentage)."""
    total = int(np.sum(ref_lengths))
    if total <= 0:
        raise ValueError("corpus_cer: total reference length is zero")
    return float(np.sum(edits)) / total


class UndefinedCorrelation(ValueError):
    pass


def pearson_correlation(xs: Sequence[float], ys: Sequence[float]) -> float:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"pearson_correlation: series shapes {x.shape} and {y.shape} differ")
    if len(x) < 3:
        raise UndefinedCorrelation(f"undefined correlation: need at least 3 points, got {len(x)}")
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = math.sqrt(float(dx @ dx)), math.sqrt(float(dy @ dy))
    if sx == 0.0 or sy == 0.0:
        raise UndefinedCorrelation("undefined correlation: a series is constant")
    return float(np.clip((dx @ dy) / (sx * sy), -1.0, 1.0))


@dataclass
class SampleResult:
    sample_id: int
    ref_len: int
    edits: int
    ebkd_loss: float | None = None

    @property
    def cer(self) -> float:
        return self.edits / self.ref_len if self.ref_len else float(self.edits > 0)


@dataclass
class EvalReport:
    samples: list[SampleResult]
    meta: dict = field(default_factory=dict)

    @property
    def corpus_cer(self) -> float:
        return corpus_cer([s.edits for s in self.samples], [s.ref_len for s in self.samples])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sample_id", "ref_len", "edits", "cer", "ebkd_loss"])
        for s in self.samples:
            w.writerow([s.sample_id, s.ref_len, s.edits, f"{s.cer:.6f}",
                        "" if s.ebkd_loss is None else f"{s.ebkd_loss:.9f}"])
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "corpus_cer": round(100.0 * self.corpus_cer, 2),
            "n_samples": len(self.samples),
            "stage": self.meta.get("stage"),
            "method": self.meta.get("method"),
            "seed": self.meta.get("seed"),
        }

    def summary_text(self) -> str:
        return json.dumps(self.summary(), sort_keys=True, indent=2) + "\n"


def read_report_csv(text: str) -> EvalReport:
    rows = list(csv.DictReader(io.StringIO(text)))
    return EvalReport([SampleResult(int(r["sample_id"]), int(r["ref_len"]), int(r["edits"]),
                                    float(r["ebkd_loss"]) if r["ebkd_loss"] else None)
                       for r in rows])
