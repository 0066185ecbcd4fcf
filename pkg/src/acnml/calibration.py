"""NLL, accuracy, equal-mass ECE and log-normalizer diagnostics."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .errors import ContractError

PROB_TOLERANCE = 1e-9


@dataclass(frozen=True, eq=False)
class EvaluationRecord:
    probs: np.ndarray
    true_label: int
    phi: Optional[float] = None

    def __post_init__(self):
        p = np.array(self.probs, dtype=float)
        if p.ndim != 1 or p.shape[0] < 2:
            raise ContractError("probs must be a vector with at least two entries")
        if not np.all(np.isfinite(p)) or np.any(p < 0) or abs(p.sum() - 1.0) > PROB_TOLERANCE:
            raise ContractError("probs must be a distribution")
        if not 0 <= int(self.true_label) < p.shape[0]:
            raise ContractError(f"true_label {self.true_label} outside [0, {p.shape[0]})")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)
        object.__setattr__(self, "true_label", int(self.true_label))
        if self.phi is not None:
            object.__setattr__(self, "phi", float(self.phi))

    @property
    def confidence(self) -> float:
        return float(self.probs.max())

    @property
    def correct(self) -> bool:
        # ties in the argmax resolve to the lowest label
        return int(np.argmax(self.probs)) == self.true_label


@dataclass(frozen=True)
class CalibrationBin:
    mean_confidence: float
    mean_accuracy: float
    count: int


@dataclass(frozen=True)
class CalibrationReport:
    ece: float
    nll: float
    accuracy: float
    bins: tuple

    def to_dict(self) -> dict:
        return {
            "ece": self.ece,
            "nll": self.nll,
            "accuracy": self.accuracy,
            "bins": [{"mean_confidence": b.mean_confidence, "mean_accuracy": b.mean_accuracy,
                      "count": b.count} for b in self.bins],
        }


def equal_mass_sizes(n: int, num_bins: int) -> List[int]:
    """Bin sizes for ``n`` sorted items; the remainder goes to the first bins."""
    base, extra = divmod(n, num_bins)
    return [base + (1 if i < extra else 0) for i in range(num_bins)]


def _split(order: np.ndarray, num_bins: int):
    out, start = [], 0
    for size in equal_mass_sizes(len(order), num_bins):
        out.append(order[start:start + size])
        start += size
    return out


def _require(records):
    records = list(records)
    if not records:
        raise ContractError("no records to evaluate")
    return records


def nll_of(records: Sequence[EvaluationRecord]) -> float:
    """Mean negative natural log of the probability given to the true label."""
    records = _require(records)
    terms = [-math.log(r.probs[r.true_label]) if r.probs[r.true_label] > 0 else math.inf
             for r in records]
    return math.fsum(terms) / len(records)


def accuracy_of(records: Sequence[EvaluationRecord]) -> float:
    records = _require(records)
    return sum(r.correct for r in records) / len(records)


def evaluate(records: Sequence[EvaluationRecord], num_bins: int = 20) -> CalibrationReport:
    """Aggregate metrics plus equal-mass reliability bins over max-prob confidence.

    Records are ordered by (confidence, correctness, input position). Putting
    correctness before position makes every report field independent of the
    input order: records that still tie are interchangeable within a bin.
    """
    records = _require(records)
    if num_bins < 1:
        raise ContractError("num_bins must be >= 1")
    n = len(records)
    conf = np.array([r.confidence for r in records])
    hit = np.array([r.correct for r in records], dtype=float)
    order = np.lexsort((np.arange(n), hit, conf))
    bins, ece_terms = [], []
    for idx in _split(order, num_bins):
        c = len(idx)
        if c == 0:
            bins.append(CalibrationBin(0.0, 0.0, 0))
            continue
        mc = math.fsum(conf[idx]) / c
        ma = math.fsum(hit[idx]) / c
        bins.append(CalibrationBin(mc, ma, c))
        ece_terms.append(c / n * abs(ma - mc))
    return CalibrationReport(ece=math.fsum(ece_terms), nll=nll_of(records),
                             accuracy=float(hit.sum()) / n, bins=tuple(bins))


def ece_from_bins(bins: Sequence[CalibrationBin]) -> float:
    """Recompute ECE from stored bins."""
    total = sum(b.count for b in bins)
    return math.fsum(b.count / total * abs(b.mean_accuracy - b.mean_confidence)
                     for b in bins if b.count)


@dataclass(frozen=True)
class PhiDiagnostics:
    """Histograms of the log-normalizer split by correctness, and accuracy vs its bins.

    ``edges`` is shared by both histograms. ``curve`` lists
    (mean_phi, accuracy, count) per equal-mass bin in increasing phi.
    """

    edges: np.ndarray
    correct_counts: np.ndarray
    incorrect_counts: np.ndarray
    curve: tuple
    mean_phi_correct: float
    mean_phi_incorrect: float


def phi_diagnostics(records: Sequence[EvaluationRecord], num_bins: int = 20,
                    hist_bins: int = 20) -> PhiDiagnostics:
    records = _require(records)
    missing = [i for i, r in enumerate(records) if r.phi is None]
    if missing:
        raise ContractError(f"record {missing[0]} has no phi")
    n = len(records)
    phi = np.array([r.phi for r in records])
    hit = np.array([r.correct for r in records])
    lo, hi = float(phi.min()), float(phi.max())
    if hi <= lo:
        # one occupied bin around the constant value
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, hist_bins + 1)
    correct_counts = np.histogram(phi[hit], bins=edges)[0]
    incorrect_counts = np.histogram(phi[~hit], bins=edges)[0]
    order = np.lexsort((np.arange(n), hit, phi))
    curve = []
    for idx in _split(order, num_bins):
        if len(idx) == 0:
            continue
        curve.append((math.fsum(phi[idx]) / len(idx), float(hit[idx].mean()), len(idx)))
    mean = lambda v: math.fsum(v) / len(v) if len(v) else math.nan
    return PhiDiagnostics(edges, correct_counts, incorrect_counts, tuple(curve),
                          mean(phi[hit]), mean(phi[~hit]))


def curve_inversions(curve) -> int:
    """Number of adjacent bins where accuracy rises as phi grows."""
    acc = [c[1] for c in curve]
    return sum(1 for a, b in zip(acc, acc[1:]) if b > a)


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


def dumps_json(obj) -> str:
    """JSON text with every float rendered at 17 significant digits."""
    if isinstance(obj, dict):
        return "{" + ", ".join(f"{json.dumps(str(k))}: {dumps_json(v)}" for k, v in obj.items()) + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        return "[" + ", ".join(dumps_json(v) for v in obj) + "]"
    if obj is None:
        return "null"
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, (float, np.floating)) and not math.isfinite(obj):
        # JSON has no literal for these; keep them readable by Python's parser
        return "NaN" if math.isnan(obj) else ("Infinity" if obj > 0 else "-Infinity")
    return _fmt(obj)


def write_report_json(report: CalibrationReport, path) -> None:
    with open(path, "w") as fh:
        fh.write(dumps_json(report.to_dict()) + "\n")


def write_report_csv(report: CalibrationReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin", "mean_confidence", "mean_accuracy", "count"])
        for i, b in enumerate(report.bins):
            w.writerow([i, _fmt(b.mean_confidence), _fmt(b.mean_accuracy), b.count])


def write_phi_csv(diag: PhiDiagnostics, hist_path, curve_path) -> None:
    with open(hist_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["phi_lo", "phi_hi", "correct", "incorrect"])
        for i in range(len(diag.correct_counts)):
            w.writerow([_fmt(diag.edges[i]), _fmt(diag.edges[i + 1]),
                        int(diag.correct_counts[i]), int(diag.incorrect_counts[i])])
    with open(curve_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mean_phi", "accuracy", "count"])
        for m, a, c in diag.curve:
            w.writerow([_fmt(m), _fmt(a), c])
