"""Calibration-evidence ingestion and binned calibration error metrics.

Records arrive as JSONL, one prediction per line, in either of two forms:

    {"probs": [...], "label": k}        full probability vector
    {"confidence": c, "correct": b}     already-summarized prediction

Confidence-only records support ECE / RMS-CE and reliability tables; the
class-wise metrics (SCE, ACE) need full probability vectors.

Binning convention: equal-width bins are [lo, hi) except the last, which is
[lo, 1], so every record lands in exactly one bin. Equal-mass binning sorts
by confidence and splits into near-equal-count groups with the remainder
spread over the leading bins.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "CalibrationRecord",
    "BinStats",
    "RecordError",
    "ingest_records",
    "bin_records",
    "ece",
    "rms_ce",
    "sce",
    "ace",
    "reliability_data",
]

SCHEMES = ("equal_width", "equal_mass")


class RecordError(ValueError):
    """A calibration record failed validation."""


@dataclass(frozen=True)
class CalibrationRecord:
    """One prediction: its confidence, whether it was right, and (when the
    source line carried them) the full probability vector, the argmax class,
    and the true label."""

    confidence: float
    correct: bool
    probs: tuple[float, ...] | None = None
    predicted: int | None = None
    label: int | None = None


@dataclass(frozen=True)
class BinStats:
    lo: float
    hi: float
    count: int
    mean_confidence: float | None
    accuracy: float | None


def _record_from_probs(probs, label, where: str) -> CalibrationRecord:
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise RecordError(f"{where}: probs must be a non-empty vector")
    if (p < 0).any() or (p > 1).any():
        raise RecordError(f"{where}: probs entries must lie in [0, 1]")
    if abs(float(p.sum()) - 1.0) > 1e-6:
        raise RecordError(f"{where}: probs sum to {float(p.sum())}, expected 1")
    if not isinstance(label, int) or isinstance(label, bool):
        raise RecordError(f"{where}: label must be an integer")
    if not 0 <= label < p.size:
        raise RecordError(f"{where}: label {label} out of range for {p.size} classes")
    predicted = int(np.argmax(p))  # first index wins on ties
    return CalibrationRecord(
        confidence=float(p[predicted]),
        correct=predicted == label,
        probs=tuple(float(q) for q in p),
        predicted=predicted,
        label=label,
    )


def _record_from_summary(confidence, correct, where: str) -> CalibrationRecord:
    if not isinstance(confidence, (int, float)) or isinstance(confidence, bool):
        raise RecordError(f"{where}: confidence must be a number")
    if not 0.0 <= confidence <= 1.0:
        raise RecordError(f"{where}: confidence {confidence} outside [0, 1]")
    if not isinstance(correct, bool):
        raise RecordError(f"{where}: correct must be a boolean")
    return CalibrationRecord(confidence=float(confidence), correct=correct)


def ingest_records(path) -> list[CalibrationRecord]:
    """Parse and validate a JSONL calibration file; both record forms may
    coexist. Errors name the offending line."""
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            where = f"{path}:{lineno}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise RecordError(f"{where}: invalid JSON ({exc.msg})") from exc
            if not isinstance(obj, dict):
                raise RecordError(f"{where}: expected a JSON object")
            if "probs" in obj:
                if "label" not in obj:
                    raise RecordError(f"{where}: probs form requires a label")
                records.append(_record_from_probs(obj["probs"], obj["label"], where))
            elif "confidence" in obj:
                if "correct" not in obj:
                    raise RecordError(f"{where}: confidence form requires correct")
                records.append(
                    _record_from_summary(obj["confidence"], obj["correct"], where))
            else:
                raise RecordError(f"{where}: need either probs or confidence")
    return records


def _equal_width_index(conf: float, m: int) -> int:
    return min(int(conf * m), m - 1)


def _bin_values(values, flags, m: int, scheme: str) -> list[tuple[float, float, list[int]]]:
    """Group indices by bin; returns (lo, hi, member indices) per bin."""
    n = len(values)
    if scheme == "equal_width":
        members = [[] for _ in range(m)]
        for i, c in enumerate(values):
            members[_equal_width_index(c, m)].append(i)
        return [(k / m, (k + 1) / m, members[k]) for k in range(m)]
    # equal_mass
    order = sorted(range(n), key=lambda i: (values[i], i))
    base, rem = divmod(n, m)
    out = []
    pos = 0
    for k in range(m):
        size = base + (1 if k < rem else 0)
        grp = order[pos:pos + size]
        pos += size
        if grp:
            out.append((values[grp[0]], values[grp[-1]], grp))
        else:
            out.append((math.nan, math.nan, grp))
    return out


def bin_records(records, m: int, scheme: str = "equal_width") -> list[BinStats]:
    """Aggregate records into m confidence bins of the requested scheme."""
    if m < 1:
        raise ValueError(f"bin count must be >= 1, got {m}")
    if scheme not in SCHEMES:
        raise ValueError(f"scheme must be one of {SCHEMES}, got {scheme!r}")
    if not records:
        raise ValueError("cannot bin an empty record set")
    conf = [r.confidence for r in records]
    corr = [r.correct for r in records]
    bins = []
    for lo, hi, grp in _bin_values(conf, corr, m, scheme):
        if grp:
            bins.append(BinStats(
                lo=lo, hi=hi, count=len(grp),
                mean_confidence=sum(conf[i] for i in grp) / len(grp),
                accuracy=sum(1.0 for i in grp if corr[i]) / len(grp),
            ))
        else:
            bins.append(BinStats(lo=lo, hi=hi, count=0,
                                 mean_confidence=None, accuracy=None))
    return bins


def _check_total(bins, n_total: int) -> None:
    seen = sum(b.count for b in bins)
    if seen != n_total:
        raise ValueError(f"bins hold {seen} records, caller declared {n_total}")


def ece(bins, n_total: int) -> float:
    """Expected calibration error: the count-weighted mean absolute gap
    between per-bin accuracy and per-bin confidence."""
    _check_total(bins, n_total)
    return sum(
        (b.count / n_total) * abs(b.accuracy - b.mean_confidence)
        for b in bins if b.count
    )


def rms_ce(bins, n_total: int) -> float:
    """Root-mean-square calibration error; emphasizes large deviations."""
    _check_total(bins, n_total)
    return math.sqrt(sum(
        (b.count / n_total) * (b.accuracy - b.mean_confidence) ** 2
        for b in bins if b.count
    ))


def _class_probs(records) -> np.ndarray:
    missing = [i for i, r in enumerate(records) if r.probs is None]
    if missing:
        raise ValueError(
            f"record {missing[0]} lacks probs, required for class-wise metrics")
    k = len(records[0].probs)
    if any(len(r.probs) != k for r in records):
        raise ValueError("records disagree on the number of classes")
    return np.array([r.probs for r in records])


def sce(records, m: int) -> float:
    """Static calibration error: per class, bin every record by that class's
    probability into m equal-width bins, take the count-weighted absolute gap
    between the empirical label frequency and the mean probability, and
    average over classes."""
    if m < 1:
        raise ValueError(f"bin count must be >= 1, got {m}")
    if not records:
        raise ValueError("cannot score an empty record set")
    p = _class_probs(records)
    labels = np.array([r.label for r in records])
    n, k = p.shape
    total = 0.0
    for cls in range(k):
        hits = labels == cls
        for lo, hi, grp in _bin_values(p[:, cls].tolist(), None, m, "equal_width"):
            if not grp:
                continue
            freq = float(np.mean(hits[grp]))
            mean_p = float(np.mean(p[grp, cls]))
            total += (len(grp) / n) * abs(freq - mean_p)
    return total / k


def ace(records, m: int, empty_bins: str = "skip") -> float:
    """Adaptive calibration error: like sce but with equal-mass bins per
    class and uniform bin weights.

    With fewer records than bins some bins are empty; `empty_bins` picks
    whether their weight is renormalized away ("skip") or counted as zero
    gap ("zero").
    """
    if m < 1:
        raise ValueError(f"bin count must be >= 1, got {m}")
    if empty_bins not in ("skip", "zero"):
        raise ValueError(f"empty_bins must be 'skip' or 'zero', got {empty_bins!r}")
    if not records:
        raise ValueError("cannot score an empty record set")
    p = _class_probs(records)
    labels = np.array([r.label for r in records])
    n, k = p.shape
    total = 0.0
    for cls in range(k):
        hits = labels == cls
        gaps = []
        for lo, hi, grp in _bin_values(p[:, cls].tolist(), None, m, "equal_mass"):
            if not grp:
                continue
            freq = float(np.mean(hits[grp]))
            mean_p = float(np.mean(p[grp, cls]))
            gaps.append(abs(freq - mean_p))
        denom = len(gaps) if empty_bins == "skip" else m
        total += sum(gaps) / denom if denom else 0.0
    return total / k


def reliability_data(bins) -> list[tuple]:
    """Reliability-diagram rows: (lo, hi, count, mean_confidence, accuracy,
    gap), one per bin, with None entries for empty bins."""
    rows = []
    for b in bins:
        gap = None if b.count == 0 else b.accuracy - b.mean_confidence
        rows.append((b.lo, b.hi, b.count, b.mean_confidence, b.accuracy, gap))
    return rows
