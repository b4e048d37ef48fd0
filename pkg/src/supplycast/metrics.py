"""Brier score, Brier skill, ECE, precision among the top fraction, reliability bins."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import EmptyEvaluation, InputError


@dataclass(frozen=True)
class ReliabilityBin:
    lo: float
    hi: float
    count: int
    mean_predicted: float | None
    empirical_rate: float | None


@dataclass
class EvalReport:
    n: int
    event_rate: float
    brier: float
    baseline_rate: float
    baseline_brier: float
    bss_vs_baseline: float
    ece: float
    n_bins: int
    precision_at_frac: float
    frac: float
    k_used: int
    reliability: list[ReliabilityBin] = field(default_factory=list)
    backend: str = ""

    @property
    def bss_percent(self) -> str:
        return f"{100 * self.bss_vs_baseline:+.1f}%"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bss_percent"] = self.bss_percent
        return d


def _arrays(preds, labels):
    p = np.asarray(preds, dtype=float)
    y = np.asarray(labels, dtype=float)
    if p.ndim != 1 or p.shape != y.shape:
        raise InputError(f"predictions {p.shape} and labels {y.shape} must be equal-length vectors")
    if p.size == 0:
        raise EmptyEvaluation("no predictions to score")
    if np.any(~np.isfinite(p)) or np.any((p < 0) | (p > 1)):
        raise InputError("predictions must lie in [0, 1]")
    if np.any((y != 0) & (y != 1)):
        raise InputError("labels must be 0 or 1")
    return p, y


def brier(preds, labels) -> float:
    """Mean of (p - y)^2."""
    p, y = _arrays(preds, labels)
    return float(np.mean((p - y) ** 2))


def brier_skill(model_brier: float, baseline_brier: float) -> float:
    """1 - model/baseline, as a fraction (0.169 means 16.9% better)."""
    if not baseline_brier > 0:
        raise InputError(f"baseline Brier must be positive, got {baseline_brier}")
    return 1.0 - model_brier / baseline_brier


def bin_edges(n_bins: int) -> np.ndarray:
    # i / n rather than linspace so that 0.3 is the same double as 3/10.
    return np.arange(n_bins + 1) / n_bins


def bin_index(preds, n_bins: int) -> np.ndarray:
    """Right-closed equal-width bins (lo, hi]; p == 0 goes to the first bin."""
    idx = np.searchsorted(bin_edges(n_bins), np.asarray(preds, dtype=float), side="left") - 1
    return np.clip(idx, 0, n_bins - 1)


def reliability_bins(preds, labels, n_bins: int = 10) -> list[ReliabilityBin]:
    if n_bins < 1:
        raise InputError("n_bins must be >= 1")
    p, y = _arrays(preds, labels)
    edges = bin_edges(n_bins)
    idx = bin_index(p, n_bins)
    counts = np.bincount(idx, minlength=n_bins)
    sum_p = np.bincount(idx, weights=p, minlength=n_bins)
    sum_y = np.bincount(idx, weights=y, minlength=n_bins)
    out = []
    for b in range(n_bins):
        c = int(counts[b])
        out.append(
            ReliabilityBin(
                float(edges[b]),
                float(edges[b + 1]),
                c,
                float(sum_p[b] / c) if c else None,
                float(sum_y[b] / c) if c else None,
            )
        )
    return out


def ece(preds, labels, n_bins: int = 10) -> float:
    """Sum over bins of (count/n) * |mean prediction - event rate|."""
    bins = reliability_bins(preds, labels, n_bins)
    n = sum(b.count for b in bins)
    return float(sum(b.count / n * abs(b.mean_predicted - b.empirical_rate) for b in bins if b.count))


def top_k(frac: float, n: int) -> int:
    if not 0 < frac <= 1:
        raise InputError(f"frac must be in (0, 1], got {frac}")
    # round first: 0.1 * 30 is 3.0000000000000004 in binary
    return max(1, math.ceil(round(frac * n, 9)))


def precision_at(preds, labels, frac: float = 0.1, ids: Sequence[str] | None = None) -> tuple[float, int]:
    """Hit rate among the ceil(frac*n) highest predictions.

    Ties are broken by ``ids`` ascending (or by position when ids are absent).
    """
    p, y = _arrays(preds, labels)
    k = top_k(frac, len(p))
    keys = list(range(len(p))) if ids is None else list(ids)
    if len(keys) != len(p):
        raise InputError("ids must match predictions in length")
    order = sorted(range(len(p)), key=lambda i: (-p[i], keys[i]))
    hits = int(sum(y[i] for i in order[:k]))
    return hits / k, k


def eval_report(
    preds,
    labels,
    baseline_rate: float,
    n_bins: int = 10,
    frac: float = 0.1,
    ids: Sequence[str] | None = None,
    backend: str = "",
) -> EvalReport:
    p, y = _arrays(preds, labels)
    if not 0 <= baseline_rate <= 1:
        raise InputError(f"baseline rate {baseline_rate} outside [0, 1]")
    b = brier(p, y)
    base = brier(np.full_like(p, baseline_rate), y)
    prec, k = precision_at(p, y, frac, ids)
    return EvalReport(
        n=int(p.size),
        event_rate=float(y.mean()),
        brier=b,
        baseline_rate=float(baseline_rate),
        baseline_brier=base,
        bss_vs_baseline=brier_skill(b, base),
        ece=ece(p, y, n_bins),
        n_bins=n_bins,
        precision_at_frac=prec,
        frac=frac,
        k_used=k,
        reliability=reliability_bins(p, y, n_bins),
        backend=backend,
    )


def write_reliability_csv(bins: Sequence[ReliabilityBin], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lo", "hi", "count", "mean_pred", "emp_rate"])
        for b in bins:
            w.writerow([b.lo, b.hi, b.count,
                        "" if b.mean_predicted is None else repr(b.mean_predicted),
                        "" if b.empirical_rate is None else repr(b.empirical_rate)])


def write_plot_data_csv(reports: Sequence[EvalReport], path: str | Path) -> None:
    """Long-format series for external plotting: per-model bars and reliability curves."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["series", "model", "x", "y"])
        for r in reports:
            w.writerow(["brier", r.backend, "", repr(r.brier)])
            w.writerow(["bss", r.backend, "", repr(r.bss_vs_baseline)])
            w.writerow(["ece", r.backend, "", repr(r.ece)])
            w.writerow(["precision", r.backend, "", repr(r.precision_at_frac)])
        if reports:
            w.writerow(["brier", "historical_baseline", "", repr(reports[0].baseline_brier)])
        for r in reports:
            for b in r.reliability:
                if b.count:
                    w.writerow(["reliability", r.backend, repr(b.mean_predicted), repr(b.empirical_rate)])


def relative_change(new: float, old: float) -> float:
    """(new - old) / old; e.g. an ECE drop from 0.1740 to 0.0525 is -0.698."""
    if old == 0:
        raise InputError("reference value is zero")
    return (new - old) / old
