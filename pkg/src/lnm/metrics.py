"""Robustness metrics: checkpoint summaries, selection quality, per-class
accuracy, and cross-setting method ranking."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, IncompleteTableError, LabelRangeError, UndefinedMetricError


@dataclass
class AccuracyCurve:
    """Per-epoch (validation, test) accuracy pairs."""

    val: np.ndarray
    test: np.ndarray

    def __post_init__(self):
        self.val = np.asarray(self.val, dtype=np.float64)
        self.test = np.asarray(self.test, dtype=np.float64)
        if self.val.shape != self.test.shape or self.val.ndim != 1 or self.val.size < 1:
            raise DomainError("curve needs matching 1-d val/test arrays of length >= 1")

    @property
    def epochs(self) -> int:
        return self.val.size


@dataclass
class CheckpointSummary:
    """Three checkpoint views of one run.

    best: highest test accuracy anywhere on the curve.
    val_selected: test accuracy at the earliest epoch where validation
      accuracy peaks (the checkpoint a practitioner could actually pick).
    last_window: mean test accuracy over the final window epochs.
    """

    best: float
    val_selected: float
    last_window: float
    selected_epoch: int


def summarize_checkpoints(curve: AccuracyCurve, last_window: int = 5) -> CheckpointSummary:
    if curve.epochs < last_window:
        raise DomainError(f"curve has {curve.epochs} epochs, window needs {last_window}")
    best = float(curve.test.max())
    sel = int(np.argmax(curve.val))  # argmax returns the earliest maximizer
    return CheckpointSummary(
        best=best,
        val_selected=float(curve.test[sel]),
        last_window=float(curve.test[-last_window:].mean()),
        selected_epoch=sel,
    )


def clean_ratio(selected: np.ndarray, clean_mask: np.ndarray) -> float:
    """Share of the selection that is actually clean (selection precision)."""
    sel = np.asarray(selected, dtype=np.int64)
    if sel.size == 0:
        raise UndefinedMetricError("clean_ratio undefined on an empty selection")
    return float(np.asarray(clean_mask, dtype=bool)[sel].mean())


def coverage_ratio(selected: np.ndarray, clean_mask: np.ndarray) -> float:
    """Share of all clean samples the selection recovered (selection recall)."""
    mask = np.asarray(clean_mask, dtype=bool)
    n_clean = int(mask.sum())
    if n_clean == 0:
        raise UndefinedMetricError("coverage_ratio undefined without clean samples")
    sel = np.asarray(selected, dtype=np.int64)
    if sel.size == 0:
        return 0.0
    return float(mask[sel].sum() / n_clean)


def per_class_accuracy(predictions, labels, k: int) -> np.ndarray:
    """Accuracy per true class; NaN for classes absent from ``labels``."""
    pred = np.asarray(predictions, dtype=np.int64)
    lab = np.asarray(labels, dtype=np.int64)
    if lab.size and (lab.min() < 0 or lab.max() >= k):
        raise LabelRangeError(f"label outside [0, {k})")
    out = np.full(k, np.nan)
    for c in range(k):
        mask = lab == c
        if mask.any():
            out[c] = float((pred[mask] == c).mean())
    return out


@dataclass
class RankTable:
    """Average-tie ranks per setting plus per-pattern and overall means."""

    methods: list[str]
    settings: list[tuple[str, float]]            # (pattern, rate)
    ranks: dict[tuple[str, tuple[str, float]], float]
    pattern_mean: dict[str, dict[str, float]]    # pattern -> method -> mean rank
    overall: dict[str, float]                    # method -> mean of pattern means


def _average_tie_ranks(scores: list[float]) -> list[float]:
    """Rank 1 = best (highest score); tied scores share the mean rank."""
    order = np.argsort([-s for s in scores], kind="stable")
    ranks = [0.0] * len(scores)
    i = 0
    position = 1
    sorted_scores = [scores[j] for j in order]
    while i < len(scores):
        j = i
        while j < len(scores) and sorted_scores[j] == sorted_scores[i]:
            j += 1
        mean_rank = (position + position + (j - i) - 1) / 2.0
        for t in range(i, j):
            ranks[order[t]] = mean_rank
        position += j - i
        i = j
    return ranks


def rank_methods(scores: dict[tuple[str, tuple[str, float]], float]) -> RankTable:
    """Rank methods within each (pattern, rate) setting, then average.

    Every method must be scored on every setting; a missing cell aborts
    with its name rather than silently ranking on partial data.
    """
    methods = sorted({m for m, _ in scores})
    settings = sorted({s for _, s in scores})
    for m in methods:
        for s in settings:
            if (m, s) not in scores:
                raise IncompleteTableError(f"missing score for method {m!r} in setting {s!r}")
    ranks: dict[tuple[str, tuple[str, float]], float] = {}
    for s in settings:
        setting_ranks = _average_tie_ranks([scores[(m, s)] for m in methods])
        for m, r in zip(methods, setting_ranks):
            ranks[(m, s)] = r
    patterns = sorted({s[0] for s in settings})
    pattern_mean: dict[str, dict[str, float]] = {}
    for p in patterns:
        sub = [s for s in settings if s[0] == p]
        pattern_mean[p] = {m: float(np.mean([ranks[(m, s)] for s in sub])) for m in methods}
    overall = {m: float(np.mean([pattern_mean[p][m] for p in patterns])) for m in methods}
    return RankTable(methods, settings, ranks, pattern_mean, overall)
