"""Label-noise synthesis and diagnostics.

Three generators: class-conditional transition matrices (symmetric as the
built-in special case), and a model-driven instance-dependent scheme where
a reference classifier's masked softmax supplies each sample's mislabeling
distribution and a truncated normal supplies its flip rate.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .data import LabeledDataset
from .errors import ConfigError, DomainError, MatrixError, ShapeError, TruncationError

ROW_SUM_TOL = 1e-9


@dataclass
class TransitionMatrix:
    """Row-stochastic k x k matrix; entry [i, j] = P(observed j | true i)."""

    entries: np.ndarray

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=np.float64)
        if self.entries.ndim != 2 or self.entries.shape[0] != self.entries.shape[1]:
            raise MatrixError(f"transition matrix must be square, got {self.entries.shape}")
        if np.any(self.entries < -1e-12) or np.any(self.entries > 1 + 1e-12):
            raise MatrixError("transition entries must lie in [0, 1]")
        sums = self.entries.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > ROW_SUM_TOL):
            bad = int(np.argmax(np.abs(sums - 1.0)))
            raise MatrixError(f"row {bad} sums to {sums[bad]:.12f}, expected 1")

    @property
    def k(self) -> int:
        return self.entries.shape[0]


@dataclass
class NoiseSpec:
    """Declarative description of one noise process."""

    kind: str = "none"             # none | symmetric | class_conditional | instance_dependent
    rate: float = 0.0
    seed: int = 0
    matrix: TransitionMatrix | None = None   # class_conditional only
    flip_std: float = 0.1                    # instance_dependent only
    mean_match: bool = True                  # center flip-rate draws so their mean is `rate`
    ref_hidden: tuple[int, ...] = (32,)      # reference-model config (instance_dependent)
    ref_epochs: int = 30
    ref_lr: float = 0.1
    ref_batch: int = 64
    ref_fraction: float = 0.2                # share of train carved out as the clean reference
    ref_on_test: bool = False                # fidelity mode: fit the reference on the test split

    def __post_init__(self):
        kinds = ("none", "symmetric", "class_conditional", "instance_dependent")
        if self.kind not in kinds:
            raise ConfigError(f"noise kind {self.kind!r} not one of {kinds}")
        if not 0.0 <= self.rate <= 1.0:
            raise ConfigError(f"noise rate must be in [0, 1], got {self.rate}")
        if (self.matrix is not None) != (self.kind == "class_conditional"):
            raise ConfigError("an explicit matrix is required iff kind == class_conditional")


@dataclass
class NoiseOutcome:
    """Observed labels plus per-sample bookkeeping for one injection."""

    observed_labels: np.ndarray
    flipped: np.ndarray
    realized_rate: float
    flip_rates: np.ndarray | None = None  # instance-dependent only


def symmetric_matrix(rate: float, k: int) -> TransitionMatrix:
    """Diagonal 1 - rate, off-diagonal rate / (k - 1)."""
    if k < 2:
        raise DomainError(f"need k >= 2 classes, got {k}")
    if not 0.0 <= rate <= 1.0:
        raise DomainError(f"rate must be in [0, 1], got {rate}")
    t = np.full((k, k), rate / (k - 1))
    np.fill_diagonal(t, 1.0 - rate)
    return TransitionMatrix(t)


def _rows_to_categorical(rows: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw per row given uniforms u."""
    cum = np.cumsum(rows, axis=1)
    out = (u[:, None] >= cum).sum(axis=1)
    return np.minimum(out, rows.shape[1] - 1)


def apply_matrix(clean_labels: np.ndarray, matrix: TransitionMatrix | np.ndarray,
                 rng: np.random.Generator) -> NoiseOutcome:
    """Draw each observed label from the matrix row of its clean label."""
    if not isinstance(matrix, TransitionMatrix):
        matrix = TransitionMatrix(matrix)
    clean = np.asarray(clean_labels, dtype=np.int64)
    if clean.size and (clean.min() < 0 or clean.max() >= matrix.k):
        raise DomainError(f"labels outside [0, {matrix.k})")
    u = rng.random(clean.shape[0])
    observed = _rows_to_categorical(matrix.entries[clean], u)
    flipped = observed != clean
    return NoiseOutcome(observed, flipped, float(flipped.mean()) if clean.size else 0.0)


def _norm_cdf(x: float) -> float:
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def _norm_pdf(x: float) -> float:
    return math.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)


def trunc_normal(mu: float, sigma: float, lo: float, hi: float,
                 rng: np.random.Generator, size: int | None = None):
    """Rejection-sample N(mu, sigma^2) restricted to [lo, hi].

    With sigma == 0 the draw degenerates to mu (which must lie inside the
    interval). Raises if the interval carries < 1e-12 probability mass.
    """
    if lo >= hi:
        raise DomainError(f"need lo < hi, got [{lo}, {hi}]")
    n = 1 if size is None else int(size)
    if sigma < 0:
        raise DomainError("sigma must be nonnegative")
    if sigma == 0:
        if not lo <= mu <= hi:
            raise TruncationError(f"sigma=0 with mu={mu} outside [{lo}, {hi}]")
        out = np.full(n, float(mu))
        return float(out[0]) if size is None else out
    mass = _norm_cdf((hi - mu) / sigma) - _norm_cdf((lo - mu) / sigma)
    if mass < 1e-12:
        raise TruncationError(f"interval [{lo}, {hi}] has mass {mass:.3e} under "
                              f"N({mu}, {sigma}^2)")
    out = np.empty(n)
    filled = 0
    while filled < n:
        want = n - filled
        cand = rng.normal(mu, sigma, size=max(64, int(want / max(mass, 0.01)) + 8))
        ok = cand[(cand >= lo) & (cand <= hi)]
        take = min(ok.size, want)
        out[filled:filled + take] = ok[:take]
        filled += take
    return float(out[0]) if size is None else out


def truncated_mean(mu: float, sigma: float, lo: float, hi: float) -> float:
    """Analytic mean of N(mu, sigma^2) truncated to [lo, hi]."""
    a = (lo - mu) / sigma
    b = (hi - mu) / sigma
    z = _norm_cdf(b) - _norm_cdf(a)
    return mu + sigma * (_norm_pdf(a) - _norm_pdf(b)) / z


def matched_location(target_mean: float, sigma: float, lo: float, hi: float) -> float:
    """Location parameter whose truncated mean equals ``target_mean``.

    Truncation at [lo, hi] pulls the mean of N(mu, sigma^2) toward the
    interval center, so flip-rate draws centered literally at the nominal
    rate understate it near the boundaries. Bisection on the (monotone)
    truncated mean recovers the intended average.
    """
    if not lo < target_mean < hi:
        raise DomainError(f"target mean must lie strictly inside [{lo}, {hi}]")
    low, high = lo - 12.0 * sigma, hi + 12.0 * sigma
    for _ in range(200):
        mid = 0.5 * (low + high)
        if truncated_mean(mid, sigma, lo, hi) < target_mean:
            low = mid
        else:
            high = mid
    return 0.5 * (low + high)


def idn_generate(ds: LabeledDataset, ref_model: nn.MlpModel, rate: float,
                 rng: np.random.Generator, flip_std: float = 0.1,
                 mean_match: bool = True) -> NoiseOutcome:
    """Instance-dependent noise from a reference model's masked softmax.

    Per sample i with clean label y: draw flip rate q_i from a truncated
    normal on [0, 1] (std ``flip_std``, centered so the mean is ``rate``
    when ``mean_match``); mask the reference logit of y to -inf and
    renormalize; with probability q_i replace y by a draw from the masked
    softmax, which can never return y itself.
    """
    if ds.clean_labels is None:
        raise ConfigError("instance-dependent noise needs clean labels")
    if ds.k < 2:
        raise DomainError("need k >= 2 classes")
    if ref_model.in_dim != ds.d or ref_model.out_dim != ds.k:
        raise ShapeError(f"reference model is {ref_model.in_dim}->{ref_model.out_dim}, "
                         f"dataset is d={ds.d}, k={ds.k}")
    clean = ds.clean_labels
    n = ds.n
    if rate == 0.0 or flip_std == 0.0:
        q = np.full(n, float(rate))
    else:
        center = matched_location(rate, flip_std, 0.0, 1.0) if mean_match and rate < 1 else rate
        q = trunc_normal(center, flip_std, 0.0, 1.0, rng, size=n)
    logits = nn.forward(ref_model, ds.features)
    logits[np.arange(n), clean] = -np.inf
    masked = nn.softmax(logits)
    u_flip = rng.random(n)
    u_cat = rng.random(n)
    flip = u_flip < q
    observed = clean.copy()
    if flip.any():
        observed[flip] = _rows_to_categorical(masked[flip], u_cat[flip])
    flipped = observed != clean
    return NoiseOutcome(observed, flipped, float(flipped.mean()) if n else 0.0, flip_rates=q)


def empirical_noise_rate(clean, observed) -> float:
    """Fraction of positions where the two label vectors disagree."""
    a = np.asarray(clean)
    b = np.asarray(observed)
    if a.shape != b.shape:
        raise ShapeError(f"length mismatch: {a.shape} vs {b.shape}")
    return float(np.mean(a != b)) if a.size else 0.0


def estimation_error(estimate, truth) -> float:
    """Entrywise relative l1 distance between two transition matrices."""
    a = estimate.entries if isinstance(estimate, TransitionMatrix) else np.asarray(estimate)
    b = truth.entries if isinstance(truth, TransitionMatrix) else np.asarray(truth)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.abs(a - b).sum() / np.abs(b).sum())


def outcome_to_csv(outcome: NoiseOutcome, clean_labels: np.ndarray, path,
                   indices: np.ndarray | None = None) -> None:
    """Per-sample injection record: index, clean, observed, flipped, q.

    ``indices`` relabels rows with dataset-absolute positions when the
    outcome covers a subset (e.g. just the train split).
    """
    clean = np.asarray(clean_labels)
    idx = np.arange(clean.shape[0]) if indices is None else np.asarray(indices)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "clean", "observed", "flipped", "q"])
        for i in range(clean.shape[0]):
            q = "" if outcome.flip_rates is None else f"{outcome.flip_rates[i]:.6f}"
            writer.writerow([int(idx[i]), int(clean[i]), int(outcome.observed_labels[i]),
                             int(outcome.flipped[i]), q])
