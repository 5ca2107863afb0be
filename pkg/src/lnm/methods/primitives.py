"""Shared building blocks for the noise-robust training strategies."""

from __future__ import annotations

import numpy as np

from .. import nn
from ..data import ClassHistogram
from ..errors import (
    ConfigError,
    DegenerateFitError,
    DomainError,
    EstimationError,
    ShapeError,
    VolumeDegeneracyError,
)

LOG_EPS = nn.LOG_EPS

# re-export under the strategy-facing name; one definition serves both the
# ls-ce loss kind and the warm-up toggles
smooth_labels = nn.smoothed_targets


def rce_loss(probs: np.ndarray, target_dists: np.ndarray, clamp: float = -4.0) -> np.ndarray:
    """Reversed cross entropy -sum_k p(k) log q(k); log 0 is replaced by ``clamp``."""
    p = np.asarray(probs, dtype=np.float64)
    q = np.asarray(target_dists, dtype=np.float64)
    if p.shape != q.shape:
        raise ShapeError(f"probs {p.shape} vs targets {q.shape}")
    logq = np.where(q > 0, np.log(np.maximum(q, LOG_EPS)), clamp)
    return -(p * logq).sum(axis=1)


def rce_prob_grad(probs: np.ndarray, target_dists: np.ndarray, clamp: float = -4.0) -> np.ndarray:
    q = np.asarray(target_dists, dtype=np.float64)
    logq = np.where(q > 0, np.log(np.maximum(q, LOG_EPS)), clamp)
    return np.broadcast_to(-logq, probs.shape).copy()


def sce_loss(probs: np.ndarray, targets: np.ndarray, alpha: float = 0.1,
             beta: float = 1.0, clamp: float = -4.0) -> np.ndarray:
    """Symmetric CE: alpha * CE + beta * reversed CE against one-hot targets."""
    t = np.asarray(targets, dtype=np.int64)
    one_hot = np.zeros_like(np.asarray(probs, dtype=np.float64))
    one_hot[np.arange(t.shape[0]), t] = 1.0
    return alpha * nn.cross_entropy(probs, t) + beta * rce_loss(probs, one_hot, clamp)


def entropy_reg(probs: np.ndarray) -> np.ndarray:
    """Per-sample entropy H = -sum_k p log p (1e-12 clamp)."""
    p = np.asarray(probs, dtype=np.float64)
    return -(p * np.log(np.maximum(p, LOG_EPS))).sum(axis=1)


def entropy_prob_grad(probs: np.ndarray) -> np.ndarray:
    """dH/dp, consistent with the clamped entropy above."""
    p = np.asarray(probs, dtype=np.float64)
    active = p > LOG_EPS
    return -(np.log(np.maximum(p, LOG_EPS)) + active)


def keep_schedule(epoch: int, noise_rate: float, ramp_epochs: int = 10) -> float:
    """Fraction of a batch retained by small-loss selection at this epoch."""
    if epoch < 0:
        raise DomainError("epoch must be nonnegative")
    return 1.0 - noise_rate * min(epoch / ramp_epochs, 1.0)


def small_loss_select(losses: np.ndarray, keep_fraction: float) -> np.ndarray:
    """Indices of the ceil(keep * b) smallest losses; ties go to the lower index."""
    arr = np.asarray(losses, dtype=np.float64)
    if arr.size == 0:
        raise DomainError("cannot select from an empty batch")
    if not 0.0 < keep_fraction <= 1.0:
        raise ConfigError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    m = int(np.ceil(keep_fraction * arr.size))
    return np.sort(np.argsort(arr, kind="stable")[:m])


def sym_kl(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Per-sample KL(p||q) + KL(q||p) with 1e-12 clamps."""
    pc = np.maximum(np.asarray(p, dtype=np.float64), LOG_EPS)
    qc = np.maximum(np.asarray(q, dtype=np.float64), LOG_EPS)
    if pc.shape != qc.shape:
        raise ShapeError(f"shape mismatch: {pc.shape} vs {qc.shape}")
    log_ratio = np.log(pc) - np.log(qc)
    return (pc * log_ratio - qc * log_ratio).sum(axis=1)


def sym_kl_prob_grads(p: np.ndarray, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(dS/dp, dS/dq) for the clamped symmetric KL."""
    pc = np.maximum(np.asarray(p, dtype=np.float64), LOG_EPS)
    qc = np.maximum(np.asarray(q, dtype=np.float64), LOG_EPS)
    log_ratio = np.log(pc) - np.log(qc)
    active_p = p > LOG_EPS
    active_q = q > LOG_EPS
    dp = (log_ratio + 1.0 - qc / pc) * active_p
    dq = (-log_ratio + 1.0 - pc / qc) * active_q
    return dp, dq


def gmm2_fit(losses: np.ndarray, iterations: int = 10,
             var_floor: float = 1e-4) -> tuple[np.ndarray, np.ndarray]:
    """Two-component 1-d EM on min-max-normalized losses.

    Means start at 0 and 1; the variance is tied across components, which
    makes the clean posterior a logistic function of loss and therefore
    monotone. Returns (component means low-first, per-sample posterior of
    the low-mean component).
    """
    x = np.asarray(losses, dtype=np.float64)
    if x.size < 10:
        raise DomainError(f"gmm2_fit needs >= 10 samples, got {x.size}")
    if not np.isfinite(x).all():
        raise DomainError("losses must be finite")
    lo, hi = x.min(), x.max()
    if hi - lo < 1e-12:
        raise DegenerateFitError("all losses identical; no two-cluster structure")
    z = (x - lo) / (hi - lo)
    means = np.array([0.0, 1.0])
    var = max(float(z.var()), var_floor)
    weights = np.array([0.5, 0.5])
    for _ in range(iterations):
        # E step
        diffs = z[:, None] - means[None, :]
        log_resp = np.log(weights)[None, :] - 0.5 * diffs ** 2 / var
        log_resp -= log_resp.max(axis=1, keepdims=True)
        resp = np.exp(log_resp)
        resp /= resp.sum(axis=1, keepdims=True)
        # M step (tied variance)
        total = resp.sum(axis=0)
        means = (resp * z[:, None]).sum(axis=0) / np.maximum(total, 1e-12)
        diffs = z[:, None] - means[None, :]
        var = max(float((resp * diffs ** 2).sum() / z.size), var_floor)
        weights = np.maximum(total / z.size, 1e-6)
        weights /= weights.sum()
    low = int(np.argmin(means))
    order = [low, 1 - low]
    diffs = z[:, None] - means[None, :]
    log_post = np.log(weights)[None, :] - 0.5 * diffs ** 2 / var
    log_post -= log_post.max(axis=1, keepdims=True)
    post = np.exp(log_post)
    post /= post.sum(axis=1, keepdims=True)
    w = post[:, low]
    if means[0] == means[1]:  # tie: resolve toward treating everything as clean
        w = np.ones_like(w)
    return means[order], w


def sharpen(p: np.ndarray, temp: float = 0.5) -> np.ndarray:
    """Temperature sharpening: p^(1/temp) renormalized per row."""
    if temp <= 0:
        raise DomainError("temperature must be positive")
    q = np.asarray(p, dtype=np.float64) ** (1.0 / temp)
    return q / q.sum(axis=-1, keepdims=True)


def mixup(x1: np.ndarray, q1: np.ndarray, x2: np.ndarray, q2: np.ndarray,
          rng: np.random.Generator, alpha: float = 4.0):
    """Convex combinations with lambda ~ Beta(alpha, alpha) folded to [0.5, 1].

    The fold keeps every mixed row dominated by its first argument, so row
    identity (clean vs unlabeled) survives mixing.
    """
    if x1.shape != x2.shape or q1.shape != q2.shape:
        raise ShapeError("mixup inputs must agree in shape")
    lam = rng.beta(alpha, alpha, size=x1.shape[0] if x1.ndim == 2 else None)
    lam = np.maximum(lam, 1.0 - lam)
    lx = lam[:, None] if x1.ndim == 2 else lam
    lq = lam[:, None] if q1.ndim == 2 else lam
    return lx * x1 + (1 - lx) * x2, lq * q1 + (1 - lq) * q2, lam


def class_thresholds(hist: ClassHistogram, head: float, tail: float,
                     eps: float = 1e-12) -> np.ndarray:
    """Per-class selection thresholds interpolated on log class counts.

    The log-scale factor is 0 for the smallest class and ~1 for the
    largest, so the smallest class receives the ``head`` bound and the
    largest approaches ``tail``.
    """
    counts = np.asarray(hist.counts, dtype=np.float64)
    if np.any(counts < 1):
        raise DomainError("class_thresholds needs every class count >= 1")
    if not (0 < head < 1 and 0 < tail < 1):
        raise ConfigError("threshold bounds must lie in (0, 1)")
    if eps <= 0:
        raise ConfigError("eps must be positive")
    logs = np.log(counts)
    factor = (logs - logs.min()) / (logs.max() - logs.min() + eps)
    return head - (head - tail) * factor


def cdr_partition(grads: nn.GradientSet, model: nn.MlpModel,
                  rho: float) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Boolean masks marking the top-rho fraction of |g * w| scores critical.

    Exactly ceil(rho * P) parameters are marked; ties break toward earlier
    flat position so the partition is deterministic. Returns (weight masks,
    bias masks) congruent with the model.
    """
    if not 0.0 < rho <= 1.0:
        raise ConfigError(f"rho must be in (0, 1], got {rho}")
    flats = [np.abs(g * w).ravel() for g, w in zip(grads.weights, model.weights)]
    flats += [np.abs(g * b).ravel() for g, b in zip(grads.biases, model.biases)]
    scores = np.concatenate(flats)
    m = int(np.ceil(rho * scores.size))
    critical = np.zeros(scores.size, dtype=bool)
    critical[np.argsort(-scores, kind="stable")[:m]] = True
    masks = []
    offset = 0
    for arr in flats:
        masks.append(critical[offset:offset + arr.size])
        offset += arr.size
    n_w = len(model.weights)
    mask_w = [masks[i].reshape(w.shape) for i, w in enumerate(model.weights)]
    mask_b = [masks[n_w + i].reshape(b.shape) for i, b in enumerate(model.biases)]
    return mask_w, mask_b


def transition_from_free(free: np.ndarray) -> np.ndarray:
    """Row-softmax parameterization keeping the matrix row-stochastic."""
    return nn.softmax(np.asarray(free, dtype=np.float64))


def volmin_loss(probs_clean: np.ndarray, transition: np.ndarray,
                observed_labels: np.ndarray, vol_weight: float = 1e-4) -> float:
    """CE through the transition plus a log-volume penalty on it."""
    t = np.asarray(transition, dtype=np.float64)
    sign, logdet = np.linalg.slogdet(t)
    if sign == 0 or logdet < np.log(1e-300):
        raise VolumeDegeneracyError("transition matrix volume collapsed")
    noisy = np.asarray(probs_clean, dtype=np.float64) @ t
    ce = nn.cross_entropy(noisy, observed_labels).mean()
    return float(ce + vol_weight * logdet)


def forward_correction_transition_grad(probs_clean: np.ndarray, transition: np.ndarray,
                                       observed_labels: np.ndarray) -> np.ndarray:
    """d/dT of mean CE(p @ T, observed), clamp-aware."""
    p = np.asarray(probs_clean, dtype=np.float64)
    t = np.asarray(transition, dtype=np.float64)
    noisy = p @ t
    n, k = p.shape
    dnoisy = np.zeros_like(noisy)
    rows = np.arange(n)
    active = noisy[rows, observed_labels] > LOG_EPS
    dnoisy[rows, observed_labels] = np.where(
        active, -1.0 / np.maximum(noisy[rows, observed_labels], LOG_EPS), 0.0) / n
    return p.T @ dnoisy


def volmin_free_grad(probs_clean: np.ndarray, free: np.ndarray,
                     observed_labels: np.ndarray, vol_weight: float = 1e-4) -> np.ndarray:
    """Gradient of volmin_loss w.r.t. the free row-softmax parameters."""
    t = transition_from_free(free)
    g_t = forward_correction_transition_grad(probs_clean, t, observed_labels)
    g_t = g_t + vol_weight * np.linalg.inv(t).T
    inner = (g_t * t).sum(axis=1, keepdims=True)
    return t * (g_t - inner)


def trevision_estimate(probs_all_train: np.ndarray, percentile: float = 97.0) -> np.ndarray:
    """Anchor-free stage-1 transition estimate from high-confidence posteriors.

    Row i is the full posterior of the sample sitting at the given
    percentile of p(i|x); rows are renormalized.
    """
    p = np.asarray(probs_all_train, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] == 0:
        raise EstimationError("need a nonempty [n, k] posterior matrix")
    if not 90.0 < percentile < 100.0:
        raise ConfigError(f"percentile must be in (90, 100), got {percentile}")
    n, k = p.shape
    pos = int(round((n - 1) * percentile / 100.0))
    estimate = np.empty((k, k))
    for i in range(k):
        anchor = np.argsort(p[:, i], kind="stable")[pos]
        estimate[i] = p[anchor]
    estimate /= estimate.sum(axis=1, keepdims=True)
    return estimate
