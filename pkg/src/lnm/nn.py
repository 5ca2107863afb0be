"""Minimal deterministic MLP classifier with analytic gradients.

All parameters and losses are float64 so finite-difference checks can be
driven below 1e-6 relative error. Hidden layers are ReLU; the output layer
is linear and feeds a max-shifted softmax. Gradients for every supported
loss are computed by pushing dL/dprobs through the softmax Jacobian and
then through the network, which keeps one backprop path for all losses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateRowError, LabelRangeError, NumericFaultError, ShapeError

LOG_EPS = 1e-12

LOSS_KINDS = ("ce", "sce", "ls-ce", "volmin", "custom-weighted")


@dataclass
class MlpModel:
    """Fully connected net: layer_sizes = [d, h_1, ..., h_m, k]."""

    layer_sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def in_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_dim(self) -> int:
        return self.layer_sizes[-1]

    def copy(self) -> "MlpModel":
        return MlpModel(
            list(self.layer_sizes),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
        )


@dataclass
class GradientSet:
    """Per-parameter gradients, shape-congruent with an MlpModel."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]


@dataclass
class OptimState:
    """SGD with momentum and (coupled) weight decay."""

    learning_rate: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    velocity_w: list[np.ndarray] | None = None
    velocity_b: list[np.ndarray] | None = None

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be nonnegative, got {self.weight_decay}")


def init_mlp(layer_sizes: list[int], rng: np.random.Generator) -> MlpModel:
    """He fan-in initialization; biases start at zero."""
    if len(layer_sizes) < 2 or any(s < 1 for s in layer_sizes):
        raise ConfigError(f"layer_sizes needs >= 2 entries, all >= 1, got {layer_sizes}")
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        scale = np.sqrt(2.0 / fan_in)
        weights.append(rng.normal(0.0, scale, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpModel(list(int(s) for s in layer_sizes), weights, biases)


def init_optim(model: MlpModel, learning_rate: float, momentum: float = 0.0,
               weight_decay: float = 0.0) -> OptimState:
    return OptimState(
        learning_rate, momentum, weight_decay,
        velocity_w=[np.zeros_like(w) for w in model.weights],
        velocity_b=[np.zeros_like(b) for b in model.biases],
    )


def _float_up(arr: np.ndarray) -> np.ndarray:
    """float64 by default; longdouble passes through (grad_check's FD side)."""
    arr = np.asarray(arr)
    if arr.dtype == np.longdouble:
        return arr
    return arr.astype(np.float64, copy=False)


def _forward_cached(model: MlpModel, batch: np.ndarray) -> list[np.ndarray]:
    """Returns [input, hidden_1, ..., logits]; hidden entries are post-ReLU."""
    if batch.ndim != 2 or batch.shape[1] != model.in_dim:
        raise ShapeError(
            f"batch width {batch.shape[1] if batch.ndim == 2 else batch.shape} "
            f"does not match model input width {model.in_dim}"
        )
    a = _float_up(batch)
    acts = [a]
    last = model.n_layers - 1
    for layer, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ w + b
        a = z if layer == last else np.maximum(z, 0.0)
        acts.append(a)
    return acts


def forward(model: MlpModel, batch: np.ndarray) -> np.ndarray:
    """Logits of shape [b, k]. Pure; never mutates the model."""
    return _forward_cached(model, batch)[-1]


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise max-shifted softmax. A -inf entry maps to exactly 0."""
    z = _float_up(logits)
    m = np.max(z, axis=-1, keepdims=True)
    if np.any(np.isneginf(m)):
        bad = int(np.flatnonzero(np.isneginf(m.ravel()))[0])
        raise DegenerateRowError(f"softmax row {bad} has no finite entry")
    e = np.exp(z - m)
    return e / e.sum(axis=-1, keepdims=True)


def _check_targets(targets, k: int, n: int):
    t = np.asarray(targets)
    if t.ndim == 1:
        if t.shape[0] != n:
            raise ShapeError(f"targets length {t.shape[0]} != batch size {n}")
        t = t.astype(np.int64)
        if t.size and (t.min() < 0 or t.max() >= k):
            raise LabelRangeError(f"target label outside [0, {k})")
        return t, True
    if t.shape != (n, k):
        raise ShapeError(f"target distribution shape {t.shape} != {(n, k)}")
    return t.astype(np.float64), False


def cross_entropy(probs: np.ndarray, targets) -> np.ndarray:
    """Per-sample -sum_k q(k) log p(k), with p clamped at 1e-12 before log."""
    p = _float_up(probs)
    t, hard = _check_targets(targets, p.shape[1], p.shape[0])
    logp = np.log(np.maximum(p, LOG_EPS))
    if hard:
        return -logp[np.arange(p.shape[0]), t]
    return -(t * logp).sum(axis=1)


def _one_hot(labels: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros((labels.shape[0], k))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def smoothed_targets(labels: np.ndarray, eps_ls: float, k: int) -> np.ndarray:
    """(1 - eps)*one-hot + eps/k on every class."""
    if not 0.0 <= eps_ls < 1.0:
        raise ConfigError(f"label-smoothing epsilon must be in [0, 1), got {eps_ls}")
    t = np.asarray(labels)
    if t.size and (t.min() < 0 or t.max() >= k):
        raise LabelRangeError(f"label outside [0, {k})")
    return (1.0 - eps_ls) * _one_hot(t.astype(np.int64), k) + eps_ls / k


def cross_entropy_prob_grad(probs: np.ndarray, targets) -> np.ndarray:
    """dL/dp for clamped cross entropy; zero where the clamp is active."""
    t, hard = _check_targets(targets, probs.shape[1], probs.shape[0])
    q = _one_hot(t, probs.shape[1]) if hard else t
    active = probs > LOG_EPS
    g = np.zeros_like(probs)
    np.divide(-q, probs, out=g, where=active)
    return g


def _rce_values_and_grad(probs: np.ndarray, labels: np.ndarray, clamp: float):
    """Reversed CE against one-hot targets: log 0 replaced by ``clamp``."""
    n, k = probs.shape
    logq = np.full((n, k), clamp)
    logq[np.arange(n), labels] = 0.0
    losses = -(probs * logq).sum(axis=1)
    return losses, -logq


def _loss_and_prob_grad(model: MlpModel, probs: np.ndarray, targets, loss_kind: str, kw: dict):
    """Per-sample losses plus dL_total/dprobs where L_total = mean_i L_i."""
    n, k = probs.shape
    if loss_kind == "ce":
        losses = cross_entropy(probs, targets)
        grad = cross_entropy_prob_grad(probs, targets)
    elif loss_kind == "sce":
        alpha = kw.get("alpha", 0.1)
        beta = kw.get("beta", 1.0)
        clamp = kw.get("rce_clamp", -4.0)
        t, hard = _check_targets(targets, k, n)
        if not hard:
            raise ConfigError("sce loss requires hard labels")
        ce = cross_entropy(probs, t)
        rce, rce_g = _rce_values_and_grad(probs, t, clamp)
        losses = alpha * ce + beta * rce
        grad = alpha * cross_entropy_prob_grad(probs, t) + beta * rce_g
    elif loss_kind == "ls-ce":
        eps_ls = kw.get("eps_ls", 0.1)
        t, hard = _check_targets(targets, k, n)
        if not hard:
            raise ConfigError("ls-ce loss requires hard labels")
        q = smoothed_targets(t, eps_ls, k)
        losses = cross_entropy(probs, q)
        grad = cross_entropy_prob_grad(probs, q)
    elif loss_kind == "volmin":
        trans = kw.get("transition")
        if trans is None:
            raise ConfigError("volmin loss requires a transition= matrix")
        trans = np.asarray(trans, dtype=np.float64)
        if trans.shape != (k, k):
            raise ShapeError(f"transition shape {trans.shape} != {(k, k)}")
        noisy = probs @ trans
        losses = cross_entropy(noisy, targets)
        vol_weight = kw.get("vol_weight", 0.0)
        if vol_weight:
            sign, logdet = np.linalg.slogdet(trans)
            losses = losses + vol_weight * logdet
        grad = cross_entropy_prob_grad(noisy, targets) @ trans.T
    elif loss_kind == "custom-weighted":
        q = kw.get("target_dists")
        if q is None:
            raise ConfigError("custom-weighted loss requires target_dists=")
        q = np.asarray(q, dtype=np.float64)
        w = np.asarray(kw.get("weights", np.ones(n)), dtype=np.float64)
        losses = w * cross_entropy(probs, q)
        grad = w[:, None] * cross_entropy_prob_grad(probs, q)
    else:
        raise ConfigError(f"unknown loss_kind {loss_kind!r}; expected one of {LOSS_KINDS}")
    return losses, grad / n


def prob_grad_to_logit_grad(probs: np.ndarray, prob_grad: np.ndarray) -> np.ndarray:
    """Chain dL/dp through the softmax Jacobian."""
    inner = (prob_grad * probs).sum(axis=1, keepdims=True)
    return probs * (prob_grad - inner)


def backprop_logit_grad(model: MlpModel, acts: list[np.ndarray], dz: np.ndarray) -> GradientSet:
    """Push a logit gradient back through cached activations."""
    gw: list[np.ndarray] = []
    gb: list[np.ndarray] = []
    for layer in reversed(range(model.n_layers)):
        a_prev = acts[layer]
        gw.append(a_prev.T @ dz)
        gb.append(dz.sum(axis=0))
        if layer > 0:
            da = dz @ model.weights[layer].T
            dz = da * (acts[layer] > 0)
    gw.reverse()
    gb.reverse()
    return GradientSet(gw, gb)


def backward_from_prob_grad(model: MlpModel, batch: np.ndarray,
                            prob_grad: np.ndarray) -> GradientSet:
    """Extension point for drivers with bespoke losses expressed as dL/dprobs.

    ``prob_grad`` must already include any mean-over-batch factor.
    """
    acts = _forward_cached(model, batch)
    probs = softmax(acts[-1])
    return backprop_logit_grad(model, acts, prob_grad_to_logit_grad(probs, prob_grad))


def loss_value(model: MlpModel, batch: np.ndarray, targets, loss_kind: str, **kw) -> float:
    """Mean loss of the named kind; the quantity backward differentiates."""
    probs = softmax(forward(model, batch))
    losses, _ = _loss_and_prob_grad(model, probs, targets, loss_kind, kw)
    return float(losses.mean())


def backward(model: MlpModel, batch: np.ndarray, targets, loss_kind: str, **kw) -> GradientSet:
    """Mean-over-batch gradient of the named loss w.r.t. every parameter."""
    return loss_and_grad(model, batch, targets, loss_kind, **kw)[1]


def loss_and_grad(model: MlpModel, batch: np.ndarray, targets, loss_kind: str,
                  **kw) -> tuple[float, GradientSet]:
    """Mean loss plus its parameter gradient in one forward/backward pass."""
    batch = np.asarray(batch)
    if batch.ndim != 2 or batch.shape[0] == 0:
        raise ShapeError(f"batch must be a nonempty 2-d array, got shape {batch.shape}")
    acts = _forward_cached(model, batch)
    probs = softmax(acts[-1])
    losses, pgrad = _loss_and_prob_grad(model, probs, targets, loss_kind, kw)
    grads = backprop_logit_grad(model, acts, prob_grad_to_logit_grad(probs, pgrad))
    return float(losses.mean()), grads


def clip_gradients(grads: GradientSet, max_norm: float) -> float:
    """Scale all gradients in place so their global l2 norm is <= max_norm.

    Returns the pre-clip norm. Losses routed through a transition matrix
    carry a 1/p factor that is unbounded near the simplex boundary; the
    drivers for those methods clip before stepping.
    """
    total = 0.0
    for arr in grads.weights + grads.biases:
        total += float((arr * arr).sum())
    norm = np.sqrt(total)
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for arr in grads.weights + grads.biases:
            arr *= scale
    return norm


def sgd_step(model: MlpModel, grads: GradientSet, opt: OptimState) -> MlpModel:
    """v <- momentum*v + g + wd*w;  w <- w - lr*v.  Mutates model in place."""
    for layer in range(model.n_layers):
        gw, gb = grads.weights[layer], grads.biases[layer]
        if not (np.isfinite(gw).all() and np.isfinite(gb).all()):
            raise NumericFaultError(f"non-finite gradient in layer {layer}", layer=layer)
        if gw.shape != model.weights[layer].shape or gb.shape != model.biases[layer].shape:
            raise ShapeError(f"gradient shape mismatch in layer {layer}")
        vw, vb = opt.velocity_w[layer], opt.velocity_b[layer]
        vw *= opt.momentum
        vw += gw + opt.weight_decay * model.weights[layer]
        vb *= opt.momentum
        vb += gb + opt.weight_decay * model.biases[layer]
        model.weights[layer] -= opt.learning_rate * vw
        model.biases[layer] -= opt.learning_rate * vb
    return model


def grad_check(model: MlpModel, batch: np.ndarray, targets, loss_kind: str,
               eps: float = 1e-5, **kw) -> float:
    """Max relative error between backward() and central finite differences.

    The difference quotients are evaluated in extended precision so the
    check is limited by truncation error, not by float64 cancellation on
    near-zero gradient components.
    """
    if not 0.0 < eps <= 1e-2:
        raise ConfigError(f"eps must be in (0, 1e-2], got {eps}")
    analytic = backward(model, batch, targets, loss_kind, **kw)
    ld = MlpModel(list(model.layer_sizes),
                  [w.astype(np.longdouble) for w in model.weights],
                  [b.astype(np.longdouble) for b in model.biases])
    batch_ld = np.asarray(batch).astype(np.longdouble)
    eps_ld = np.longdouble(eps)

    def value() -> np.longdouble:
        probs = softmax(_forward_cached(ld, batch_ld)[-1])
        losses, _ = _loss_and_prob_grad(ld, probs, targets, loss_kind, kw)
        return losses.mean()

    worst = 0.0
    for params, grads in ((ld.weights, analytic.weights), (ld.biases, analytic.biases)):
        for arr, garr in zip(params, grads):
            flat = arr.ravel()
            gflat = garr.ravel()
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps_ld
                up = value()
                flat[i] = orig - eps_ld
                down = value()
                flat[i] = orig
                numeric = float((up - down) / (2.0 * eps_ld))
                denom = max(abs(gflat[i]), abs(numeric), 1e-12)
                worst = max(worst, abs(gflat[i] - numeric) / denom)
    return worst


def predict(model: MlpModel, features: np.ndarray, batch_size: int = 4096) -> np.ndarray:
    """Argmax class predictions, streamed in chunks."""
    out = np.empty(features.shape[0], dtype=np.int64)
    for start in range(0, features.shape[0], batch_size):
        stop = start + batch_size
        out[start:stop] = np.argmax(forward(model, features[start:stop]), axis=1)
    return out


def accuracy(model: MlpModel, features: np.ndarray, labels: np.ndarray) -> float:
    if features.shape[0] == 0:
        return float("nan")
    return float(np.mean(predict(model, features) == np.asarray(labels)))
