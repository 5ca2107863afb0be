"""Semi-supervised strategies: loss-split co-training and two-view
confidence selection with label purification."""

from __future__ import annotations

import numpy as np

from .. import nn
from ..data import ClassHistogram
from ..errors import DegenerateFitError
from . import primitives as prim
from .common import batches, full_data_fallback, make_record, per_sample_ce, predict_probs

WARMUP_EPS_LS = 0.1


def _one_hot(labels: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros((labels.shape[0], k))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def _warmup_step(model, opt, x, y, cfg):
    """CE with an entropy bonus against early overconfidence, or smoothed CE."""
    if cfg.toggles.ls_warmup:
        loss, grads = nn.loss_and_grad(model, x, y, "ls-ce", eps_ls=WARMUP_EPS_LS)
    else:
        probs = nn.softmax(nn.forward(model, x))
        values = nn.cross_entropy(probs, y) - prim.entropy_reg(probs)
        dp = (nn.cross_entropy_prob_grad(probs, y) - prim.entropy_prob_grad(probs)) / x.shape[0]
        grads = nn.backward_from_prob_grad(model, x, dp)
        loss = float(values.mean())
    nn.sgd_step(model, grads, opt)
    return loss


def _warmup_epoch(state, tr, cfg, rng):
    models = [(state.model_a, state.opt_a)]
    if state.model_b is not None:
        models.append((state.model_b, state.opt_b))
    total, seen = 0.0, 0
    for idx in batches(tr.n, cfg.params["batch_size"], rng):
        for model, opt in models:
            total += _warmup_step(model, opt, tr.x[idx], tr.y[idx], cfg) * idx.size
            seen += idx.size
    return total / seen, None, False


def _clean_posterior(losses: np.ndarray) -> np.ndarray:
    """GMM split; a degenerate fit treats everything as clean."""
    try:
        _, w = prim.gmm2_fit(losses)
    except DegenerateFitError:
        w = np.ones_like(losses)
    return w


def _epoch_dividemix(state, tr, cfg, rng):
    if state.epoch < cfg.warm_up_epochs:
        return _warmup_epoch(state, tr, cfg, rng)
    temp = cfg.params["temp"]
    alpha = cfg.params["mix_alpha"]
    ramp = min(1.0, (state.epoch - cfg.warm_up_epochs + 1) / cfg.params["unlabeled_ramp"])
    unlabeled_weight = cfg.params["unlabeled_weight"] * ramp

    loss_a = per_sample_ce(state.model_a, tr.x, tr.y)
    loss_b = per_sample_ce(state.model_b, tr.x, tr.y)
    w_a = _clean_posterior(loss_a)
    w_b = _clean_posterior(loss_b)
    state.clean_prob = 0.5 * (w_a + w_b)
    state.last_losses = 0.5 * (loss_a + loss_b)

    p_a = predict_probs(state.model_a, tr.x)
    p_b = predict_probs(state.model_b, tr.x)
    pseudo = prim.sharpen(0.5 * (p_a + p_b), temp)  # co-guessed unlabeled targets
    one_hot = _one_hot(tr.y, tr.k)

    collapsed = False
    total, seen = 0.0, 0
    passes = ((state.model_a, state.opt_a, w_b, p_a), (state.model_b, state.opt_b, w_a, p_b))
    for model, opt, w_peer, own_probs in passes:
        clean_mask = w_peer >= 0.5
        if not clean_mask.any():
            collapsed = True
            for idx in batches(tr.n, cfg.params["batch_size"], rng):
                loss, grads = nn.loss_and_grad(model, tr.x[idx], tr.y[idx], "ce")
                nn.sgd_step(model, grads, opt)
                total += loss * idx.size
                seen += idx.size
            continue
        # clean rows: posterior-weighted blend of the label and the net's own guess
        refined = w_peer[:, None] * one_hot + (1.0 - w_peer[:, None]) * own_probs
        targets = np.where(clean_mask[:, None], prim.sharpen(refined, temp), pseudo)
        for idx in batches(tr.n, cfg.params["batch_size"], rng):
            partner = idx[rng.permutation(idx.size)]
            xm, qm, _ = prim.mixup(tr.x[idx], targets[idx], tr.x[partner], targets[partner],
                                   rng, alpha)
            probs = nn.softmax(nn.forward(model, xm))
            is_clean = clean_mask[idx]
            values = np.where(is_clean,
                              nn.cross_entropy(probs, qm),
                              unlabeled_weight * ((probs - qm) ** 2).mean(axis=1))
            dp = np.where(is_clean[:, None],
                          nn.cross_entropy_prob_grad(probs, qm),
                          unlabeled_weight * 2.0 * (probs - qm) / tr.k)
            if cfg.toggles.rce_clean:
                values = values + is_clean * prim.rce_loss(probs, qm)
                dp = dp + is_clean[:, None] * prim.rce_prob_grad(probs, qm)
            grads = nn.backward_from_prob_grad(model, xm, dp / idx.size)
            nn.sgd_step(model, grads, opt)
            total += values.sum()
            seen += idx.size
    selected = np.flatnonzero((w_a >= 0.5) | (w_b >= 0.5))
    record = make_record(state.epoch, tr, selected)
    return total / seen, record, collapsed


def _disc_thresholds(state, tr, cfg):
    """Scalar mean-confidence threshold, or per-class log-count interpolation."""
    if cfg.toggles.class_thresholds:
        counts = np.maximum(np.bincount(tr.y, minlength=tr.k), 1)
        per_class = prim.class_thresholds(ClassHistogram(counts),
                                          cfg.params["threshold_head"],
                                          cfg.params["threshold_tail"],
                                          cfg.params["threshold_eps"])
        return per_class
    return np.full(tr.k, state.confidence.mean())


def _epoch_disc(state, tr, cfg, rng):
    momentum = cfg.params["ema_momentum"]
    sigma = cfg.params["jitter"] * state.feature_std
    view1 = tr.x + rng.normal(size=tr.x.shape) * sigma
    view2 = tr.x + rng.normal(size=tr.x.shape) * sigma
    p1 = predict_probs(state.model_a, view1)
    p2 = predict_probs(state.model_a, view2)
    mean_probs = 0.5 * (p1 + p2)
    rows = np.arange(tr.n)
    state.confidence = momentum * state.confidence + (1 - momentum) * mean_probs[rows, tr.y]

    if state.epoch < cfg.warm_up_epochs:
        return _warmup_epoch(state, tr, cfg, rng)

    thresholds = _disc_thresholds(state, tr, cfg)
    clean_mask = state.confidence >= thresholds[tr.y]
    agreed = p1.argmax(axis=1)
    agree_mask = agreed == p2.argmax(axis=1)
    agree_conf = mean_probs[rows, agreed]
    purified_mask = (~clean_mask) & agree_mask & (agree_conf >= thresholds[agreed])
    if not clean_mask.any() and not purified_mask.any():
        return full_data_fallback(state, tr, cfg, rng)

    labels = tr.y.copy()
    labels[purified_mask] = agreed[purified_mask]
    hard_mask = ~(clean_mask | purified_mask)
    hard_targets = prim.smooth_labels(labels, cfg.params["hard_eps_ls"], tr.k)
    one_hot = _one_hot(labels, tr.k)

    total, seen = 0.0, 0
    for idx in batches(tr.n, cfg.params["batch_size"], rng):
        grads = None
        for view in (view1, view2):
            x = view[idx]
            probs = nn.softmax(nn.forward(state.model_a, x))
            # supervised rows train on their (possibly reassigned) one-hot
            # label; hard rows get the smoothed target instead
            targets = np.where(hard_mask[idx][:, None], hard_targets[idx], one_hot[idx])
            values = nn.cross_entropy(probs, targets)
            dp = nn.cross_entropy_prob_grad(probs, targets)
            if cfg.toggles.rce_clean:
                cm = clean_mask[idx]
                values = values + cm * prim.rce_loss(probs, one_hot[idx])
                dp = dp + cm[:, None] * prim.rce_prob_grad(probs, one_hot[idx])
            g = nn.backward_from_prob_grad(state.model_a, x, dp / (2.0 * idx.size))
            if grads is None:
                grads = g
            else:
                for acc, extra in zip(grads.weights + grads.biases, g.weights + g.biases):
                    acc += extra
            total += values.sum() * 0.5
            seen += idx.size
        nn.sgd_step(state.model_a, grads, state.opt_a)
    seen //= 2
    record = make_record(state.epoch, tr, np.flatnonzero(clean_mask),
                         np.flatnonzero(purified_mask), agreed[purified_mask])
    return total / seen, record, False
