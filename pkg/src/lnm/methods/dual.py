"""Dual-network small-loss strategies: exchange, disagreement, discrepancy
and joint-consistency variants."""

from __future__ import annotations

import numpy as np

from .. import nn
from . import primitives as prim
from .common import batches, full_data_fallback, make_record


def _keep_fraction(state, cfg) -> float:
    """Schedule starts after warm-up; warm-up epochs keep everything."""
    t = state.epoch - cfg.warm_up_epochs
    if t < 0:
        return 1.0
    return prim.keep_schedule(t, cfg.noise_rate, cfg.params["ramp_epochs"])


def _co_epoch(state, tr, cfg, rng, disagree_only: bool):
    keep = _keep_fraction(state, cfg)
    if keep <= 0.0:
        return full_data_fallback(state, tr, cfg, rng)
    chosen = []
    total, seen = 0.0, 0
    for idx in batches(tr.n, cfg.params["batch_size"], rng):
        x, y = tr.x[idx], tr.y[idx]
        p_a = nn.softmax(nn.forward(state.model_a, x))
        p_b = nn.softmax(nn.forward(state.model_b, x))
        loss_a = nn.cross_entropy(p_a, y)
        loss_b = nn.cross_entropy(p_b, y)
        pool = np.arange(idx.size)
        if disagree_only:
            disagreement = np.flatnonzero(p_a.argmax(axis=1) != p_b.argmax(axis=1))
            if disagreement.size:  # empty disagreement set falls back to plain exchange
                pool = disagreement
        picks_a = pool[prim.small_loss_select(loss_a[pool], keep)]
        picks_b = pool[prim.small_loss_select(loss_b[pool], keep)]
        # each net learns from its peer's small-loss picks
        la, ga = nn.loss_and_grad(state.model_a, x[picks_b], y[picks_b], "ce")
        lb, gb = nn.loss_and_grad(state.model_b, x[picks_a], y[picks_a], "ce")
        nn.sgd_step(state.model_a, ga, state.opt_a)
        nn.sgd_step(state.model_b, gb, state.opt_b)
        chosen.append(idx[picks_a])
        chosen.append(idx[picks_b])
        total += la * picks_b.size + lb * picks_a.size
        seen += picks_a.size + picks_b.size
    record = make_record(state.epoch, tr, np.concatenate(chosen))
    return total / seen, record, False


def _epoch_coteaching(state, tr, cfg, rng):
    return _co_epoch(state, tr, cfg, rng, disagree_only=False)


def _epoch_coteaching_plus(state, tr, cfg, rng):
    return _co_epoch(state, tr, cfg, rng, disagree_only=True)


def _epoch_codis(state, tr, cfg, rng):
    keep = _keep_fraction(state, cfg)
    if keep <= 0.0:
        return full_data_fallback(state, tr, cfg, rng)
    weight = cfg.params["discrepancy_weight"]
    chosen = []
    total, seen = 0.0, 0
    for idx in batches(tr.n, cfg.params["batch_size"], rng):
        x, y = tr.x[idx], tr.y[idx]
        p_a = nn.softmax(nn.forward(state.model_a, x))
        p_b = nn.softmax(nn.forward(state.model_b, x))
        # low joint loss but high mutual discrepancy marks likely-clean samples
        score = (nn.cross_entropy(p_a, y) + nn.cross_entropy(p_b, y)
                 - weight * prim.sym_kl(p_a, p_b))
        picks = prim.small_loss_select(score, keep)
        la, ga = nn.loss_and_grad(state.model_a, x[picks], y[picks], "ce")
        lb, gb = nn.loss_and_grad(state.model_b, x[picks], y[picks], "ce")
        nn.sgd_step(state.model_a, ga, state.opt_a)
        nn.sgd_step(state.model_b, gb, state.opt_b)
        chosen.append(idx[picks])
        total += (la + lb) * picks.size
        seen += 2 * picks.size
    record = make_record(state.epoch, tr, np.concatenate(chosen))
    return total / seen, record, False


def _epoch_jocor(state, tr, cfg, rng):
    keep = _keep_fraction(state, cfg)
    if keep <= 0.0:
        return full_data_fallback(state, tr, cfg, rng)
    lam = cfg.params["consistency_weight"]
    chosen = []
    total, seen = 0.0, 0
    for idx in batches(tr.n, cfg.params["batch_size"], rng):
        x, y = tr.x[idx], tr.y[idx]
        p_a = nn.softmax(nn.forward(state.model_a, x))
        p_b = nn.softmax(nn.forward(state.model_b, x))
        joint = ((1 - lam) * (nn.cross_entropy(p_a, y) + nn.cross_entropy(p_b, y))
                 + lam * prim.sym_kl(p_a, p_b))
        picks = prim.small_loss_select(joint, keep)
        xs, ys = x[picks], y[picks]
        ps_a, ps_b = p_a[picks], p_b[picks]
        dkl_a, dkl_b = prim.sym_kl_prob_grads(ps_a, ps_b)
        grad_a = ((1 - lam) * nn.cross_entropy_prob_grad(ps_a, ys) + lam * dkl_a) / picks.size
        grad_b = ((1 - lam) * nn.cross_entropy_prob_grad(ps_b, ys) + lam * dkl_b) / picks.size
        ga = nn.backward_from_prob_grad(state.model_a, xs, grad_a)
        gb = nn.backward_from_prob_grad(state.model_b, xs, grad_b)
        nn.sgd_step(state.model_a, ga, state.opt_a)
        nn.sgd_step(state.model_b, gb, state.opt_b)
        chosen.append(idx[picks])
        total += joint[picks].sum()
        seen += picks.size
    record = make_record(state.epoch, tr, np.concatenate(chosen))
    return total / seen, record, False
