"""Epoch drivers: one seeded pass over the train split per strategy.

``run_epoch`` is the single entry point. It derives a per-epoch random
stream from the run stream (batch order, view jitter, mixup draws all come
from it), dispatches to the strategy, then evaluates train/val/test
accuracy. Dual-network strategies are evaluated as the mean-probability
ensemble of their two nets.
"""

from __future__ import annotations

import numpy as np

from .. import nn
from ..data import LabeledDataset
from ..errors import ConfigError, VolumeDegeneracyError
from ..noise import estimation_error
from ..rng import ROLE_EPOCH, ROLE_MODEL_A, ROLE_MODEL_B, Stream
from . import primitives as prim
from .common import TrainSplit, batches, predict_probs
from .config import MethodConfig
from .dual import _epoch_codis, _epoch_coteaching, _epoch_coteaching_plus, _epoch_jocor
from .records import EpochReport, TrainState
from .semi import _epoch_disc, _epoch_dividemix


def init_state(cfg: MethodConfig, ds: LabeledDataset, stream: Stream) -> TrainState:
    """Fresh models, optimizers and per-sample statistics for one run."""
    sizes = [ds.d, *cfg.params["hidden"], ds.k]
    model_a = nn.init_mlp(sizes, stream.child(ROLE_MODEL_A).generator())
    opt = dict(learning_rate=cfg.params["lr"], momentum=cfg.params["momentum"],
               weight_decay=cfg.params["weight_decay"])
    state = TrainState(kind=cfg.kind, model_a=model_a, opt_a=nn.init_optim(model_a, **opt))
    if cfg.is_dual:
        state.model_b = nn.init_mlp(sizes, stream.child(ROLE_MODEL_B).generator())
        state.opt_b = nn.init_optim(state.model_b, **opt)
    train_idx = ds.split_indices("train")
    state.n_train = int(train_idx.size)
    if cfg.kind == "volminnet":
        state.free_transition = cfg.params["diag_init"] * np.eye(ds.k)
    if cfg.kind == "disc":
        state.confidence = np.zeros(state.n_train)
        state.feature_std = ds.features[train_idx].astype(np.float64).std(axis=0)
    if cfg.kind == "dividemix":
        state.clean_prob = np.ones(state.n_train)
    return state


def current_transition(state: TrainState) -> np.ndarray | None:
    """The strategy's live transition-matrix estimate, if it keeps one."""
    if state.kind == "volminnet" and state.free_transition is not None:
        return prim.transition_from_free(state.free_transition)
    if state.kind == "trevision" and state.base_transition is not None:
        slack = state.slack if state.slack is not None else 0.0
        return state.base_transition + slack
    return None


def ensemble_probs(state: TrainState, x: np.ndarray) -> np.ndarray:
    p = predict_probs(state.model_a, x)
    if state.model_b is not None:
        p = 0.5 * (p + predict_probs(state.model_b, x))
    return p


def _split_accuracy(state: TrainState, ds: LabeledDataset, split: str) -> float:
    idx = ds.split_indices(split)
    if idx.size == 0:
        return float("nan")
    p = ensemble_probs(state, ds.features[idx].astype(np.float64))
    return float(np.mean(p.argmax(axis=1) == ds.observed_labels[idx]))


def run_epoch(state: TrainState, ds: LabeledDataset, cfg: MethodConfig, stream: Stream,
              true_transition: np.ndarray | None = None) -> EpochReport:
    """One full pass over the train split in seeded mini-batch order."""
    if state.kind != cfg.kind:
        raise ConfigError(f"state built for {state.kind!r} but config says {cfg.kind!r}")
    train_idx = ds.split_indices("train")
    if train_idx.size != state.n_train:
        raise ConfigError("train split size changed between epochs")
    tr = TrainSplit(ds.features[train_idx].astype(np.float64),
                    ds.observed_labels[train_idx], int(train_idx.size), ds.k)
    rng = stream.child(ROLE_EPOCH, state.epoch).generator()
    mean_loss, selection, collapsed = _DRIVERS[cfg.kind](state, tr, cfg, rng)
    est = None
    estimate = current_transition(state)
    if estimate is not None and true_transition is not None:
        est = estimation_error(estimate, true_transition)
    report = EpochReport(
        epoch=state.epoch,
        train_loss=mean_loss,
        train_acc=_split_accuracy(state, ds, "train"),
        val_acc=_split_accuracy(state, ds, "val"),
        test_acc=_split_accuracy(state, ds, "test"),
        selection=selection,
        est_error=est,
        collapsed=collapsed,
    )
    state.epoch += 1
    return report


def _sgd(state: TrainState, grads: nn.GradientSet):
    nn.sgd_step(state.model_a, grads, state.opt_a)


def _epoch_plain(state, tr, cfg, rng, loss_kind: str, kw: dict):
    total, seen = 0.0, 0
    for idx in batches(tr.n, cfg.params["batch_size"], rng):
        loss, grads = nn.loss_and_grad(state.model_a, tr.x[idx], tr.y[idx], loss_kind, **kw)
        _sgd(state, grads)
        total += loss * idx.size
        seen += idx.size
    return total / seen, None, False


def _epoch_ce(state, tr, cfg, rng):
    return _epoch_plain(state, tr, cfg, rng, "ce", {})


def _epoch_ls(state, tr, cfg, rng):
    return _epoch_plain(state, tr, cfg, rng, "ls-ce", {"eps_ls": cfg.params["eps_ls"]})


def _epoch_sce(state, tr, cfg, rng):
    kw = {"alpha": cfg.params["alpha"], "beta": cfg.params["beta"],
          "rce_clamp": cfg.params["rce_clamp"]}
    return _epoch_plain(state, tr, cfg, rng, "sce", kw)


def _epoch_cdr(state, tr, cfg, rng):
    rho = cfg.params["rho"]
    if rho is None:
        rho = max(1.0 - cfg.noise_rate, 1e-6)
    total, seen = 0.0, 0
    for idx in batches(tr.n, cfg.params["batch_size"], rng):
        loss, grads = nn.loss_and_grad(state.model_a, tr.x[idx], tr.y[idx], "ce")
        mask_w, mask_b = prim.cdr_partition(grads, state.model_a, rho)
        for g, m in zip(grads.weights, mask_w):
            g *= m
        for g, m in zip(grads.biases, mask_b):
            g *= m
        _sgd(state, grads)
        total += loss * idx.size
        seen += idx.size
    return total / seen, None, False


def _epoch_volminnet(state, tr, cfg, rng):
    vol_weight = cfg.params["vol_weight"]
    trans_lr = cfg.params["trans_lr"]
    clip = cfg.params["grad_clip"]
    # the matrix stays frozen until the classifier has separated the
    # classes, otherwise it absorbs a class and training never recovers
    update_transition = state.epoch >= cfg.warm_up_epochs
    total, seen = 0.0, 0
    for idx in batches(tr.n, cfg.params["batch_size"], rng):
        x, y = tr.x[idx], tr.y[idx]
        trans = prim.transition_from_free(state.free_transition)
        sign, logdet = np.linalg.slogdet(trans)
        if sign == 0 or logdet < np.log(1e-300):
            raise VolumeDegeneracyError("transition matrix volume collapsed")
        loss, grads = nn.loss_and_grad(state.model_a, x, y, "volmin",
                                       transition=trans, vol_weight=vol_weight)
        nn.clip_gradients(grads, clip)
        if update_transition:
            probs = nn.softmax(nn.forward(state.model_a, x))
            free_grad = prim.volmin_free_grad(probs, state.free_transition, y, vol_weight)
            state.free_transition -= trans_lr * free_grad
        _sgd(state, grads)
        total += loss * idx.size
        seen += idx.size
    return total / seen, None, False


def _epoch_trevision(state, tr, cfg, rng):
    if state.epoch < cfg.warm_up_epochs:
        return _epoch_plain(state, tr, cfg, rng, "ce", {})
    if state.base_transition is None:
        probs = predict_probs(state.model_a, tr.x)
        state.base_transition = prim.trevision_estimate(probs, cfg.params["percentile"])
        state.slack = np.zeros_like(state.base_transition)
    slack_lr = cfg.params["slack_lr"]
    clip = cfg.params["grad_clip"]
    total, seen = 0.0, 0
    for idx in batches(tr.n, cfg.params["batch_size"], rng):
        x, y = tr.x[idx], tr.y[idx]
        trans = state.base_transition + state.slack
        loss, grads = nn.loss_and_grad(state.model_a, x, y, "volmin",
                                       transition=trans, vol_weight=0.0)
        nn.clip_gradients(grads, clip)
        probs = nn.softmax(nn.forward(state.model_a, x))
        slack_grad = prim.forward_correction_transition_grad(probs, trans, y)
        _sgd(state, grads)
        state.slack -= slack_lr * slack_grad
        total += loss * idx.size
        seen += idx.size
    return total / seen, None, False


_DRIVERS = {
    "ce": _epoch_ce,
    "ls": _epoch_ls,
    "sce": _epoch_sce,
    "cdr": _epoch_cdr,
    "volminnet": _epoch_volminnet,
    "trevision": _epoch_trevision,
    "coteaching": _epoch_coteaching,
    "coteaching_plus": _epoch_coteaching_plus,
    "codis": _epoch_codis,
    "jocor": _epoch_jocor,
    "dividemix": _epoch_dividemix,
    "disc": _epoch_disc,
}
