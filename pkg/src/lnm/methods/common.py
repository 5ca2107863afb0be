"""Helpers shared by the epoch drivers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import nn
from .records import SelectionRecord


@dataclass
class TrainSplit:
    """Float64 view of the train split the drivers iterate over."""

    x: np.ndarray
    y: np.ndarray          # observed labels
    n: int
    k: int


def batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def predict_probs(model: nn.MlpModel, x: np.ndarray, chunk: int = 4096) -> np.ndarray:
    out = np.empty((x.shape[0], model.out_dim))
    for start in range(0, x.shape[0], chunk):
        out[start:start + chunk] = nn.softmax(nn.forward(model, x[start:start + chunk]))
    return out


def per_sample_ce(model: nn.MlpModel, x: np.ndarray, y: np.ndarray,
                  chunk: int = 4096) -> np.ndarray:
    out = np.empty(x.shape[0])
    for start in range(0, x.shape[0], chunk):
        probs = nn.softmax(nn.forward(model, x[start:start + chunk]))
        out[start:start + chunk] = nn.cross_entropy(probs, y[start:start + chunk])
    return out


def make_record(epoch: int, tr: TrainSplit, selected,
                purified=(), purified_labels=()) -> SelectionRecord:
    selected = np.unique(np.asarray(selected, dtype=np.int64))
    if selected.size:
        counts = np.bincount(tr.y[selected], minlength=tr.k)
    else:
        counts = np.zeros(tr.k, dtype=np.int64)
    return SelectionRecord(epoch, selected, np.asarray(purified, dtype=np.int64),
                           np.asarray(purified_labels, dtype=np.int64),
                           per_class_selected=counts)


def full_data_fallback(state, tr, cfg, rng):
    """Selection collapsed: train on everything with plain CE, flag the epoch."""
    total, seen = 0.0, 0
    models = [(state.model_a, state.opt_a)]
    if state.model_b is not None:
        models.append((state.model_b, state.opt_b))
    for idx in batches(tr.n, cfg.params["batch_size"], rng):
        for model, opt in models:
            loss, grads = nn.loss_and_grad(model, tr.x[idx], tr.y[idx], "ce")
            nn.sgd_step(model, grads, opt)
            total += loss * idx.size
            seen += idx.size
    return total / seen, make_record(state.epoch, tr, []), True
