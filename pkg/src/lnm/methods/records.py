"""Per-epoch bookkeeping shared by all strategy drivers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import nn
from ..errors import DomainError


@dataclass
class SelectionRecord:
    """Which train samples a method treated as clean this epoch.

    Indices are positions within the train split. ``purified`` holds
    excluded samples whose labels the method reassigned, with the new
    labels alongside.
    """

    epoch: int
    selected: np.ndarray
    purified: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    purified_labels: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    per_class_selected: np.ndarray | None = None

    def __post_init__(self):
        self.selected = np.unique(np.asarray(self.selected, dtype=np.int64))
        self.purified = np.asarray(self.purified, dtype=np.int64)
        self.purified_labels = np.asarray(self.purified_labels, dtype=np.int64)
        if self.purified.shape != self.purified_labels.shape:
            raise DomainError("purified indices and labels must align")
        if np.intersect1d(self.selected, self.purified).size:
            raise DomainError("purified set must be disjoint from the selected set")


@dataclass
class EpochReport:
    epoch: int
    train_loss: float
    train_acc: float
    val_acc: float
    test_acc: float
    selection: SelectionRecord | None = None
    est_error: float | None = None
    collapsed: bool = False


@dataclass
class TrainState:
    """Mutable per-run state: networks, optimizers, per-sample statistics."""

    kind: str
    model_a: nn.MlpModel
    opt_a: nn.OptimState
    model_b: nn.MlpModel | None = None
    opt_b: nn.OptimState | None = None
    epoch: int = 0
    n_train: int = 0
    confidence: np.ndarray | None = None        # DISC per-sample EMA
    clean_prob: np.ndarray | None = None        # DivideMix posterior w
    last_losses: np.ndarray | None = None       # most recent per-sample CE
    free_transition: np.ndarray | None = None   # VolMinNet row-softmax parameters
    base_transition: np.ndarray | None = None   # T-Revision stage-1 estimate
    slack: np.ndarray | None = None             # T-Revision learnable correction
    feature_std: np.ndarray | None = None       # DISC jitter scale
