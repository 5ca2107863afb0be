from .config import KINDS, SELECTING_KINDS, SEMI_KINDS, SemiToggles, MethodConfig
from .drivers import current_transition, ensemble_probs, init_state, run_epoch
from .records import EpochReport, SelectionRecord, TrainState

__all__ = [
    "KINDS", "SELECTING_KINDS", "SEMI_KINDS", "SemiToggles", "MethodConfig",
    "current_transition", "ensemble_probs", "init_state", "run_epoch",
    "EpochReport", "SelectionRecord", "TrainState",
]
