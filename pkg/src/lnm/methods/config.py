"""Strategy configuration with validated hyperparameter maps."""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

from ..errors import ConfigError

KINDS = (
    "ce", "ls", "sce", "cdr", "volminnet", "trevision",
    "coteaching", "coteaching_plus", "codis", "jocor",
    "dividemix", "disc",
)

DUAL_KINDS = ("coteaching", "coteaching_plus", "codis", "jocor", "dividemix")
SELECTING_KINDS = ("coteaching", "coteaching_plus", "codis", "jocor", "dividemix", "disc")
SEMI_KINDS = ("dividemix", "disc")

# Hyperparameters every method understands.
COMMON_PARAMS = {
    "lr": 0.1,
    "momentum": 0.9,
    "weight_decay": 0.0,
    "hidden": (64, 64),
    "batch_size": 128,
}

# Method-specific knobs and their defaults. Values without a published
# recommendation are frozen here so results stay reproducible.
KIND_PARAMS: dict[str, dict] = {
    "ce": {},
    "ls": {"eps_ls": 0.1},
    "sce": {"alpha": 0.1, "beta": 1.0, "rce_clamp": -4.0},
    "cdr": {"rho": None},  # None -> 1 - assumed noise rate
    "volminnet": {"vol_weight": 1e-4, "trans_lr": 0.3, "diag_init": 2.0, "grad_clip": 5.0},
    "trevision": {"percentile": 97.0, "slack_lr": 0.02, "grad_clip": 5.0},
    "coteaching": {"ramp_epochs": 10},
    "coteaching_plus": {"ramp_epochs": 10},
    "codis": {"ramp_epochs": 10, "discrepancy_weight": 1.0},
    "jocor": {"ramp_epochs": 10, "consistency_weight": 0.3},
    "dividemix": {"temp": 0.5, "mix_alpha": 4.0, "unlabeled_weight": 25.0,
                  "unlabeled_ramp": 16},
    "disc": {"ema_momentum": 0.9, "jitter": 0.05, "hard_eps_ls": 0.2,
             "threshold_head": 0.9, "threshold_tail": 0.6, "threshold_eps": 1e-12},
}


@dataclass
class SemiToggles:
    """Optional augmentations for the semi-supervised strategies."""

    ls_warmup: bool = False
    rce_clean: bool = False
    class_thresholds: bool = False

    def any(self) -> bool:
        return self.ls_warmup or self.rce_clean or self.class_thresholds


@dataclass
class MethodConfig:
    kind: str
    noise_rate: float = 0.0          # assumed rate, consumed by keep schedules / cdr
    warm_up_epochs: int = 5
    params: dict = field(default_factory=dict)
    toggles: SemiToggles = field(default_factory=SemiToggles)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown method kind {self.kind!r}; expected one of {KINDS}")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ConfigError(f"assumed noise rate must be in [0, 1], got {self.noise_rate}")
        if self.warm_up_epochs < 0:
            raise ConfigError("warm_up_epochs must be nonnegative")
        if isinstance(self.toggles, dict):
            self.toggles = SemiToggles(**self.toggles)
        allowed = dict(COMMON_PARAMS)
        allowed.update(KIND_PARAMS[self.kind])
        for key in self.params:
            if key not in allowed:
                raise ConfigError(f"unknown hyperparameter {key!r} for method {self.kind!r}")
        merged = dict(allowed)
        merged.update(self.params)
        if isinstance(merged["hidden"], list):
            merged["hidden"] = tuple(merged["hidden"])
        self.params = merged
        if self.toggles.any() and self.kind not in SEMI_KINDS:
            raise ConfigError(f"semi-supervised toggles only apply to {SEMI_KINDS}, not {self.kind!r}")
        if self.kind == "disc":
            head, tail = self.params["threshold_head"], self.params["threshold_tail"]
            if not (0 < head < 1 and 0 < tail < 1):
                raise ConfigError("DISC threshold bounds must lie in (0, 1)")

    @property
    def is_dual(self) -> bool:
        return self.kind in DUAL_KINDS

    @property
    def selects(self) -> bool:
        return self.kind in SELECTING_KINDS

    def to_dict(self) -> dict:
        out = asdict(self)
        out["params"] = dict(self.params)
        if isinstance(out["params"].get("hidden"), tuple):
            out["params"]["hidden"] = list(out["params"]["hidden"])
        return out
