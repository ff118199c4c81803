"""Training configuration and per-dataset hyperparameter profiles."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace

from .losses import MODES

# lambda, initial lr, decay period/multiplier, batch size, epochs per dataset;
# weight decay 1e-6 and dropout 0.2 are shared.
PROFILES: dict[str, dict] = {
    "mvsa-s": dict(lam=5.0, lr=1e-4, decay_period=10, decay_mult=0.5, weight_decay=1e-6,
                   dropout=0.2, batch_size=64, epochs=150),
    "mvsa-m": dict(lam=5.0, lr=1e-4, decay_period=15, decay_mult=0.5, weight_decay=1e-6,
                   dropout=0.2, batch_size=128, epochs=150),
    "hfm": dict(lam=10.0, lr=5e-5, decay_period=5, decay_mult=0.5, weight_decay=1e-6,
                dropout=0.2, batch_size=256, epochs=150),
    # scaled-down runs on the synthetic feature set
    "desk": dict(lam=5.0, lr=1e-3, decay_period=10, decay_mult=0.5, weight_decay=1e-6,
                 dropout=0.2, batch_size=64, epochs=30),
}


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 5.0
    tau: float = 0.07
    alpha: float = 2.0 / 3.0
    dim: int = 32
    lr: float = 1e-4
    decay_period: int = 10
    decay_mult: float = 0.5
    weight_decay: float = 1e-6
    dropout: float = 0.2
    batch_size: int = 64
    epochs: int = 150
    mode: str = "two-step"
    seed: int = 0
    eval_batch_size: int | None = None
    staged: bool = False
    staged_epochs: int = 10
    symmetric_inter: bool = False
    inter_include_diagonal: bool = False
    hidden_channels: int = 256
    lstm_hidden: int = 128
    pool_window: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        checks = [
            (0.0 <= self.alpha <= 1.0, "alpha", "must lie in [0, 1]"),
            (self.tau > 0, "tau", "must be positive"),
            (self.lam >= 0, "lam", "must be non-negative"),
            (self.dim >= 1, "dim", "must be positive"),
            (self.lr > 0, "lr", "must be positive"),
            (self.decay_period >= 1, "decay_period", "must be >= 1"),
            (self.decay_mult > 0, "decay_mult", "must be positive"),
            (self.weight_decay >= 0, "weight_decay", "must be non-negative"),
            (0.0 <= self.dropout < 1.0, "dropout", "must lie in [0, 1)"),
            (self.batch_size >= 2, "batch_size", "must be >= 2 (contrastive pairs)"),
            (self.epochs >= 0, "epochs", "must be non-negative"),
            (self.staged_epochs >= 0, "staged_epochs", "must be non-negative"),
            (self.mode in MODES, "mode", f"must be one of {', '.join(MODES)}"),
            (self.eval_batch_size is None or self.eval_batch_size >= 1, "eval_batch_size",
             "must be >= 1"),
            (min(self.hidden_channels, self.lstm_hidden, self.pool_window) >= 1,
             "hidden_channels/lstm_hidden/pool_window", "must be positive"),
        ]
        for ok, name, msg in checks:
            if not ok:
                raise ConfigError(name, f"{name} {msg} (got {getattr(self, name, None)!r})")

    @property
    def effective_eval_batch_size(self) -> int:
        return self.eval_batch_size or self.batch_size

    def as_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], f"unknown training field(s): {sorted(unknown)}")
        return cls(**values)

    @classmethod
    def from_profile(cls, name: str, **overrides) -> "TrainConfig":
        if name not in PROFILES:
            raise ConfigError("profile", f"unknown profile {name!r}; choose from {sorted(PROFILES)}")
        return cls(**{**PROFILES[name], **overrides})

    def replace(self, **kw) -> "TrainConfig":
        return replace(self, **kw)


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(message)
        self.field = field_name
