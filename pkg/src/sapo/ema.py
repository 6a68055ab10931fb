"""EMA shadow parameters and reference-model refresh strategies."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError
from .model import PolicyModel

REF_STRATEGIES = ("fix_ref", "policy_ref", "ema_ref")


class EmaState:
    def __init__(self, params, alpha: float = 0.5, update_every: int = 2):
        if not 0.0 <= alpha <= 1.0:
            raise ConfigError("EMA alpha must lie in [0, 1]")
        if update_every < 1:
            raise ConfigError("EMA update_every must be >= 1")
        self.shadow = np.array(params, dtype=np.float64)
        self.alpha = alpha
        self.update_every = update_every
        self.step_counter = 0

    def update(self, policy_params) -> bool:
        """Count one optimizer step; blend on every ``update_every``-th. Returns True if applied."""
        policy_params = np.asarray(policy_params)
        if policy_params.shape != self.shadow.shape:
            raise ContractError(
                f"EMA expects {self.shadow.shape[0]} parameters, got {policy_params.shape}"
            )
        self.step_counter += 1
        if self.step_counter % self.update_every:
            return False
        self.shadow = self.alpha * self.shadow + (1.0 - self.alpha) * policy_params
        return True


def ema_update(state: EmaState, policy_params) -> bool:
    return state.update(policy_params)


@dataclass(frozen=True)
class RefStrategy:
    kind: str = "ema_ref"
    refresh_every: int = 20

    def validate(self) -> None:
        if self.kind not in REF_STRATEGIES:
            raise ConfigError(f"unknown reference strategy {self.kind!r}")
        if self.refresh_every < 1:
            raise ConfigError("refresh_every must be >= 1")


def refresh_reference(strategy: RefStrategy, reference: PolicyModel, policy: PolicyModel,
                      ema: EmaState | None, step: int) -> bool:
    """Overwrite the frozen reference on refresh steps. Returns True if it changed."""
    if strategy.kind == "fix_ref" or step % strategy.refresh_every:
        return False
    if strategy.kind == "policy_ref":
        reference.set_params(policy.get_params())
    else:
        reference.set_params(ema.shadow)
    return True
