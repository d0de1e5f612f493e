"""IntegerSGD, the amplification-factor wiring and the plateau LR schedule."""

from __future__ import annotations

from dataclasses import dataclass

from .itensor import IntTensor, add, as_int, intdiv, sub


@dataclass(frozen=True)
class IntegerSGDParams:
    gamma_inv: int
    eta_inv: int = 0

    def __post_init__(self):
        if self.gamma_inv < 1:
            raise ValueError(f"gamma_inv must be >= 1, got {self.gamma_inv}")
        if self.eta_inv < 0:
            raise ValueError(f"eta_inv must be >= 0, got {self.eta_inv}")


def integer_sgd_step(weights, grad, params: IntegerSGDParams) -> IntTensor:
    """One IntegerSGD update; returns the new weights.

    The gradient step and the decay term are truncated separately, so
    weights with ``|w| < eta_inv`` receive no decay at all.
    """
    weights, grad = as_int(weights), as_int(grad)
    if weights.shape != grad.shape:
        raise ValueError(f"weights {weights.shape} and grad {grad.shape} differ in shape")
    delta = intdiv(grad, params.gamma_inv)
    if params.eta_inv != 0:
        delta = add(delta, intdiv(weights, params.eta_inv))
    return sub(weights, delta)


def amplification_factor(class_count: int) -> int:
    if class_count < 1:
        raise ValueError("class_count must be >= 1")
    return 64 * class_count


def forward_lr(gamma_inv_lr: int, af: int) -> int:
    """Nearest integer to ``gamma_inv_lr / af``, never below 1."""
    if gamma_inv_lr < 1 or af < 1:
        raise ValueError("gamma_inv_lr and af must be positive")
    return max(1, (gamma_inv_lr + af // 2) // af)


FW_RULES = ("af-delta", "af-ratio")


@dataclass
class AmplificationContext:
    """Learning rates for one block's two kinds of layers.

    The forward-layer gradient is always divided by ``af`` on its way out of
    the learning head.  ``rule`` then picks the forward inverse rate:

    * ``"af-delta"`` keeps ``gamma_inv_lr``, so the forward path is attenuated
      by ``af * gamma_inv_lr`` in total;
    * ``"af-ratio"`` uses ``forward_lr(gamma_inv_lr, af)`` (1 for the tuned
      settings), which lets forward weights grow without bound in practice.
    """

    af: int
    gamma_inv_lr: int
    rule: str = "af-delta"

    def __post_init__(self):
        if self.rule not in FW_RULES:
            raise ValueError(f"unknown forward-rate rule {self.rule!r}; choose from {FW_RULES}")

    @classmethod
    def for_classes(cls, class_count: int, gamma_inv_lr: int,
                    rule: str = "af-delta") -> "AmplificationContext":
        return cls(amplification_factor(class_count), gamma_inv_lr, rule)

    @property
    def gamma_inv_fw(self) -> int:
        if self.rule == "af-ratio":
            return forward_lr(self.gamma_inv_lr, self.af)
        return self.gamma_inv_lr


@dataclass
class PlateauScheduler:
    """Multiply ``gamma_inv`` by 3 after ``patience`` epochs without progress.

    Accuracies are in basis points.  An epoch counts as progress only when it
    beats the best accuracy so far by more than ``min_delta``.
    """

    gamma_inv: int
    patience: int = 10
    min_delta: int = 10
    multiplier: int = 3
    best: int | None = None
    wait: int = 0

    def step(self, accuracy_bp: int) -> int | None:
        if not 0 <= accuracy_bp <= 10000:
            raise ValueError(f"accuracy must be in basis points [0, 10000], got {accuracy_bp}")
        if self.best is None or accuracy_bp > self.best + self.min_delta:
            self.best = accuracy_bp
            self.wait = 0
            return None
        self.wait += 1
        if self.wait >= self.patience:
            self.gamma_inv *= self.multiplier
            self.wait = 0
            return self.gamma_inv
        return None

    def state_dict(self) -> dict:
        return {"gamma_inv": self.gamma_inv, "patience": self.patience,
                "min_delta": self.min_delta, "multiplier": self.multiplier,
                "best": self.best, "wait": self.wait}
