"""Reward signals that supervise the sample filter.

The round and batch rewards measure the normalised drop in exponentiated
distillation loss between two loss lists; the total reward squashes both
through a sigmoid and mixes them with weight ``alpha``.  Losses are clamped
at 30 before exponentiation so extreme values stay finite without changing
their ordering.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

LOSS_CLAMP = 30.0


class RewardError(ValueError):
    """Empty loss list or invalid combination weight."""


def _exp_sum(losses: Sequence[float]) -> float:
    return math.fsum(math.exp(min(value, LOSS_CLAMP)) for value in losses)


def round_reward(prev_losses: Sequence[float], curr_losses: Sequence[float]) -> float:
    """Normalised drop in exponentiated loss between consecutive rounds.

    The lists may have different lengths (selection sizes change between
    rounds); the result always lies in (-1, 1).
    """
    if not prev_losses or not curr_losses:
        raise RewardError("round reward requires non-empty loss lists")
    prev_sum = _exp_sum(prev_losses)
    curr_sum = _exp_sum(curr_losses)
    return (prev_sum - curr_sum) / max(prev_sum, curr_sum)


def batch_reward(
    prev_batch_losses: Sequence[float] | None, curr_batch_losses: Sequence[float]
) -> float:
    """Same form as :func:`round_reward` over consecutive batches.

    The first batch of a run has no history and scores a neutral 0.
    """
    if not curr_batch_losses:
        raise RewardError("batch reward requires a non-empty current loss list")
    if not prev_batch_losses:
        return 0.0
    return round_reward(prev_batch_losses, curr_batch_losses)


def sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def total_reward(r_round: float, r_batch: float, alpha: float) -> float:
    """Sigmoid-squashed mixture of round and batch rewards; lies in (0, 1)."""
    if not 0.0 <= alpha <= 1.0:
        raise RewardError(f"alpha must be in [0, 1], got {alpha}")
    return alpha * sigmoid(r_round) + (1.0 - alpha) * sigmoid(r_batch)


@dataclass
class RewardTrace:
    """Loss history for one (learner, teacher) pair across rounds and batches."""

    alpha: float
    prev_round_losses: list[float] | None = None
    prev_batch_losses: list[float] | None = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise RewardError(f"alpha must be in [0, 1], got {self.alpha}")

    def rewards(self, curr_losses: Sequence[float]) -> tuple[float, float, float]:
        """(round, batch, total) rewards for the current batch losses.

        Missing history contributes a 0 component (neutral after sigmoid).
        """
        r_round = (
            round_reward(self.prev_round_losses, curr_losses)
            if self.prev_round_losses
            else 0.0
        )
        r_batch = batch_reward(self.prev_batch_losses, curr_losses)
        return r_round, r_batch, total_reward(r_round, r_batch, self.alpha)

    def observe_batch(self, curr_losses: Sequence[float]) -> None:
        self.prev_batch_losses = list(curr_losses)

    def finish_round(self, selected_losses: Sequence[float]) -> None:
        self.prev_round_losses = list(selected_losses)
