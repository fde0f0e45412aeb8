"""Verifiable rewards and the two reference reward-model losses.

Reward components are ``Fraction`` values so that totals compose exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

from .corpus import TaskKind
from .grammar import FormatError, StageFormat, extract_answer, extract_task_tag, parse_rationale

ZERO = Fraction(0)
ONE = Fraction(1)
TASK_BONUS = Fraction(1, 5)


@dataclass(frozen=True)
class RewardConfig:
    use_task_reward: bool = False
    task_reward_value: Fraction = TASK_BONUS
    gate_accuracy_on_format: bool = True

    def __post_init__(self) -> None:
        value = Fraction(self.task_reward_value)
        if value < 0:
            raise ValueError("task_reward_value must be >= 0")
        object.__setattr__(self, "task_reward_value", value)


@dataclass(frozen=True)
class RewardBreakdown:
    format: Fraction
    accuracy: Fraction
    task: Fraction
    total: Fraction

    def as_dict(self) -> dict[str, float]:
        return {
            "format": float(self.format),
            "accuracy": float(self.accuracy),
            "task": float(self.task),
            "total": float(self.total),
        }


def format_reward(text: str, expected: StageFormat) -> Fraction:
    return ZERO if isinstance(parse_rationale(text, expected), FormatError) else ONE


def accuracy_reward(text: str, expected: StageFormat, gold: str, gated: bool = True) -> Fraction:
    parsed = parse_rationale(text, expected)
    if not isinstance(parsed, FormatError):
        return ONE if parsed.answer == gold else ZERO
    if gated:
        return ZERO
    # ungated reading: a lone well-delimited answer token still counts
    return ONE if extract_answer(text) == gold else ZERO


def task_reward(text: str, true_task: TaskKind | None, value: Fraction = TASK_BONUS) -> Fraction:
    if true_task is None:
        return ZERO
    return Fraction(value) if extract_task_tag(text) is true_task else ZERO


def total_reward(
    text: str,
    expected: StageFormat,
    gold: str,
    true_task: TaskKind | None,
    cfg: RewardConfig = RewardConfig(),
) -> RewardBreakdown:
    parsed = parse_rationale(text, expected)
    fmt = ZERO if isinstance(parsed, FormatError) else ONE
    if fmt:
        acc = ONE if parsed.answer == gold else ZERO
    else:
        acc = accuracy_reward(text, expected, gold, gated=cfg.gate_accuracy_on_format)
    task = task_reward(text, true_task, cfg.task_reward_value) if cfg.use_task_reward else ZERO
    return RewardBreakdown(fmt, acc, task, fmt + acc + task)


# -- reward-model losses ----------------------------------------------------


def _log_sigmoid(x: float) -> float:
    # stable for large |x|
    return -math.log1p(math.exp(-x)) if x >= 0 else x - math.log1p(math.exp(x))


def bt_loss(score_a: float, score_b: float, preferred: str) -> float:
    """Pairwise Bradley-Terry loss ``-log sigmoid(s_preferred - s_other)``."""
    if not (math.isfinite(score_a) and math.isfinite(score_b)):
        raise ValueError("scores must be finite")
    if preferred == "A":
        margin = score_a - score_b
    elif preferred == "B":
        margin = score_b - score_a
    else:
        raise ValueError(f"preferred must be 'A' or 'B', got {preferred!r}")
    return -_log_sigmoid(margin)


def bt_loss_grad(score_a: float, score_b: float, preferred: str) -> tuple[float, float]:
    """Gradient of :func:`bt_loss` with respect to ``(score_a, score_b)``."""
    margin = score_a - score_b if preferred == "A" else score_b - score_a
    g = -1.0 / (1.0 + math.exp(margin)) if margin > -700 else -1.0
    return (g, -g) if preferred == "A" else (-g, g)


def gen_rm_loss(label_logprob: float) -> float:
    """Negative log-likelihood of the gold label token."""
    if not label_logprob <= 0.0:
        raise ValueError(f"label_logprob must be <= 0, got {label_logprob}")
    return -label_logprob
