import math
from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from msrl.corpus import TaskKind
from msrl.grammar import StageFormat, filler_rationale, render_rationale
from msrl.rewards import (
    TASK_BONUS,
    RewardConfig,
    accuracy_reward,
    bt_loss,
    bt_loss_grad,
    format_reward,
    gen_rm_loss,
    task_reward,
    total_reward,
)

TYPED = StageFormat.TYPED_THINK_ANSWER
PLAIN = StageFormat.THINK_ANSWER
GOOD = render_rationale(filler_rationale("A", TaskKind.VIDEO_UNDERSTANDING, "a short clip"))
BROKEN = GOOD.replace("</think>", "")


def test_well_formed_correct_reply_scores_two_point_two():
    rb = total_reward(GOOD, TYPED, "A", TaskKind.VIDEO_UNDERSTANDING, RewardConfig(use_task_reward=True))
    assert (rb.format, rb.accuracy, rb.task) == (1, 1, Fraction(1, 5))
    assert rb.total == Fraction(11, 5)
    assert rb.as_dict()["total"] == pytest.approx(2.2)


def test_accuracy_is_gated_on_format_by_default():
    assert accuracy_reward(BROKEN, TYPED, "A") == 0
    assert accuracy_reward(BROKEN, TYPED, "A", gated=False) == 1
    rb = total_reward(BROKEN, TYPED, "A", None, RewardConfig(gate_accuracy_on_format=False))
    assert (rb.format, rb.accuracy) == (0, 1)


def test_task_reward_depends_only_on_the_tag():
    assert task_reward(BROKEN, TaskKind.VIDEO_UNDERSTANDING) == TASK_BONUS
    assert task_reward(GOOD, TaskKind.IMAGE_UNDERSTANDING) == 0
    assert task_reward(GOOD, None) == 0
    assert task_reward(GOOD, TaskKind.VIDEO_UNDERSTANDING, Fraction(1, 2)) == Fraction(1, 2)


def test_task_reward_is_off_unless_enabled():
    assert total_reward(GOOD, TYPED, "A", TaskKind.VIDEO_UNDERSTANDING).task == 0


def test_format_reward_depends_on_expected_format():
    assert format_reward(GOOD, TYPED) == 1
    assert format_reward(GOOD, PLAIN) == 0


def test_negative_task_value_is_rejected():
    with pytest.raises(ValueError):
        RewardConfig(task_reward_value=-1)


def test_bt_loss_values():
    assert bt_loss(0.0, 0.0, "A") == pytest.approx(math.log(2), abs=1e-15)
    assert bt_loss(3.0, 1.0, "A") == pytest.approx(math.log1p(math.exp(-2.0)))
    assert bt_loss(3.0, 1.0, "B") == pytest.approx(math.log1p(math.exp(2.0)))
    assert bt_loss(800.0, 0.0, "B") == pytest.approx(800.0)
    assert bt_loss(800.0, 0.0, "A") == 0.0


def test_bt_loss_rejects_bad_input():
    with pytest.raises(ValueError):
        bt_loss(float("nan"), 0.0, "A")
    with pytest.raises(ValueError):
        bt_loss(0.0, 1.0, "C")


@given(st.floats(-50, 50), st.floats(-50, 50), st.sampled_from("AB"))
def test_bt_gradient_properties(a, b, pref):
    ga, gb = bt_loss_grad(a, b, pref)
    assert ga == -gb
    assert -1.0 <= (ga if pref == "A" else gb) <= 0.0
    assert bt_loss(a, b, pref) >= 0.0


def test_gen_rm_loss():
    assert gen_rm_loss(math.log(0.25)) == pytest.approx(math.log(4))
    with pytest.raises(ValueError):
        gen_rm_loss(0.1)
