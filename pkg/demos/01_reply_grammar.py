"""
Replies, parsing and verifiable rewards
=======================================

A reward model here answers in a fixed tagged layout. Everything it is paid
for can be checked from the text alone.
"""

from msrl.corpus import TaskKind
from msrl.grammar import StageFormat, filler_rationale, parse_rationale, render_rationale
from msrl.rewards import RewardConfig, bt_loss, total_reward

TYPED = StageFormat.TYPED_THINK_ANSWER

# a well-formed typed reply for an image-generation comparison
r = filler_rationale("B", TaskKind.IMAGE_GENERATION, "Two harbor scenes, one without boats.")
text = render_rationale(r)
print(text)
print()

# parsing gives back the same structure
print("round trip:", parse_rationale(text, TYPED) == r)

# the reward is format + accuracy + an optional bonus for naming the task
cfg = RewardConfig(use_task_reward=True)
for gold, task in [("B", TaskKind.IMAGE_GENERATION), ("A", TaskKind.IMAGE_GENERATION), ("B", TaskKind.VIDEO_GENERATION)]:
    rb = total_reward(text, TYPED, gold, task, cfg)
    print(f"gold={gold} task={task.value:18s} -> {rb.format} + {rb.accuracy} + {rb.task} = {rb.total}")

# small edits break the format, and the failure is named
for label, broken in [
    ("no closing think", text.replace("</think>", "")),
    ("chatter after answer", text + "\nHope this helps!"),
    ("answer token", text.replace("\nB\n</answer>", "\nImage B\n</answer>")),
    ("renamed section", text.replace("Conclusion:", "Verdict:")),
]:
    err = parse_rationale(broken, TYPED)
    print(f"{label:22s} {err.kind.value:16s} {err.detail}")

# the pairwise loss used by scalar reward models, for comparison
print("BT loss at equal scores:", bt_loss(0.3, 0.3, "A"))
