"""
Picking a teacher reply, and voting at test time
================================================
"""

import math

import numpy as np

from msrl.corpus import CorpusSpec, TaskKind, synth_corpus
from msrl.curriculum import CmkdRollout, cmkd_select
from msrl.grammar import StageFormat, filler_rationale, render_rationale
from msrl.harness import evaluate
from msrl.policy import Channel, FeatureLayout, PolicyParameters

TYPED = StageFormat.TYPED_THINK_ANSWER


def reply(answer, broken=False):
    text = render_rationale(filler_rationale(answer, TaskKind.VIDEO_UNDERSTANDING, "A busy street at night."))
    return text.replace("</think>", "") if broken else text


# the vote is B (3 to 2); one B reply is malformed, so the best-scoring
# well-formed B reply is used as the teacher
rollouts = [
    CmkdRollout(reply("A"), -0.2),
    CmkdRollout(reply("B", broken=True), -0.1),
    CmkdRollout(reply("B"), -0.9),
    CmkdRollout(reply("A"), -0.3),
    CmkdRollout(reply("B"), -0.4),
]
pick = cmkd_select(rollouts, TYPED)
print("pseudo-label", pick.pseudo_label, "from rollout", pick.rollout_index)

# a policy that is right 70% of the time on every example
layout = FeatureLayout(8, 4)
params = PolicyParameters.zeros(layout)
c = math.log(0.7 / 0.3)
params.heads["answer"][layout.text.start] = [c / 2, -c / 2]
params.heads["format"][layout.bucket, 0] = 50.0
corpus = synth_corpus(CorpusSpec(20_000, 8, label_weights=(1,) + (0,) * 7, textual=True, seed=1))

print(" k   accuracy")
for k in (1, 3, 5, 9, 16):
    acc = evaluate(params, corpus, StageFormat.THINK_ANSWER, Channel.TEXT_ONLY, k=k).overall_accuracy
    print(f"{k:2d}   {acc:.3f}")
