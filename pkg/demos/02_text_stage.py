"""
Learning from verifiable rewards on text
========================================

The policy starts at chance and is trained with group-relative policy
optimization on textual preference pairs only. Visual parameters are frozen.
"""

from dataclasses import replace

from msrl.corpus import CorpusSpec, synth_corpus
from msrl.curriculum import StagePlan, run_plan
from msrl.presets import default_plan

data = synth_corpus(CorpusSpec(1500, 8, textual=True, seed=0))
train, heldout = data[:1000], data[1000:]

# keep only the RL part of stage 1 and let it report held-out accuracy
plan = default_plan(only_stage1=True)
rl = [replace(s, heldout_ref="heldout", eval_every=25) for s in plan.stages if s.phase == "rlvr"]

params, logs = run_plan(StagePlan(rl, plan.layout), None, seed=0, corpora={"text_train": train, "heldout": heldout})

print("step  reward  format  accuracy  held-out")
for rec in logs[0].records:
    if "heldout_acc" in rec:
        print(f"{rec['step'] + 1:4d}  {rec['mean_reward']:6.3f}  {rec['mean_format']:6.3f}"
              f"  {rec['mean_accuracy']:8.3f}  {rec['heldout_acc']:8.3f}")
