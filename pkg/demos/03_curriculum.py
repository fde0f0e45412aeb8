"""
Three stages: text, captions, then media
========================================

Stage 1 learns on text. Stage 2 sees media through their captions, replays
text samples, and distills caption-based judgments into the visual input.
Stage 3 trains on the media directly. The ablation stops after stage 1.
"""

import time

from msrl.corpus import to_caption_based
from msrl.curriculum import run_plan
from msrl.grammar import StageFormat
from msrl.harness import evaluate, report_render
from msrl.policy import Channel
from msrl.presets import default_corpora, default_plan

corpora = default_corpora(seed=0)
heldout = corpora["mm_heldout"]

for name, plan in [("stage 1 only", default_plan(only_stage1=True)), ("all stages", default_plan())]:
    t0 = time.perf_counter()
    params, logs = run_plan(plan, None, seed=0, corpora=corpora)
    print(f"== {name} ({time.perf_counter() - t0:.1f}s)")
    for log in logs:
        for rec in log.records:
            if rec.get("phase") == "cmkd":
                print(f"distilled {rec['distilled']} of {rec['examples']} examples, "
                      f"pseudo-label accuracy {rec['pseudo_label_accuracy']:.3f}")

    vis = evaluate(params, heldout, StageFormat.TYPED_THINK_ANSWER, Channel.VISUAL)
    cap = evaluate(params, [to_caption_based(e) for e in heldout], StageFormat.TYPED_THINK_ANSWER, Channel.CAPTION)
    txt = evaluate(params, corpora["text_probe"], StageFormat.THINK_ANSWER, Channel.TEXT_ONLY)
    print(report_render(vis)[0])
    print(f"caption input {100 * cap.overall_accuracy:.1f}%, text probe {100 * txt.overall_accuracy:.1f}%")
    print()
