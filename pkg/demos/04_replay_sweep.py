"""
How much text to replay during the caption stage
================================================

The caption stage is retrained from one shared stage-1 checkpoint at several
new:replay ratios. Text accuracy measures how much of the stage-1 skill
survives. The synthetic caption data follows a slightly different rule than
the text data, so training on captions alone erodes it.
"""

from msrl.harness import ratio_sweep, report_render
from msrl.presets import default_corpora, default_plan

corpora = default_corpora(seed=0)
rows = ratio_sweep(
    default_plan(),
    [(1, 0), (1, 1), (2, 1), (4, 1), (5, 1)],
    corpora["mm_heldout"],
    corpora["text_probe"],
    seed=0,
    corpora=corpora,
)
table, doc = report_render(rows)
print(table)
