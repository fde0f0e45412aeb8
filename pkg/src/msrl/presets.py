"""Ready-made synthetic corpora and a default three-stage plan.

The multimodal label rule ignores a few bits the textual rule relies on, so
text-stage skill transfers only partly to the multimodal data and caption
training erodes it unless textual samples are replayed.
"""

from __future__ import annotations

import numpy as np

from .corpus import CorpusSpec, PreferenceExample, synth_corpus
from .curriculum import CmkdSpec, ReplaySpec, StagePlan, StageSpec
from .grammar import StageFormat
from .optimizer import GrpoConfig
from .policy import Channel, FeatureLayout


def rule_weights(bits: int, seed: int, n_conflicting: int = 2, mode: str = "flip") -> tuple[np.ndarray, np.ndarray]:
    """Text-rule and multimodal-rule weights.

    The multimodal rule flips (``mode="flip"``) or drops (``mode="zero"``) a
    few entries of the text rule.
    """
    rng = np.random.default_rng([seed, 17])
    w_text = rng.standard_normal(bits)
    w_mm = w_text.copy()
    pick = rng.choice(bits, n_conflicting, replace=False)
    w_mm[pick] = -w_mm[pick] if mode == "flip" else 0.0
    return w_text, w_mm


def default_corpora(
    seed: int = 0,
    bits: int = 8,
    n_text: int = 1000,
    n_probe: int = 2000,
    n_stage2: int = 600,
    n_stage3: int = 200,
    n_heldout: int = 500,
    n_conflicting: int = 2,
    mode: str = "zero",
) -> dict[str, list[PreferenceExample]]:
    w_text, w_mm = rule_weights(bits, seed, n_conflicting, mode)

    def text(n: int, s: int, prefix: str, rationales: bool = False) -> list[PreferenceExample]:
        spec = CorpusSpec(n, bits, label_weights=tuple(w_text), seed=s, textual=True,
                          id_prefix=prefix, with_rationales=rationales)
        return synth_corpus(spec)

    def mm(n: int, s: int, prefix: str) -> list[PreferenceExample]:
        return synth_corpus(CorpusSpec(n, bits, label_weights=tuple(w_mm), seed=s, id_prefix=prefix))

    return {
        "text_train": text(n_text, seed * 10 + 1, "text", rationales=True),
        "text_probe": text(n_probe, seed * 10 + 2, "probe"),
        "mm_stage2": mm(n_stage2, seed * 10 + 3, "cap"),
        "mm_stage3": mm(n_stage3, seed * 10 + 4, "mm"),
        "mm_heldout": mm(n_heldout, seed * 10 + 5, "heldout"),
    }


def default_plan(
    bits: int = 8,
    ratio: tuple[int, int] = (4, 1),
    stage1_steps: int = 200,
    stage2_steps: int = 150,
    stage3_steps: int = 100,
    cmkd: bool = True,
    only_stage1: bool = False,
) -> StagePlan:
    typed = StageFormat.TYPED_THINK_ANSWER
    stages = [
        StageSpec(1, "sft", "text_train", Channel.TEXT_ONLY, StageFormat.THINK_ANSWER,
                  use_task_reward=False, freeze_visual=True, steps=5, sft_lr=0.01, sft_batch=32),
        StageSpec(1, "rlvr", "text_train", Channel.TEXT_ONLY, StageFormat.THINK_ANSWER,
                  use_task_reward=False, freeze_visual=True, steps=stage1_steps,
                  optimizer=GrpoConfig(batch_prompts=128)),
    ]
    if not only_stage1:
        stages += [
            StageSpec(2, "rlvr", "mm_stage2", Channel.CAPTION, typed, use_task_reward=True,
                      freeze_visual=False, steps=stage2_steps,
                      optimizer=GrpoConfig(batch_prompts=120),
                      replay=ReplaySpec("text_train", ratio),
                      cmkd=CmkdSpec(n_samples=8) if cmkd else None),
            StageSpec(3, "rlvr", "mm_stage3", Channel.VISUAL, typed, use_task_reward=True,
                      freeze_visual=False, steps=stage3_steps, optimizer=GrpoConfig(batch_prompts=64)),
        ]
    return StagePlan(stages, FeatureLayout(bits, 4))
