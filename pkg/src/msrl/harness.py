"""Evaluation with majority voting, the replay-ratio sweep, and report rendering."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .corpus import TASKS, PreferenceExample, to_caption_based
from .grammar import FormatError, StageFormat, extract_task_tag, parse_rationale
from .policy import HEADS, Channel, PolicyParameters, StructuredAction, render_action, sample_indices
from .optimizer import Prompt, prompt_features

TEXT_KEY = "text"
TASK_KEYS = tuple(t.value for t in TASKS) + (TEXT_KEY,)


def majority_vote(answers: Sequence[str | None]) -> str | None:
    """Mode of the non-abstaining answers; ties go to ``A``; all-abstain gives ``None``."""
    n_a = sum(a == "A" for a in answers)
    n_b = sum(a == "B" for a in answers)
    if n_a == n_b == 0:
        return None
    return "A" if n_a >= n_b else "B"


@dataclass
class EvalReport:
    overall_accuracy: float
    per_task: dict[str, float | None]
    n_examples: int
    voting_k: int
    format_rate: float
    task_tag_rate: float | None
    per_task_counts: dict[str, int] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))


def evaluate(
    params: PolicyParameters,
    corpus: Sequence[PreferenceExample],
    stage_format: StageFormat,
    channel: Channel,
    k: int = 1,
    seed: int = 0,
) -> EvalReport:
    """Accuracy of voting@k: k sampled replies per example, mode of the parsed answers.

    Replies that fail to parse abstain; an example where every reply abstains
    counts as wrong.
    """
    if not corpus:
        raise ValueError("cannot evaluate on an empty corpus")
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = np.random.default_rng(seed)
    prompts = [Prompt(ex, channel, stage_format) for ex in corpus]
    F, rows = prompt_features(prompts, params.layout)
    idx, _ = sample_indices(params, np.repeat(F, k, axis=0), rng)

    correct = np.zeros(len(corpus), dtype=bool)
    n_formatted = n_tagged = n_taggable = 0
    for e, ex in enumerate(corpus):
        votes = []
        for j in range(e * k, (e + 1) * k):
            action = StructuredAction.from_indices({h: idx[h][j] for h in HEADS}, stage_format)
            text = render_action(action, rows[e], ex.task)
            parsed = parse_rationale(text, stage_format)
            ok = not isinstance(parsed, FormatError)
            n_formatted += ok
            votes.append(parsed.answer if ok else None)
            if ex.task is not None:
                n_taggable += 1
                n_tagged += extract_task_tag(text) is ex.task
        correct[e] = majority_vote(votes) == ex.label

    keys = [ex.task.value if ex.task is not None else TEXT_KEY for ex in corpus]
    per_task: dict[str, float | None] = {}
    counts: dict[str, int] = {}
    for key in TASK_KEYS:
        mask = np.array([kk == key for kk in keys])
        counts[key] = int(mask.sum())
        per_task[key] = float(correct[mask].mean()) if mask.any() else None
    return EvalReport(
        overall_accuracy=float(correct.mean()),
        per_task=per_task,
        n_examples=len(corpus),
        voting_k=k,
        format_rate=n_formatted / (len(corpus) * k),
        task_tag_rate=n_tagged / n_taggable if n_taggable else None,
        per_task_counts=counts,
    )


# -- replay-ratio sweep -----------------------------------------------------


@dataclass
class SweepRow:
    ratio: tuple[int, int]
    caption_accuracy: float
    text_accuracy: float

    @property
    def label(self) -> str:
        return f"{self.ratio[0]}:{self.ratio[1]}"


def ratio_sweep(
    base_plan,
    ratios: Sequence[tuple[int, int]],
    eval_corpus: Sequence[PreferenceExample],
    text_probe: Sequence[PreferenceExample],
    seed: int = 0,
    corpora: dict | None = None,
    init: PolicyParameters | None = None,
) -> list[SweepRow]:
    """Retrain the caption stage once per new:replay ratio from one shared text-stage checkpoint.

    Each run is scored on captioned held-out data and on held-out textual
    data; the latter measures forgetting of the text-stage skill.
    """
    from .curriculum import StagePlan, run_plan  # curriculum imports this module

    if not ratios:
        raise ValueError("ratios must be non-empty")
    first = StagePlan([s for s in base_plan.stages if s.stage_id == 1], base_plan.layout, base_plan.base_dir)
    second = [s for s in base_plan.stages if s.stage_id == 2 and s.phase == "rlvr"]
    if not second:
        raise ValueError("base plan has no stage-2 RL phase to sweep")
    shared, _ = run_plan(first, init, seed, corpora=corpora)

    captioned = [to_caption_based(ex) for ex in eval_corpus]
    rows = []
    for ratio in ratios:
        stages = [s.with_ratio(ratio) for s in second]
        params, _ = run_plan(StagePlan(stages, base_plan.layout, base_plan.base_dir), shared, seed, corpora=corpora)
        cap = evaluate(params, captioned, StageFormat.TYPED_THINK_ANSWER, Channel.CAPTION, 1, seed)
        txt = evaluate(params, text_probe, StageFormat.THINK_ANSWER, Channel.TEXT_ONLY, 1, seed)
        rows.append(SweepRow(tuple(ratio), cap.overall_accuracy, txt.overall_accuracy))
    return rows


# -- rendering --------------------------------------------------------------

DASH = "–"


def pct(x: float | None) -> str:
    """Accuracy as a percentage with one decimal, or a dash when absent."""
    return DASH if x is None else f"{100 * x:.1f}"


def report_render(obj: EvalReport | Sequence[SweepRow]) -> tuple[str, str]:
    """Aligned text table plus a JSON document for a report or a sweep table."""
    if isinstance(obj, EvalReport):
        header = ["Overall"] + [k.replace("_", " ").title() for k in TASK_KEYS] + ["Format", "Type tag"]
        cells = [pct(obj.overall_accuracy)] + [pct(obj.per_task.get(k)) for k in TASK_KEYS]
        cells += [pct(obj.format_rate), pct(obj.task_tag_rate)]
        title = f"Accuracies (%), voting@{obj.voting_k}, n={obj.n_examples}"
        return title + "\n" + _table([header, cells]), obj.to_json()
    rows = list(obj)
    table = [["Mixing ratio", "Caption acc.", "Text acc."]]
    table += [[r.label, pct(r.caption_accuracy), pct(r.text_accuracy)] for r in rows]
    doc = [{"ratio": list(r.ratio), "caption_accuracy": r.caption_accuracy, "text_accuracy": r.text_accuracy} for r in rows]
    return _table(table), json.dumps(doc)


def sweep_from_json(text: str) -> list[SweepRow]:
    return [SweepRow(tuple(d["ratio"]), d["caption_accuracy"], d["text_accuracy"]) for d in json.loads(text)]


def _table(rows: list[list[str]]) -> str:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)
