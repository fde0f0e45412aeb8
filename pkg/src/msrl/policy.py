"""Toy generative reward policy.

Four independent softmax heads read a shared feature vector and decide the
answer letter, the declared task, whether the reply is well formed, and
whether the caption section reproduces the input faithfully. The decisions
are rendered into reply text by :mod:`msrl.grammar`, so every reward is
computed from text exactly as for a language model, while log-probabilities,
gradients and KL divergences stay closed-form.

Feature layout (``D = 2 * bits + 4 + buckets``)::

    [ visual bits | text bits | task one-hot | prompt bucket one-hot ]

Visual input writes the first block, caption and plain-text input the second.
"""

from __future__ import annotations

import enum
import functools
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import (
    TASKS,
    MediaKind,
    PreferenceExample,
    TaskKind,
    caption_bits,
    content_rows,
    corrupt_caption,
    prompt_bucket,
    render_caption,
    signed_block,
)
from .grammar import StageFormat, filler_rationale, render_rationale

CHECKPOINT_VERSION = 1

HEADS = ("answer", "task", "format", "caption")
HEAD_SIZES = {"answer": 2, "task": 4, "format": 2, "caption": 2}
ANSWERS = ("A", "B")


class Channel(enum.Enum):
    VISUAL = "visual"
    CAPTION = "caption"
    TEXT_ONLY = "text_only"


def active_heads(stage: StageFormat) -> tuple[str, ...]:
    if stage is StageFormat.TYPED_THINK_ANSWER:
        return HEADS
    return ("answer", "format")


@dataclass(frozen=True)
class FeatureLayout:
    bits: int = 8
    buckets: int = 4

    @property
    def dim(self) -> int:
        return 2 * self.bits + len(TASKS) + self.buckets

    @property
    def visual(self) -> slice:
        return slice(0, self.bits)

    @property
    def text(self) -> slice:
        return slice(self.bits, 2 * self.bits)

    @property
    def task(self) -> slice:
        return slice(2 * self.bits, 2 * self.bits + len(TASKS))

    @property
    def bucket(self) -> slice:
        return slice(2 * self.bits + len(TASKS), self.dim)


@dataclass(frozen=True)
class FeatureVector:
    vector: np.ndarray
    bit_rows: tuple[str, ...]
    channel: Channel

    @property
    def bit_block(self) -> np.ndarray:
        return signed_block(self.bit_rows)


def _channel_rows(example: PreferenceExample, channel: Channel) -> list[str]:
    if channel is Channel.TEXT_ONLY:
        if not example.is_textual:
            raise ValueError(f"example {example.id!r}: text-only channel needs a textual example")
        return content_rows(example)
    if example.is_textual:
        raise ValueError(f"example {example.id!r}: textual example has no {channel.value} input")
    if channel is Channel.VISUAL:
        if any(m.kind is MediaKind.NONE for m in example.media):
            raise ValueError(f"example {example.id!r}: visual channel needs media, found captions")
        return [m.feature_bits for m in example.media]
    captions = [m.caption for m in example.media]
    if any(c is None for c in captions):
        if example.gold_caption is None:
            raise ValueError(f"example {example.id!r}: caption channel needs captions")
        lines = example.gold_caption.split("\n") if len(example.media) > 1 else [example.gold_caption]
        captions = [c if c is not None else g for c, g in zip(captions, lines)]
    return [caption_bits(c) for c in captions]


def featurize(
    example: PreferenceExample, channel: Channel, layout: FeatureLayout = FeatureLayout()
) -> FeatureVector:
    rows = _channel_rows(example, channel)
    if any(len(r) != layout.bits for r in rows):
        raise ValueError(f"example {example.id!r}: expected {layout.bits} bits per row")
    x = np.zeros(layout.dim)
    block = signed_block(rows)
    x[layout.visual if channel is Channel.VISUAL else layout.text] = block
    if example.task is not None:
        x[layout.task.start + TASKS.index(example.task)] = 1.0
    x[layout.bucket.start + prompt_bucket(example.prompt, layout.buckets)] = 1.0
    return FeatureVector(x, tuple(rows), channel)


def feature_matrix(
    examples: Sequence[PreferenceExample], channel: Channel, layout: FeatureLayout
) -> np.ndarray:
    return np.stack([featurize(ex, channel, layout).vector for ex in examples])


# -- parameters -------------------------------------------------------------


@dataclass(frozen=True)
class PolicyParameters:
    """Head weight matrices (``D x k``) with a matching freeze mask.

    Treated as a value: updates build new instances. ``True`` in the mask
    means the entry is not updated.
    """

    layout: FeatureLayout
    heads: dict[str, np.ndarray]
    frozen: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for h in HEADS:
            w = self.heads[h]
            if w.shape != (self.layout.dim, HEAD_SIZES[h]):
                raise ValueError(f"head {h!r} has shape {w.shape}")
            if not np.all(np.isfinite(w)):
                raise ValueError(f"head {h!r} has non-finite entries")
            if h not in self.frozen:
                self.frozen[h] = np.zeros(w.shape, dtype=bool)
            elif self.frozen[h].shape != w.shape:
                raise ValueError(f"freeze mask of head {h!r} has shape {self.frozen[h].shape}")

    @classmethod
    def zeros(cls, layout: FeatureLayout = FeatureLayout()) -> "PolicyParameters":
        return cls(layout, {h: np.zeros((layout.dim, HEAD_SIZES[h])) for h in HEADS})

    @classmethod
    def random(cls, layout: FeatureLayout, scale: float, rng: np.random.Generator) -> "PolicyParameters":
        return cls(layout, {h: scale * rng.standard_normal((layout.dim, HEAD_SIZES[h])) for h in HEADS})

    def copy(self) -> "PolicyParameters":
        return PolicyParameters(
            self.layout,
            {h: w.copy() for h, w in self.heads.items()},
            {h: m.copy() for h, m in self.frozen.items()},
        )

    def snapshot(self) -> "PolicyParameters":
        """Read-only copy used as the old policy."""
        snap = self.copy()
        for w in snap.heads.values():
            w.flags.writeable = False
        return snap

    def with_frozen(self, frozen: dict[str, np.ndarray]) -> "PolicyParameters":
        return PolicyParameters(
            self.layout, {h: w.copy() for h, w in self.heads.items()}, {h: m.copy() for h, m in frozen.items()}
        )

    def apply_update(self, step: dict[str, np.ndarray]) -> "PolicyParameters":
        """Add ``step`` to every trainable entry; frozen entries are kept bit-for-bit."""
        new = {}
        for h in HEADS:
            w = self.heads[h]
            new[h] = np.where(self.frozen[h] | (step[h] == 0), w, w + step[h])
        return PolicyParameters(self.layout, new, {h: m.copy() for h, m in self.frozen.items()})

    def equal(self, other: "PolicyParameters") -> bool:
        """Bit-identical heads and masks."""
        return all(
            self.heads[h].tobytes() == other.heads[h].tobytes()
            and np.array_equal(self.frozen[h], other.frozen[h])
            for h in HEADS
        )


PolicySnapshot = PolicyParameters


def zeros_like(params: PolicyParameters) -> dict[str, np.ndarray]:
    return {h: np.zeros_like(params.heads[h]) for h in HEADS}


def save_checkpoint(params: PolicyParameters, path: str | Path) -> None:
    doc = {
        "version": CHECKPOINT_VERSION,
        "feature_bits": params.layout.bits,
        "prompt_buckets": params.layout.buckets,
        "dim": params.layout.dim,
        "heads": {h: params.heads[h].tolist() for h in HEADS},
        "frozen": {h: params.frozen[h].astype(int).tolist() for h in HEADS},
    }
    Path(path).write_text(json.dumps(doc) + "\n", encoding="utf-8")


def load_checkpoint(path: str | Path) -> PolicyParameters:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')!r}")
    layout = FeatureLayout(doc["feature_bits"], doc["prompt_buckets"])
    if layout.dim != doc["dim"]:
        raise ValueError(f"{path}: dimension mismatch")
    heads = {h: np.array(doc["heads"][h], dtype=float).reshape(layout.dim, HEAD_SIZES[h]) for h in HEADS}
    frozen = {h: np.array(doc["frozen"][h], dtype=bool).reshape(layout.dim, HEAD_SIZES[h]) for h in HEADS}
    return PolicyParameters(layout, heads, frozen)


# -- actions ----------------------------------------------------------------


@dataclass(frozen=True)
class StructuredAction:
    answer: str
    task_tag: TaskKind | None = None
    well_formed: bool = True
    caption_faithful: bool | None = None

    def indices(self) -> dict[str, int]:
        return {
            "answer": ANSWERS.index(self.answer),
            "task": TASKS.index(self.task_tag) if self.task_tag is not None else -1,
            "format": 0 if self.well_formed else 1,
            "caption": -1 if self.caption_faithful is None else (0 if self.caption_faithful else 1),
        }

    @classmethod
    def from_indices(cls, idx: dict[str, int], stage: StageFormat) -> "StructuredAction":
        typed = stage is StageFormat.TYPED_THINK_ANSWER
        return cls(
            answer=ANSWERS[int(idx["answer"])],
            task_tag=TASKS[int(idx["task"])] if typed else None,
            well_formed=int(idx["format"]) == 0,
            caption_faithful=(int(idx["caption"]) == 0) if typed else None,
        )


def enumerate_actions(stage: StageFormat) -> list[StructuredAction]:
    """Every action of a stage: 32 for the typed format, 4 for the plain one."""
    if stage is StageFormat.TYPED_THINK_ANSWER:
        return [
            StructuredAction(a, t, wf, cf)
            for a, t, wf, cf in itertools.product(ANSWERS, TASKS, (True, False), (True, False))
        ]
    return [StructuredAction(a, None, wf) for a, wf in itertools.product(ANSWERS, (True, False))]


def caption_for(rows: Sequence[str], task: TaskKind | None, faithful: bool) -> str:
    kind = task.media_kind if task is not None else MediaKind.NONE
    lines = [render_caption(r, kind) for r in rows]
    if not faithful:
        lines[0] = corrupt_caption(lines[0])
    return "\n".join(lines)


@functools.lru_cache(maxsize=65536)
def _render(action: StructuredAction, caption: str | None) -> str:
    text = render_rationale(filler_rationale(action.answer, action.task_tag, caption))
    return text if action.well_formed else text.replace("</think>", "", 1)


def render_action(action: StructuredAction, rows: Sequence[str], input_task: TaskKind | None) -> str:
    """Reply text for an action. ``rows`` are the bits the policy saw.

    The caption section describes the input media (rendered with the input's
    media kind), independent of the task the policy declares.
    """
    caption = None
    if action.task_tag is not None:
        caption = caption_for(rows, input_task, bool(action.caption_faithful))
    return _render(action, caption)


# -- vectorized head math ---------------------------------------------------


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def head_log_probs(params: PolicyParameters, F: np.ndarray) -> dict[str, np.ndarray]:
    F = np.atleast_2d(F)
    return {h: _log_softmax(F @ params.heads[h]) for h in HEADS}


def action_array(actions: Iterable[StructuredAction]) -> dict[str, np.ndarray]:
    rows = [a.indices() for a in actions]
    return {h: np.array([r[h] for r in rows], dtype=int) for h in HEADS}


def batch_logprob(
    params: PolicyParameters,
    F: np.ndarray,
    actions: dict[str, np.ndarray],
    active: dict[str, np.ndarray],
) -> np.ndarray:
    """Per-row log-probability of ``actions``; ``active[h]`` masks heads per row."""
    lp = head_log_probs(params, F)
    n = lp["answer"].shape[0]
    total = np.zeros(n)
    for h in HEADS:
        idx = np.clip(actions[h], 0, None)
        total += np.where(active[h], lp[h][np.arange(n), idx], 0.0)
    return total


def batch_grad(
    params: PolicyParameters,
    F: np.ndarray,
    actions: dict[str, np.ndarray],
    active: dict[str, np.ndarray],
    weights: np.ndarray,
) -> dict[str, np.ndarray]:
    """``sum_i weights[i] * grad log pi(action_i | x_i)``; zero at frozen entries."""
    F = np.atleast_2d(F)
    n = F.shape[0]
    out = {}
    for h in HEADS:
        p = np.exp(_log_softmax(F @ params.heads[h]))
        onehot = np.zeros_like(p)
        idx = np.clip(actions[h], 0, None)
        onehot[np.arange(n), idx] = 1.0
        coef = (weights * active[h])[:, None] * (onehot - p)
        out[h] = np.where(params.frozen[h], 0.0, F.T @ coef)
    return out


def head_kl(params: PolicyParameters, ref: PolicyParameters, F: np.ndarray) -> dict[str, np.ndarray]:
    lp, lq = head_log_probs(params, F), head_log_probs(ref, F)
    return {h: np.sum(np.exp(lp[h]) * (lp[h] - lq[h]), axis=1) for h in HEADS}


def batch_kl_grad(
    params: PolicyParameters,
    ref: PolicyParameters,
    F: np.ndarray,
    active: dict[str, np.ndarray],
    weights: np.ndarray,
) -> dict[str, np.ndarray]:
    """Gradient of ``sum_i weights[i] * KL(params || ref)`` at row ``i``."""
    F = np.atleast_2d(F)
    lp, lq = head_log_probs(params, F), head_log_probs(ref, F)
    out = {}
    for h in HEADS:
        p = np.exp(lp[h])
        diff = lp[h] - lq[h]
        kl = np.sum(p * diff, axis=1, keepdims=True)
        coef = (weights * active[h])[:, None] * p * (diff - kl)
        out[h] = np.where(params.frozen[h], 0.0, F.T @ coef)
    return out


def stage_active(stage: StageFormat, n: int) -> dict[str, np.ndarray]:
    on = set(active_heads(stage))
    return {h: np.full(n, h in on) for h in HEADS}


def sample_indices(
    params: PolicyParameters, F: np.ndarray, rng: np.random.Generator
) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Draw one index per head per row by inverse-CDF sampling.

    Returns the indices and the per-head log-probabilities used.
    """
    lp = head_log_probs(params, F)
    n = lp["answer"].shape[0]
    u = rng.random((n, len(HEADS)))
    idx = {}
    for j, h in enumerate(HEADS):
        cdf = np.cumsum(np.exp(lp[h]), axis=1)
        idx[h] = np.minimum((cdf < u[:, j : j + 1]).sum(axis=1), HEAD_SIZES[h] - 1)
    return idx, lp


# -- single-example API -----------------------------------------------------


def sample_action(
    params: PolicyParameters,
    example: PreferenceExample,
    stage: StageFormat,
    channel: Channel,
    seed: int | np.random.Generator,
) -> tuple[StructuredAction, str, float]:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    fv = featurize(example, channel, params.layout)
    idx, _ = sample_indices(params, fv.vector[None, :], rng)
    action = StructuredAction.from_indices({h: idx[h][0] for h in HEADS}, stage)
    text = render_action(action, fv.bit_rows, example.task)
    return action, text, action_logprob(params, example, action, stage, channel)


def action_logprob(
    params: PolicyParameters,
    example: PreferenceExample,
    action: StructuredAction,
    stage: StageFormat,
    channel: Channel,
) -> float:
    _check_action(action, stage)
    F = featurize(example, channel, params.layout).vector[None, :]
    return float(batch_logprob(params, F, action_array([action]), stage_active(stage, 1))[0])


def grad_logprob(
    params: PolicyParameters,
    example: PreferenceExample,
    action: StructuredAction,
    stage: StageFormat,
    channel: Channel,
) -> dict[str, np.ndarray]:
    _check_action(action, stage)
    F = featurize(example, channel, params.layout).vector[None, :]
    return batch_grad(params, F, action_array([action]), stage_active(stage, 1), np.ones(1))


def kl_divergence(
    params: PolicyParameters,
    snapshot: PolicyParameters,
    example: PreferenceExample,
    stage: StageFormat,
    channel: Channel,
) -> float:
    if params.layout != snapshot.layout:
        raise ValueError("parameter layouts differ")
    F = featurize(example, channel, params.layout).vector[None, :]
    kl = head_kl(params, snapshot, F)
    return float(sum(kl[h][0] for h in active_heads(stage)))


def _check_action(action: StructuredAction, stage: StageFormat) -> None:
    typed = stage is StageFormat.TYPED_THINK_ANSWER
    if action.answer not in ANSWERS:
        raise ValueError(f"bad answer {action.answer!r}")
    if typed and (action.task_tag is None or action.caption_faithful is None):
        raise ValueError("typed-format action needs a task tag and a caption decision")
