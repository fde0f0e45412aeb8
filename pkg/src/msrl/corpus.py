"""Preference data model, synthetic corpora, JSONL I/O, caption substitution
and experience replay.

Media content is a bit-vector with a deterministic caption rendering. The
caption carries exactly the information of the bits, so a policy can read the
same semantics through either surface.
"""

from __future__ import annotations

import enum
import json
import math
import re
import zlib
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np


class CorpusError(ValueError):
    """Invalid corpus spec, record, or transform input."""


class TaskKind(enum.Enum):
    IMAGE_UNDERSTANDING = "image_understanding"
    IMAGE_GENERATION = "image_generation"
    VIDEO_UNDERSTANDING = "video_understanding"
    VIDEO_GENERATION = "video_generation"

    @property
    def display_name(self) -> str:
        """Lower-case prose name used in prompts and ``<type>`` tags."""
        return self.value.replace("_", " ")

    @property
    def is_generation(self) -> bool:
        return self in (TaskKind.IMAGE_GENERATION, TaskKind.VIDEO_GENERATION)

    @property
    def media_kind(self) -> "MediaKind":
        if self in (TaskKind.IMAGE_UNDERSTANDING, TaskKind.IMAGE_GENERATION):
            return MediaKind.IMAGE
        return MediaKind.VIDEO

    @classmethod
    def from_name(cls, name: str) -> "TaskKind":
        """Accept ``image_understanding`` or ``Image Understanding`` style names."""
        key = " ".join(name.strip().replace("_", " ").split()).casefold()
        for task in cls:
            if task.display_name == key:
                return task
        raise CorpusError(f"unknown task kind {name!r}")


TASKS: tuple[TaskKind, ...] = tuple(TaskKind)


class MediaKind(enum.Enum):
    IMAGE = "image"
    VIDEO = "video"
    NONE = "none"


LABELS = ("A", "B")


@dataclass(frozen=True)
class MediaDescriptor:
    kind: MediaKind
    feature_bits: str
    caption: str | None = None

    def __post_init__(self) -> None:
        if not self.feature_bits or set(self.feature_bits) - {"0", "1"}:
            raise CorpusError(f"feature_bits must be a non-empty 0/1 string, got {self.feature_bits!r}")
        if self.kind is MediaKind.NONE and self.caption is None:
            raise CorpusError("media of kind 'none' must carry a caption")

    def bits(self) -> np.ndarray:
        return np.frombuffer(self.feature_bits.encode("ascii"), dtype=np.uint8) - ord("0")


@dataclass(frozen=True)
class PreferenceExample:
    """One labeled comparison.

    ``task`` is ``None`` for purely textual preference data (no media); such
    examples carry their content bits inside the prompt text.
    """

    id: str
    task: TaskKind | None
    prompt: str
    media: tuple[MediaDescriptor, ...]
    response_a: str | None
    response_b: str | None
    label: str
    gold_caption: str | None = None
    source_rationale: str | None = None

    def __post_init__(self) -> None:
        validate_example(self)

    @property
    def is_textual(self) -> bool:
        return self.task is None


def validate_example(ex: PreferenceExample) -> None:
    def fail(field_name: str, why: str) -> None:
        raise CorpusError(f"example {ex.id!r}: field {field_name!r}: {why}")

    if not isinstance(ex.id, str) or not ex.id:
        fail("id", "must be a non-empty string")
    if ex.label not in LABELS:
        fail("label", f"must be 'A' or 'B', got {ex.label!r}")
    if ex.task is None:
        if ex.media:
            fail("media", "textual examples carry no media")
        if ex.response_a is None or ex.response_b is None:
            fail("response_a", "textual examples need two responses")
        return
    if ex.task.is_generation:
        if len(ex.media) != 2:
            fail("media", "generation tasks carry exactly two media descriptors")
        if ex.response_a is not None or ex.response_b is not None:
            fail("response_a", "generation tasks carry no textual responses")
    else:
        if len(ex.media) != 1:
            fail("media", "understanding tasks carry exactly one media descriptor")
        if ex.response_a is None or ex.response_b is None:
            fail("response_a", "understanding tasks need two responses")
    widths = {len(m.feature_bits) for m in ex.media}
    if len(widths) != 1:
        fail("media", "all media descriptors must share one feature dimension")
    for m in ex.media:
        if m.kind not in (ex.task.media_kind, MediaKind.NONE):
            fail("media", f"kind {m.kind.value!r} does not match task {ex.task.value!r}")


# -- captions ---------------------------------------------------------------

_ATTRIBUTES = (
    ("dark", "bright"),
    ("still", "moving"),
    ("indoor", "outdoor"),
    ("single", "crowded"),
    ("blurry", "sharp"),
    ("muted", "colorful"),
    ("empty", "detailed"),
    ("calm", "dramatic"),
)
_BITS_RE = re.compile(r"bits:\s*([01]+)")


_NOUNS = {MediaKind.IMAGE: "image", MediaKind.VIDEO: "video", MediaKind.NONE: "scene"}


def render_caption(bits: str, media: MediaKind = MediaKind.IMAGE) -> str:
    """Deterministic caption text for a bit string."""
    noun = _NOUNS[media]
    words = [_ATTRIBUTES[i % len(_ATTRIBUTES)][int(b)] for i, b in enumerate(bits)]
    article = "An" if noun[0] in "aeiou" else "A"
    return f"bits: {bits}. {article} {noun} that is " + ", ".join(words) + "."


def caption_bits(text: str) -> str:
    """Recover the bit string from a caption rendering."""
    m = _BITS_RE.search(text)
    if m is None:
        raise CorpusError(f"caption carries no bit field: {text[:60]!r}")
    return m.group(1)


def corrupt_caption(caption: str, n_flips: int = 1) -> str:
    """Flip the first ``n_flips`` bits of a caption and re-render it."""
    bits = caption_bits(caption)
    flipped = "".join(
        ("1" if b == "0" else "0") if i < n_flips else b for i, b in enumerate(bits)
    )
    noun = re.search(r"\. An? (\w+) that is", caption)
    kind = next((k for k, v in _NOUNS.items() if noun and v == noun.group(1)), MediaKind.IMAGE)
    return render_caption(flipped, kind)


def content_rows(ex: PreferenceExample) -> list[str]:
    """Bit strings carried by an example: one per media item, or the prompt's."""
    if ex.is_textual:
        return [caption_bits(ex.prompt)]
    return [m.feature_bits for m in ex.media]


def signed_block(rows: Sequence[str]) -> np.ndarray:
    """Real-valued content block the label rule is linear in.

    A single bit row maps to +-1 per bit; two rows (generation candidates)
    give the difference of their bits.
    """
    arrs = [np.array([int(c) for c in r], dtype=float) for r in rows]
    return arrs[0] - arrs[1] if len(arrs) == 2 else 2.0 * arrs[0] - 1.0


# -- synthesis --------------------------------------------------------------


@dataclass(frozen=True)
class CorpusSpec:
    n_examples: int
    feature_dim: int = 8
    task_mix: dict[TaskKind, float] = field(
        default_factory=lambda: {t: 0.25 for t in TaskKind}
    )
    label_rule: str = "linear_threshold"
    label_weights: tuple[float, ...] | None = None
    noise_rate: float = 0.0
    seed: int = 0
    textual: bool = False
    id_prefix: str = "ex"
    with_rationales: bool = False

    def __post_init__(self) -> None:
        mix = {k if isinstance(k, TaskKind) else TaskKind.from_name(k): float(v) for k, v in self.task_mix.items()}
        object.__setattr__(self, "task_mix", mix)

    def validate(self) -> None:
        if self.n_examples < 1:
            raise CorpusError("field 'n_examples': must be >= 1")
        if self.feature_dim < 1:
            raise CorpusError("field 'feature_dim': must be >= 1")
        if not self.textual:
            if not self.task_mix or any(p < 0 for p in self.task_mix.values()):
                raise CorpusError("field 'task_mix': proportions must be non-negative")
            if abs(sum(self.task_mix.values()) - 1.0) > 1e-12:
                raise CorpusError("field 'task_mix': proportions must sum to 1")
        if self.label_rule != "linear_threshold":
            raise CorpusError(f"field 'label_rule': unknown rule {self.label_rule!r}")
        if self.label_weights is not None and len(self.label_weights) != self.feature_dim:
            raise CorpusError("field 'label_weights': length must equal feature_dim")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise CorpusError("field 'noise_rate': must lie in [0, 1]")
        if not 0 <= self.seed < 2**64:
            raise CorpusError("field 'seed': must be a 64-bit unsigned integer")

    def weights(self) -> np.ndarray:
        """Label-rule weights; drawn from the seed when not given."""
        if self.label_weights is not None:
            return np.asarray(self.label_weights, dtype=float)
        rng = np.random.default_rng([self.seed, 0x5EED])
        return rng.standard_normal(self.feature_dim)

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusSpec":
        d = dict(d)
        if d.get("label_weights") is not None:
            d["label_weights"] = tuple(float(w) for w in d["label_weights"])
        return cls(**d)


def apply_label_rule(block: np.ndarray, weights: np.ndarray) -> str:
    return "A" if float(block @ weights) > 0 else "B"


def _task_counts(n: int, mix: dict[TaskKind, float]) -> dict[TaskKind, int]:
    # largest-remainder apportionment: every count within 1 of n * p
    exact = {t: n * p for t, p in mix.items()}
    counts = {t: math.floor(v) for t, v in exact.items()}
    short = n - sum(counts.values())
    for t in sorted(exact, key=lambda t: (counts[t] - exact[t], TASKS.index(t)))[:short]:
        counts[t] += 1
    return counts


def synth_corpus(spec: CorpusSpec) -> list[PreferenceExample]:
    """Generate a labeled corpus whose ground truth is known by construction."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    w = spec.weights()
    d = spec.feature_dim

    if spec.textual:
        tasks: list[TaskKind | None] = [None] * spec.n_examples
    else:
        counts = _task_counts(spec.n_examples, spec.task_mix)
        tasks = [t for t in TASKS for _ in range(counts.get(t, 0))]
        tasks = [tasks[i] for i in rng.permutation(len(tasks))]

    out = []
    for i, task in enumerate(tasks):
        ex_id = f"{spec.id_prefix}-{i:06d}"
        n_media = 2 if task is not None and task.is_generation else 1
        while True:
            rows = ["".join(map(str, rng.integers(0, 2, d))) for _ in range(n_media)]
            block = signed_block(rows)
            if float(block @ w) != 0.0:
                break
        label = apply_label_rule(block, w)
        if rng.random() < spec.noise_rate:
            label = "B" if label == "A" else "A"
        out.append(_build_example(ex_id, i, task, rows, label, spec.with_rationales))
    return out


def _build_example(
    ex_id: str,
    i: int,
    task: TaskKind | None,
    rows: list[str],
    label: str,
    with_rationale: bool,
) -> PreferenceExample:
    rationale = None
    if task is None:
        caption = render_caption(rows[0], MediaKind.NONE)
        prompt = f"Question {i}: which answer best describes the scene? Scene {caption}"
        media: tuple[MediaDescriptor, ...] = ()
        resp_a, resp_b = f"Answer one for question {i}.", f"Answer two for question {i}."
        gold = None
        if with_rationale:
            from . import grammar  # local import: grammar depends on corpus

            rationale = grammar.render_rationale(grammar.filler_rationale(label, None, None))
    else:
        kind = task.media_kind
        captions = [render_caption(r, kind) for r in rows]
        media = tuple(MediaDescriptor(kind, r) for r in rows)
        gold = "\n".join(captions)
        if task.is_generation:
            prompt = f"Prompt {i}: generate {'an' if kind is MediaKind.IMAGE else 'a'} {kind.value} of the described scene."
            resp_a = resp_b = None
        else:
            prompt = f"Question {i}: what is happening in this {kind.value}?"
            resp_a, resp_b = f"Response one for question {i}.", f"Response two for question {i}."
    return PreferenceExample(ex_id, task, prompt, media, resp_a, resp_b, label, gold, rationale)


# -- JSONL ------------------------------------------------------------------


def example_to_dict(ex: PreferenceExample) -> dict:
    return {
        "id": ex.id,
        "task": ex.task.value if ex.task is not None else None,
        "prompt": ex.prompt,
        "media": [
            {"kind": m.kind.value, "feature_bits": m.feature_bits, "caption": m.caption}
            for m in ex.media
        ],
        "response_a": ex.response_a,
        "response_b": ex.response_b,
        "label": ex.label,
        "gold_caption": ex.gold_caption,
        "source_rationale": ex.source_rationale,
    }


def example_from_dict(d: dict) -> PreferenceExample:
    ex_id = d.get("id", "<missing id>")
    try:
        task = TaskKind(d["task"]) if d.get("task") is not None else None
        media = tuple(
            MediaDescriptor(MediaKind(m["kind"]), m["feature_bits"], m.get("caption"))
            for m in d.get("media", [])
        )
        return PreferenceExample(
            id=d["id"],
            task=task,
            prompt=d["prompt"],
            media=media,
            response_a=d.get("response_a"),
            response_b=d.get("response_b"),
            label=d["label"],
            gold_caption=d.get("gold_caption"),
            source_rationale=d.get("source_rationale"),
        )
    except KeyError as e:
        raise CorpusError(f"example {ex_id!r}: missing field {e.args[0]!r}") from None
    except CorpusError as e:
        if str(e).startswith("example "):
            raise
        raise CorpusError(f"example {ex_id!r}: {e}") from None
    except ValueError as e:
        raise CorpusError(f"example {ex_id!r}: {e}") from None


def dumps_example(ex: PreferenceExample) -> str:
    return json.dumps(example_to_dict(ex), ensure_ascii=False, separators=(",", ":"))


def save_corpus(examples: Iterable[PreferenceExample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for ex in examples:
            f.write(dumps_example(ex) + "\n")


def load_corpus(path: str | Path) -> list[PreferenceExample]:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusError(f"{path}:{lineno}: malformed JSON: {e.msg}") from None
            if not isinstance(record, dict):
                raise CorpusError(f"{path}:{lineno}: expected a JSON object")
            try:
                out.append(example_from_dict(record))
            except CorpusError as e:
                raise CorpusError(f"{path}:{lineno}: {e}") from None
    return out


# -- caption substitution ---------------------------------------------------


def to_caption_based(ex: PreferenceExample) -> PreferenceExample:
    """Replace every media item by its gold caption.

    ``gold_caption`` holds one line per media item for two-media examples.
    Media that already carry a caption keep it, which makes the transform
    idempotent.
    """
    if ex.is_textual:
        raise CorpusError(f"example {ex.id!r}: textual examples have no media to caption")
    if all(m.kind is MediaKind.NONE for m in ex.media):
        return ex
    if ex.gold_caption is None:
        raise CorpusError(f"example {ex.id!r}: field 'gold_caption' is missing")
    parts = [ex.gold_caption] if len(ex.media) == 1 else ex.gold_caption.split("\n")
    if len(parts) != len(ex.media):
        raise CorpusError(
            f"example {ex.id!r}: field 'gold_caption' has {len(parts)} lines for {len(ex.media)} media"
        )
    media = tuple(
        replace(m, kind=MediaKind.NONE, caption=m.caption if m.kind is MediaKind.NONE else c)
        for m, c in zip(ex.media, parts)
    )
    return replace(ex, media=media)


# -- experience replay ------------------------------------------------------


@dataclass
class ReplayBuffer:
    """FIFO buffer of earlier-stage examples.

    ``threshold`` of ``None`` admits everything; otherwise only items whose
    reported reward reaches it.
    """

    capacity: int
    threshold: float | None = None
    items: deque = field(default_factory=deque)

    def __post_init__(self) -> None:
        if self.capacity < 1:
            raise CorpusError("replay capacity must be >= 1")
        self.items = deque(self.items, maxlen=self.capacity)

    def admit(self, example: PreferenceExample, reward: float | None = None) -> bool:
        if self.threshold is not None and (reward is None or reward < self.threshold):
            return False
        self.items.append(example)
        return True

    def __len__(self) -> int:
        return len(self.items)


def replay_mix(
    new_items: Iterable[PreferenceExample],
    buffer: ReplayBuffer | Sequence[PreferenceExample],
    ratio_new_to_replay: tuple[int, int],
    batch_size: int,
    seed: int,
) -> Iterator[list[PreferenceExample]]:
    """Yield batches of exactly ``batch_size`` items at a fixed new:replay ratio.

    New items keep their stream order and fill the front of each batch;
    replay items are drawn without replacement within a batch. With a 1:0
    ratio the stream passes through unchanged, including a trailing partial
    batch; otherwise a trailing partial batch is dropped.
    """
    n_new, n_rep = ratio_new_to_replay
    if n_new < 0 or n_rep < 0 or n_new + n_rep == 0:
        raise CorpusError(f"invalid replay ratio {n_new}:{n_rep}")
    if batch_size < 1:
        raise CorpusError("batch_size must be >= 1")
    if n_rep > 0 and batch_size % (n_new + n_rep):
        raise CorpusError(f"batch_size {batch_size} not divisible by {n_new + n_rep}")
    pool = list(buffer.items if isinstance(buffer, ReplayBuffer) else buffer)
    per_new = batch_size * n_new // (n_new + n_rep)
    per_rep = batch_size - per_new
    if per_rep and not pool:
        raise CorpusError("replay buffer is empty but the ratio requests replay items")
    if per_rep > len(pool):
        raise CorpusError(f"replay buffer holds {len(pool)} items, batch needs {per_rep}")
    rng = np.random.default_rng(seed)

    if per_new == 0:
        while True:
            yield [pool[j] for j in rng.choice(len(pool), per_rep, replace=False)]

    chunk: list[PreferenceExample] = []
    for item in new_items:
        chunk.append(item)
        if len(chunk) == per_new:
            replayed = [pool[j] for j in rng.choice(len(pool), per_rep, replace=False)] if per_rep else []
            yield chunk + replayed
            chunk = []
    if chunk and per_rep == 0:
        yield chunk


def prompt_bucket(prompt: str, n_buckets: int) -> int:
    return zlib.crc32(prompt.encode("utf-8")) % n_buckets
