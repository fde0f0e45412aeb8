"""Three-stage training: text RL, caption RL with replay and cross-modal
distillation, then multimodal RL.

A :class:`StagePlan` is an ordered list of :class:`StageSpec` entries; several
entries may share a stage id (for example an SFT cold start followed by RL in
stage 1). Plans load from YAML (or JSON) documents.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import yaml

from .corpus import (
    PreferenceExample,
    ReplayBuffer,
    load_corpus,
    replay_mix,
    to_caption_based,
)
from .grammar import FormatError, StageFormat, extract_answer, parse_rationale, Rationale
from .harness import evaluate, majority_vote
from .optimizer import (
    GrpoConfig,
    Prompt,
    StepStats,
    active_matrix,
    generate_groups,
    grpo_step,
    prompt_features,
    sft_step,
)
from .policy import (
    HEADS,
    Channel,
    FeatureLayout,
    PolicyParameters,
    StructuredAction,
    batch_logprob,
    render_action,
    sample_indices,
    save_checkpoint,
)
from .rewards import total_reward


class PlanError(ValueError):
    pass


# -- plan types -------------------------------------------------------------


@dataclass(frozen=True)
class CmkdSpec:
    n_samples: int = 8
    confidence: str = "mean_logprob"  # "mean_logprob" | "sequence_logprob"
    sft_lr: float = 0.05
    sft_epochs: int = 3
    batch_size: int = 32

    def __post_init__(self) -> None:
        if self.n_samples < 1:
            raise PlanError("cmkd n_samples must be >= 1")
        if self.confidence not in ("mean_logprob", "sequence_logprob"):
            raise PlanError(f"unknown confidence {self.confidence!r}")


@dataclass(frozen=True)
class ReplaySpec:
    buffer_source: str
    ratio_new_to_replay: tuple[int, int] = (5, 1)
    capacity: int | None = None
    admission: str = "high_reward"  # "high_reward" | "all"


@dataclass(frozen=True)
class StageSpec:
    stage_id: int
    phase: str  # "sft" | "rlvr"
    corpus_ref: str
    channel: Channel
    stage_format: StageFormat
    use_task_reward: bool
    freeze_visual: bool
    steps: int
    optimizer: GrpoConfig = GrpoConfig()
    sft_lr: float = 0.05
    sft_batch: int = 32
    replay: ReplaySpec | None = None
    cmkd: CmkdSpec | None = None
    heldout_ref: str | None = None
    eval_every: int = 0

    def with_ratio(self, ratio: Sequence[int]) -> "StageSpec":
        """Copy with a different replay ratio (``n:0`` drops replay) and no distillation."""
        ratio = tuple(int(r) for r in ratio)
        rep = None
        if ratio[1] > 0:
            if self.replay is None:
                raise PlanError(f"stage {self.stage_id} has no replay source to mix")
            rep = replace(self.replay, ratio_new_to_replay=ratio)
        return replace(self, replay=rep, cmkd=None)


@dataclass
class StagePlan:
    stages: list[StageSpec]
    layout: FeatureLayout = FeatureLayout()
    base_dir: Path = field(default_factory=Path.cwd)

    def validate(self) -> None:
        if not self.stages:
            raise PlanError("plan has no stages")
        ids = [s.stage_id for s in self.stages]
        if ids != sorted(ids) or not set(ids) <= {1, 2, 3}:
            raise PlanError(f"stage ids must be drawn from 1..3 in order, got {ids}")
        for s in self.stages:
            where = f"stage {s.stage_id} ({s.phase})"
            if s.phase not in ("sft", "rlvr"):
                raise PlanError(f"{where}: unknown phase")
            if s.steps < 0:
                raise PlanError(f"{where}: steps must be >= 0")
            if s.stage_id == 1 and (not s.freeze_visual or s.use_task_reward):
                raise PlanError(f"{where}: stage 1 must freeze visual columns and skip the task reward")
            if s.stage_id > 1 and s.phase == "rlvr" and not s.use_task_reward:
                raise PlanError(f"{where}: stages 2-3 use the task reward")
            if s.cmkd is not None and s.stage_id != 2:
                raise PlanError(f"{where}: distillation belongs to stage 2")
            typed = s.stage_format is StageFormat.TYPED_THINK_ANSWER
            if typed == (s.channel is Channel.TEXT_ONLY):
                raise PlanError(f"{where}: channel {s.channel.value} does not fit format {s.stage_format.value}")
        for k, s in enumerate(self.stages):
            later = {t.corpus_ref for t in self.stages[k:] if t.stage_id > s.stage_id}
            reads = {s.corpus_ref} | ({s.replay.buffer_source} if s.replay else set())
            if reads & later:
                raise PlanError(f"stage {s.stage_id} reads a later stage's corpus: {sorted(reads & later)}")

    @classmethod
    def from_dict(cls, doc: dict, base_dir: str | Path = ".") -> "StagePlan":
        layout = FeatureLayout(**doc.get("layout", {}))
        stages = []
        for i, d in enumerate(doc["stages"]):
            d = dict(d)
            try:
                d["channel"] = Channel(d["channel"])
                d["stage_format"] = StageFormat(d["stage_format"])
                d["corpus_ref"] = d.pop("corpus", d.get("corpus_ref"))
                if "optimizer" in d:
                    d["optimizer"] = GrpoConfig(**d["optimizer"])
                if d.get("replay"):
                    r = dict(d["replay"])
                    if isinstance(r.get("ratio_new_to_replay"), str):
                        r["ratio_new_to_replay"] = parse_ratio(r["ratio_new_to_replay"])
                    elif "ratio_new_to_replay" in r:
                        r["ratio_new_to_replay"] = tuple(r["ratio_new_to_replay"])
                    d["replay"] = ReplaySpec(**r)
                if d.get("cmkd"):
                    d["cmkd"] = CmkdSpec(**d["cmkd"])
                stages.append(StageSpec(**d))
            except (KeyError, TypeError, ValueError) as e:
                raise PlanError(f"plan stage #{i}: {e}") from None
        return cls(stages, layout, Path(base_dir))

    def to_dict(self) -> dict:
        """Plain document accepted by :meth:`from_dict`."""
        stages = []
        for s in self.stages:
            d = asdict(s)
            d["channel"] = s.channel.value
            d["stage_format"] = s.stage_format.value
            if s.replay is not None:
                d["replay"]["ratio_new_to_replay"] = "{}:{}".format(*s.replay.ratio_new_to_replay)
            stages.append({k: v for k, v in d.items() if v is not None})
        return {"layout": asdict(self.layout), "stages": stages}

    @classmethod
    def load(cls, path: str | Path) -> "StagePlan":
        path = Path(path)
        try:
            doc = yaml.safe_load(path.read_text(encoding="utf-8"))
        except yaml.YAMLError as e:
            raise PlanError(f"{path}: not a valid YAML/JSON document: {e}") from None
        if not isinstance(doc, dict) or not isinstance(doc.get("stages"), list):
            raise PlanError(f"{path}: expected a mapping with a 'stages' list")
        return cls.from_dict(doc, path.parent)


def parse_ratio(text: str) -> tuple[int, int]:
    a, _, b = text.partition(":")
    return int(a), int(b)


# -- freezing ---------------------------------------------------------------


def apply_freeze(params: PolicyParameters, stage: StageSpec) -> PolicyParameters:
    """Mask the visual-block rows of every head when the stage freezes vision."""
    frozen = {}
    for h in HEADS:
        m = np.zeros(params.heads[h].shape, dtype=bool)
        if stage.freeze_visual:
            m[params.layout.visual, :] = True
        frozen[h] = m
    return params.with_frozen(frozen)


# -- cross-modal distillation -----------------------------------------------


@dataclass(frozen=True)
class CmkdRollout:
    text: str
    confidence: float


@dataclass(frozen=True)
class NoConsensus:
    reason: str = ""

    def __bool__(self) -> bool:
        return False


@dataclass(frozen=True)
class DistilledPair:
    example_id: str
    caption: str
    teacher: Rationale
    pseudo_label: str
    rollout_index: int


def cmkd_select(
    rollouts: Sequence[CmkdRollout],
    stage_format: StageFormat,
    example_id: str = "",
    caption: str = "",
) -> DistilledPair | NoConsensus:
    """Pick the teacher reply: vote, keep agreeing replies, keep well-formed ones,
    take the most confident.

    Votes read the answer token leniently, so a malformed reply still votes;
    replies with no readable answer abstain. Vote ties go to ``A``;
    confidence ties go to the lowest index.
    """
    if not rollouts:
        return NoConsensus("no rollouts")
    labels = [extract_answer(r.text) for r in rollouts]
    label = majority_vote(labels)
    if label is None:
        return NoConsensus("no readable answer")
    best = None
    for i, r in enumerate(rollouts):
        if labels[i] != label:
            continue
        parsed = parse_rationale(r.text, stage_format)
        if isinstance(parsed, FormatError):
            continue
        if best is None or r.confidence > rollouts[best[0]].confidence:
            best = (i, parsed)
    if best is None:
        return NoConsensus("no well-formed reply agrees with the vote")
    return DistilledPair(example_id, caption, best[1], label, best[0])


def cmkd_distill(
    params_text: PolicyParameters,
    corpus: Sequence[PreferenceExample],
    spec: CmkdSpec,
    seed: int,
) -> list[DistilledPair]:
    """Sample ``n`` caption-channel replies per example and keep the consensus teachers."""
    fmt = StageFormat.TYPED_THINK_ANSWER
    n = spec.n_samples
    prompts = [Prompt(ex, Channel.CAPTION, fmt) for ex in corpus]
    if not prompts:
        return []
    F, rows = prompt_features(prompts, params_text.layout)
    Fr = np.repeat(F, n, axis=0)
    idx, _ = sample_indices(params_text, Fr, np.random.default_rng(seed))
    logp = batch_logprob(params_text, Fr, idx, active_matrix([fmt] * len(Fr)))
    if spec.confidence == "mean_logprob":
        logp = logp / len(HEADS)

    pairs = []
    for e, ex in enumerate(corpus):
        rollouts = []
        for j in range(e * n, (e + 1) * n):
            action = StructuredAction.from_indices({h: idx[h][j] for h in HEADS}, fmt)
            rollouts.append(CmkdRollout(render_action(action, rows[e], ex.task), float(logp[j])))
        caption = "\n".join(m.caption for m in ex.media if m.caption is not None)
        picked = cmkd_select(rollouts, fmt, ex.id, caption)
        if not isinstance(picked, NoConsensus):
            pairs.append(picked)
    return pairs


def distilled_target(pair: DistilledPair) -> StructuredAction:
    """Student target: the teacher's answer and task tag, reproducing the gold caption."""
    return StructuredAction(pair.pseudo_label, pair.teacher.task_tag, True, True)


# -- running a plan ---------------------------------------------------------


@dataclass
class StageLog:
    stage_id: int
    records: list[dict] = field(default_factory=list)


def _cycle(items: Sequence, rng: np.random.Generator) -> Iterator:
    while True:
        for i in rng.permutation(len(items)):
            yield items[i]


def _resolve(ref: str, plan: StagePlan, corpora: dict | None, cache: dict) -> list[PreferenceExample]:
    if corpora is not None and ref in corpora:
        return list(corpora[ref])
    if ref not in cache:
        path = Path(ref)
        if not path.is_absolute():
            path = plan.base_dir / path
        cache[ref] = load_corpus(path)
    return cache[ref]


def _stage_corpus(spec: StageSpec, examples: list[PreferenceExample]) -> list[PreferenceExample]:
    if spec.channel is Channel.CAPTION:
        return [to_caption_based(ex) for ex in examples]
    return examples


def build_replay_buffer(
    params: PolicyParameters, source: Sequence[PreferenceExample], spec: ReplaySpec, seed: int
) -> ReplayBuffer:
    """Admit earlier-stage textual examples; ``high_reward`` keeps only those the
    current policy answers with full verifiable reward in one sampled reply."""
    fmt = StageFormat.THINK_ANSWER
    capacity = spec.capacity or len(source)
    if spec.admission == "all":
        buf = ReplayBuffer(capacity)
        for ex in source:
            buf.admit(ex)
        return buf
    if spec.admission != "high_reward":
        raise PlanError(f"unknown replay admission {spec.admission!r}")
    buf = ReplayBuffer(capacity, threshold=2.0)
    prompts = [Prompt(ex, Channel.TEXT_ONLY, fmt) for ex in source]
    F, rows = prompt_features(prompts, params.layout)
    idx, _ = sample_indices(params, F, np.random.default_rng(seed))
    for e, ex in enumerate(source):
        action = StructuredAction.from_indices({h: idx[h][e] for h in HEADS}, fmt)
        reward = total_reward(render_action(action, rows[e], None), fmt, ex.label, None)
        buf.admit(ex, float(reward.total))
    return buf


def run_plan(
    plan: StagePlan,
    init: PolicyParameters | None = None,
    seed: int = 0,
    out_dir: str | Path | None = None,
    corpora: dict[str, Sequence[PreferenceExample]] | None = None,
) -> tuple[PolicyParameters, list[StageLog]]:
    """Execute every stage in order; each consumes the previous stage's parameters.

    ``corpora`` maps corpus refs to in-memory examples; other refs are loaded
    as JSONL paths relative to ``plan.base_dir``. With ``out_dir``, a
    checkpoint ``stage{k}.ckpt`` and a log ``stage{k}.jsonl`` are written when
    stage ``k`` finishes.
    """
    plan.validate()
    cache: dict[str, list[PreferenceExample]] = {}
    for s in plan.stages:  # fail on unresolvable corpora before training
        for ref in [s.corpus_ref] + ([s.replay.buffer_source] if s.replay else []) + ([s.heldout_ref] if s.heldout_ref else []):
            try:
                _resolve(ref, plan, corpora, cache)
            except (OSError, ValueError) as e:
                raise PlanError(f"stage {s.stage_id}: cannot load corpus {ref!r}: {e}") from None

    params = (init or PolicyParameters.zeros(plan.layout)).copy()
    if params.layout != plan.layout:
        raise PlanError(f"initial parameters have layout {params.layout}, plan wants {plan.layout}")
    seeds = np.random.SeedSequence(seed).spawn(len(plan.stages))
    logs: dict[int, StageLog] = {}
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    for k, spec in enumerate(plan.stages):
        rng = np.random.default_rng(seeds[k])
        stage_log = logs.setdefault(spec.stage_id, StageLog(spec.stage_id))
        params = apply_freeze(params, spec)
        examples = _stage_corpus(spec, _resolve(spec.corpus_ref, plan, corpora, cache))
        heldout = None
        if spec.heldout_ref:
            heldout = _stage_corpus(spec, _resolve(spec.heldout_ref, plan, corpora, cache))
        try:
            if spec.phase == "sft":
                params = _run_sft(params, spec, examples, rng, stage_log)
            else:
                params = _run_rlvr(params, spec, examples, heldout, plan, corpora, cache, rng, stage_log)
                if spec.cmkd is not None:
                    params = _run_cmkd(params, spec, examples, _resolve(spec.corpus_ref, plan, corpora, cache), rng, stage_log)
        except (ValueError, KeyError) as e:
            raise PlanError(f"stage {spec.stage_id} ({spec.phase}): {e}") from e

        last_of_stage = k + 1 == len(plan.stages) or plan.stages[k + 1].stage_id != spec.stage_id
        if last_of_stage and out is not None:
            save_checkpoint(params, out / f"stage{spec.stage_id}.ckpt")
            with open(out / f"stage{spec.stage_id}.jsonl", "w", encoding="utf-8") as f:
                for rec in stage_log.records:
                    f.write(json.dumps(rec) + "\n")
    return params, [logs[i] for i in sorted(logs)]


def _sft_target(ex: PreferenceExample, fmt: StageFormat) -> StructuredAction:
    if ex.source_rationale is None:
        raise PlanError(f"example {ex.id!r}: SFT needs a source rationale")
    r = parse_rationale(ex.source_rationale, fmt)
    if isinstance(r, FormatError):
        raise PlanError(f"example {ex.id!r}: source rationale is malformed ({r.kind.value})")
    typed = fmt is StageFormat.TYPED_THINK_ANSWER
    return StructuredAction(r.answer, r.task_tag, True, True if typed else None)


def _run_sft(params, spec: StageSpec, examples, rng, stage_log: StageLog) -> PolicyParameters:
    pairs = [(ex, _sft_target(ex, spec.stage_format), spec.channel) for ex in examples if ex.source_rationale]
    if not pairs:
        raise PlanError(f"stage {spec.stage_id}: no examples carry a source rationale")
    stream = _cycle(pairs, rng)
    for step in range(spec.steps):
        batch = [next(stream) for _ in range(min(spec.sft_batch, len(pairs)))]
        params = sft_step(params, batch, spec.sft_lr)
    stage_log.records.append({"stage": spec.stage_id, "phase": "sft", "steps": spec.steps, "pairs": len(pairs)})
    return params


def _prompt_for(ex: PreferenceExample, spec: StageSpec) -> Prompt:
    if ex.is_textual:
        # replayed text-stage sample: posed exactly as in stage 1
        return Prompt(ex, Channel.TEXT_ONLY, StageFormat.THINK_ANSWER, False)
    return Prompt(ex, spec.channel, spec.stage_format, spec.use_task_reward)


def _run_rlvr(params, spec: StageSpec, examples, heldout, plan, corpora, cache, rng, stage_log) -> PolicyParameters:
    cfg = spec.optimizer
    stream = _cycle(examples, rng)
    if spec.replay is not None:
        source = _resolve(spec.replay.buffer_source, plan, corpora, cache)
        buffer = build_replay_buffer(params, source, spec.replay, int(rng.integers(2**63)))
        batches = replay_mix(stream, buffer, spec.replay.ratio_new_to_replay, cfg.batch_prompts, int(rng.integers(2**63)))
    else:
        batches = replay_mix(stream, [], (1, 0), cfg.batch_prompts, 0)
    reference = params.snapshot()
    for step in range(spec.steps):
        batch = next(batches)
        snapshot = params.snapshot()
        groups = generate_groups(snapshot, [_prompt_for(ex, spec) for ex in batch], cfg, rng)
        ref = snapshot if cfg.reference == "old" else reference
        for _ in range(cfg.epochs):
            params, stats = grpo_step(params, ref, groups, cfg)
        rec = _record(spec, step, stats)
        if heldout is not None and spec.eval_every and ((step + 1) % spec.eval_every == 0 or step + 1 == spec.steps):
            rec["heldout_acc"] = evaluate(params, heldout, spec.stage_format, spec.channel, 1, step).overall_accuracy
        stage_log.records.append(rec)
    return params


def _record(spec: StageSpec, step: int, stats: StepStats) -> dict:
    return {
        "step": step,
        "stage": spec.stage_id,
        "mean_reward": stats.mean_reward,
        "mean_format": stats.mean_format,
        "mean_accuracy": stats.mean_accuracy,
        "mean_task": stats.mean_task,
        "kl": stats.kl,
        "clip_frac": stats.clip_frac,
    }


def _run_cmkd(params, spec: StageSpec, captioned, originals, rng, stage_log) -> PolicyParameters:
    cm = spec.cmkd
    pairs = cmkd_distill(params, captioned, cm, int(rng.integers(2**63)))
    by_id = {ex.id: ex for ex in originals}
    batch = [(by_id[p.example_id], distilled_target(p), Channel.VISUAL) for p in pairs]
    agree = sum(p.pseudo_label == by_id[p.example_id].label for p in pairs)
    for _ in range(cm.sft_epochs):
        order = rng.permutation(len(batch))
        for start in range(0, len(batch), cm.batch_size):
            params = sft_step(params, [batch[i] for i in order[start : start + cm.batch_size]], cm.sft_lr)
    stage_log.records.append(
        {
            "stage": spec.stage_id,
            "phase": "cmkd",
            "examples": len(captioned),
            "distilled": len(pairs),
            "pseudo_label_accuracy": agree / len(pairs) if pairs else None,
        }
    )
    return params
