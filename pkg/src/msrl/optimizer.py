"""GRPO on verifiable rewards, and supervised fine-tuning steps."""

from __future__ import annotations

import functools
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .corpus import PreferenceExample
from .grammar import StageFormat
from .policy import (
    HEADS,
    Channel,
    PolicyParameters,
    StructuredAction,
    action_array,
    batch_grad,
    batch_kl_grad,
    batch_logprob,
    featurize,
    head_kl,
    render_action,
    sample_indices,
    active_heads,
)
from .rewards import RewardBreakdown, RewardConfig, total_reward


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass(frozen=True)
class GrpoConfig:
    group_size: int = 8
    kl_beta: float = 0.0
    clip_eps: float = 0.2
    learning_rate: float = 2.0
    batch_prompts: int = 128
    zero_std_policy: str = "zero"  # "zero" | "skip"
    surrogate: str = "clip"  # "clip" | "reinforce"
    epochs: int = 1
    reference: str = "old"  # "old": refresh every step | "fixed": stage start

    def __post_init__(self) -> None:
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if self.batch_prompts < 1:
            raise ValueError("batch_prompts must be >= 1")
        if self.kl_beta < 0 or self.clip_eps <= 0 or self.learning_rate <= 0:
            raise ValueError("need kl_beta >= 0, clip_eps > 0, learning_rate > 0")
        if self.zero_std_policy not in ("zero", "skip"):
            raise ValueError(f"unknown zero_std_policy {self.zero_std_policy!r}")
        if self.surrogate not in ("clip", "reinforce"):
            raise ValueError(f"unknown surrogate {self.surrogate!r}")
        if self.reference not in ("old", "fixed"):
            raise ValueError(f"unknown reference {self.reference!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


# Settings used for billion-parameter models; the toy policy needs a far larger step.
LARGE_MODEL_PRESET = GrpoConfig(group_size=8, learning_rate=1e-6, batch_prompts=128)


def compute_advantages(rewards: Sequence[float], policy: str = "zero") -> np.ndarray | None:
    """Group-normalized advantages ``(r - mean) / std`` with population std.

    A zero-variance group yields zeros, or ``None`` under the ``"skip"`` policy.
    """
    r = np.asarray(rewards, dtype=float)
    if r.size < 2:
        raise ValueError("a group needs at least two rollouts")
    if np.all(r == r[0]):  # np.std of a constant group can round to a tiny nonzero value
        return None if policy == "skip" else np.zeros_like(r)
    return (r - r.mean()) / r.std()


@dataclass(frozen=True)
class Prompt:
    """One training prompt with the input surface and reply format it is posed in."""

    example: PreferenceExample
    channel: Channel
    stage_format: StageFormat
    use_task_reward: bool = False


@dataclass
class RolloutGroup:
    prompt: Prompt
    features: np.ndarray
    actions: dict[str, np.ndarray]
    texts: list[str]
    logprob_old: np.ndarray
    rewards: list[RewardBreakdown]
    advantages: np.ndarray | None

    @property
    def example_id(self) -> str:
        return self.prompt.example.id

    def structured(self, i: int) -> StructuredAction:
        return StructuredAction.from_indices({h: self.actions[h][i] for h in HEADS}, self.prompt.stage_format)


@dataclass
class StepStats:
    mean_reward: float
    mean_format: float
    mean_accuracy: float
    mean_task: float
    mean_abs_advantage: float
    kl: float
    clip_frac: float
    skipped_groups: int = 0
    extra: dict = field(default_factory=dict)


@functools.lru_cache(maxsize=200_000)
def _features(example: PreferenceExample, channel: Channel, layout) -> tuple[np.ndarray, tuple[str, ...]]:
    fv = featurize(example, channel, layout)
    fv.vector.flags.writeable = False
    return fv.vector, fv.bit_rows


def prompt_features(prompts: Sequence[Prompt], layout) -> tuple[np.ndarray, list[tuple[str, ...]]]:
    pairs = [_features(p.example, p.channel, layout) for p in prompts]
    return np.stack([v for v, _ in pairs]), [rows for _, rows in pairs]


def active_matrix(formats: Sequence[StageFormat]) -> dict[str, np.ndarray]:
    on = [set(active_heads(f)) for f in formats]
    return {h: np.array([h in s for s in on]) for h in HEADS}


def generate_groups(
    policy: PolicyParameters,
    prompts: Sequence[Prompt],
    cfg: GrpoConfig,
    rng: np.random.Generator,
    reward_cfg: RewardConfig = RewardConfig(),
) -> list[RolloutGroup]:
    """Sample ``group_size`` replies per prompt from ``policy`` and score them."""
    G = cfg.group_size
    F, rows = prompt_features(prompts, policy.layout)
    Fr = np.repeat(F, G, axis=0)
    idx, _ = sample_indices(policy, Fr, rng)
    formats = [p.stage_format for p in prompts for _ in range(G)]
    active = active_matrix(formats)
    logp = batch_logprob(policy, Fr, idx, active)

    groups = []
    for k, p in enumerate(prompts):
        sl = slice(k * G, (k + 1) * G)
        acts = {h: idx[h][sl] for h in HEADS}
        rcfg = replace(reward_cfg, use_task_reward=p.use_task_reward)
        texts, rewards = [], []
        for i in range(G):
            action = StructuredAction.from_indices({h: acts[h][i] for h in HEADS}, p.stage_format)
            text = render_action(action, rows[k], p.example.task)
            texts.append(text)
            rewards.append(total_reward(text, p.stage_format, p.example.label, p.example.task, rcfg))
        adv = compute_advantages([float(r.total) for r in rewards], cfg.zero_std_policy)
        groups.append(RolloutGroup(p, F[k], acts, texts, logp[sl], rewards, adv))
    return groups


def grpo_step(
    params: PolicyParameters,
    snapshot: PolicyParameters,
    groups: Sequence[RolloutGroup],
    cfg: GrpoConfig,
) -> tuple[PolicyParameters, StepStats]:
    """One ascent step on the clipped group-relative surrogate minus ``beta * KL``.

    ``snapshot`` is the policy the KL penalty is measured against; the
    importance ratios use the ``logprob_old`` stored in each group.
    """
    used = [g for g in groups if g.advantages is not None]
    grad = {h: np.zeros_like(params.heads[h]) for h in HEADS}
    clip_count = n_rollouts = 0

    if used:
        G = len(used[0].texts)
        F = np.repeat(np.stack([g.features for g in used]), G, axis=0)
        actions = {h: np.concatenate([g.actions[h] for g in used]) for h in HEADS}
        active = active_matrix([g.prompt.stage_format for g in used for _ in range(G)])
        adv = np.concatenate([g.advantages for g in used])
        old = np.concatenate([g.logprob_old for g in used])
        new = batch_logprob(params, F, actions, active)
        with np.errstate(over="ignore"):  # overflow is reported below as NonFiniteGradient
            ratio = np.exp(new - old)
        if cfg.surrogate == "clip":
            clipped = ((adv > 0) & (ratio > 1 + cfg.clip_eps)) | ((adv < 0) & (ratio < 1 - cfg.clip_eps))
        else:
            clipped = np.zeros(ratio.shape, dtype=bool)
        weights = np.where(clipped, 0.0, adv * ratio)
        bad = ~np.isfinite(weights)
        if bad.any():
            raise NonFiniteGradient(f"non-finite gradient in group {used[int(np.argmax(bad)) // G].example_id!r}")
        n_rollouts = weights.size
        clip_count = int(clipped.sum())
        grad = batch_grad(params, F, actions, active, weights / n_rollouts)

    if cfg.kl_beta > 0 and groups:
        Fp = np.stack([g.features for g in groups])
        active_p = active_matrix([g.prompt.stage_format for g in groups])
        kl_grad = batch_kl_grad(params, snapshot, Fp, active_p, np.full(len(groups), 1.0 / len(groups)))
        grad = {h: grad[h] - cfg.kl_beta * kl_grad[h] for h in HEADS}

    for h in HEADS:
        if not np.all(np.isfinite(grad[h])):
            gid = groups[0].example_id if groups else "<none>"
            raise NonFiniteGradient(f"non-finite gradient in head {h!r} (batch starting at group {gid!r})")

    new_params = params.apply_update({h: cfg.learning_rate * grad[h] for h in HEADS})
    return new_params, _stats(new_params, snapshot, groups, clip_count, n_rollouts)


def mean_kl(params: PolicyParameters, ref: PolicyParameters, groups: Sequence[RolloutGroup]) -> float:
    if not groups:
        return 0.0
    F = np.stack([g.features for g in groups])
    kl = head_kl(params, ref, F)
    active = active_matrix([g.prompt.stage_format for g in groups])
    return float(np.mean(sum(np.where(active[h], kl[h], 0.0) for h in HEADS)))


def _stats(params, ref, groups, clip_count, n_rollouts) -> StepStats:
    rewards = [r for g in groups for r in g.rewards]
    advs = [a for g in groups if g.advantages is not None for a in g.advantages]
    mean = lambda xs: float(np.mean(xs)) if len(xs) else 0.0  # noqa: E731
    return StepStats(
        mean_reward=mean([float(r.total) for r in rewards]),
        mean_format=mean([float(r.format) for r in rewards]),
        mean_accuracy=mean([float(r.accuracy) for r in rewards]),
        mean_task=mean([float(r.task) for r in rewards]),
        mean_abs_advantage=mean(np.abs(advs)),
        kl=mean_kl(params, ref, groups),
        clip_frac=clip_count / n_rollouts if n_rollouts else 0.0,
        skipped_groups=sum(g.advantages is None for g in groups),
    )


# -- supervised fine-tuning -------------------------------------------------


def action_format(action: StructuredAction) -> StageFormat:
    return StageFormat.THINK_ANSWER if action.task_tag is None else StageFormat.TYPED_THINK_ANSWER


def sft_loss(params: PolicyParameters, pairs: Sequence[tuple[PreferenceExample, StructuredAction, Channel]]) -> float:
    """``-sum log pi(target | input)`` over the batch."""
    F, actions, active = _sft_batch(params, pairs)
    return float(-batch_logprob(params, F, actions, active).sum())


def sft_step(
    params: PolicyParameters,
    pairs: Sequence[tuple[PreferenceExample, StructuredAction, Channel]],
    lr: float,
) -> PolicyParameters:
    """One descent step on :func:`sft_loss`."""
    if not pairs or lr == 0:
        return params.copy()
    F, actions, active = _sft_batch(params, pairs)
    grad = batch_grad(params, F, actions, active, np.ones(len(pairs)))
    return params.apply_update({h: lr * grad[h] for h in HEADS})


def _sft_batch(params, pairs):
    prompts = [Prompt(ex, ch, action_format(a)) for ex, a, ch in pairs]
    F, _ = prompt_features(prompts, params.layout)
    actions = action_array([a for _, a, _ in pairs])
    active = active_matrix([p.stage_format for p in prompts])
    return F, actions, active
