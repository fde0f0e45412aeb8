import numpy as np
import pytest

from msrl.corpus import CorpusSpec, synth_corpus, to_caption_based
from msrl.grammar import StageFormat
from msrl.optimizer import (
    GrpoConfig,
    NonFiniteGradient,
    Prompt,
    active_matrix,
    compute_advantages,
    generate_groups,
    grpo_step,
    sft_loss,
    sft_step,
)
from msrl.policy import HEADS, Channel, FeatureLayout, PolicyParameters, StructuredAction, batch_logprob, head_kl

TYPED = StageFormat.TYPED_THINK_ANSWER
PLAIN = StageFormat.THINK_ANSWER
LAYOUT = FeatureLayout(6, 4)


@pytest.fixture(scope="module")
def prompts():
    mm = [to_caption_based(ex) for ex in synth_corpus(CorpusSpec(6, 6, seed=1))]
    text = synth_corpus(CorpusSpec(6, 6, seed=2, textual=True, id_prefix="t"))
    return [Prompt(ex, Channel.CAPTION, TYPED, True) for ex in mm] + [Prompt(ex, Channel.TEXT_ONLY, PLAIN) for ex in text]


def test_advantages_basic():
    assert np.allclose(compute_advantages([1, 0]), [1, -1])
    assert np.array_equal(compute_advantages([2.2] * 5), np.zeros(5))
    assert compute_advantages([0, 0], policy="skip") is None
    with pytest.raises(ValueError):
        compute_advantages([1.0])


def test_config_validation():
    with pytest.raises(ValueError):
        GrpoConfig(group_size=1)
    with pytest.raises(ValueError):
        GrpoConfig(surrogate="ppo")
    with pytest.raises(ValueError):
        GrpoConfig(reference="moving")


def test_groups_are_scored_and_reproducible(prompts):
    p = PolicyParameters.random(LAYOUT, 0.5, np.random.default_rng(0))
    cfg = GrpoConfig(group_size=4)
    g1 = generate_groups(p, prompts, cfg, np.random.default_rng(3))
    g2 = generate_groups(p, prompts, cfg, np.random.default_rng(3))
    assert [g.texts for g in g1] == [g.texts for g in g2]
    for g in g1:
        assert len(g.texts) == len(g.rewards) == 4
        for i, r in enumerate(g.rewards):
            assert r.total == r.format + r.accuracy + r.task
            if g.prompt.stage_format is PLAIN:
                assert r.task == 0 and "<type>" not in g.texts[i]
        lp = batch_logprob(p, np.repeat(g.features[None], 4, 0), g.actions,
                           active_matrix([g.prompt.stage_format] * 4))
        assert np.allclose(lp, g.logprob_old)


def _objective(params, groups, cfg, ref):
    """Clipped surrogate minus beta * mean KL, evaluated directly."""
    total, n = 0.0, 0
    for g in groups:
        if g.advantages is None:
            continue
        G = len(g.texts)
        new = batch_logprob(params, np.repeat(g.features[None], G, 0), g.actions,
                            active_matrix([g.prompt.stage_format] * G))
        ratio = np.exp(new - g.logprob_old)
        clipped = np.clip(ratio, 1 - cfg.clip_eps, 1 + cfg.clip_eps)
        total += np.minimum(ratio * g.advantages, clipped * g.advantages).sum()
        n += G
    kl = 0.0
    for g in groups:
        per_head = head_kl(params, ref, g.features[None])
        heads = HEADS if g.prompt.stage_format is TYPED else ("answer", "format")
        kl += sum(per_head[h][0] for h in heads)
    return total / n - cfg.kl_beta * kl / len(groups)


def test_step_is_the_gradient_of_the_clipped_objective(prompts):
    rng = np.random.default_rng(4)
    old = PolicyParameters.random(LAYOUT, 0.5, rng)
    cfg = GrpoConfig(group_size=6, kl_beta=0.3, learning_rate=1e-3)
    groups = generate_groups(old.snapshot(), prompts, cfg, rng)
    current = old.apply_update({h: 0.05 * rng.standard_normal(old.heads[h].shape) for h in HEADS})
    new, stats = grpo_step(current, old, groups, cfg)
    assert 0.0 < stats.clip_frac < 1.0

    eps = 1e-6
    for h in HEADS:
        for i, j in [(0, 0), (LAYOUT.text.start + 1, 1), (LAYOUT.task.start, 0), (LAYOUT.dim - 1, 1)]:
            hi, lo = current.copy(), current.copy()
            hi.heads[h][i, j] += eps
            lo.heads[h][i, j] -= eps
            fd = (_objective(hi, groups, cfg, old) - _objective(lo, groups, cfg, old)) / (2 * eps)
            step = (new.heads[h][i, j] - current.heads[h][i, j]) / cfg.learning_rate
            assert step == pytest.approx(fd, rel=1e-5, abs=1e-8)


def test_flat_groups_give_no_policy_gradient(prompts):
    p = PolicyParameters.zeros(LAYOUT)
    p.heads["format"][LAYOUT.bucket, 1] = 60.0  # always malformed: every reward 0
    cfg = GrpoConfig(group_size=4)
    groups = generate_groups(p, prompts[6:], cfg, np.random.default_rng(0))
    assert all(np.all(g.advantages == 0) for g in groups)
    new, _ = grpo_step(p, p.snapshot(), groups, cfg)
    assert new.equal(p)
    skipped = generate_groups(p, prompts[6:], GrpoConfig(group_size=4, zero_std_policy="skip"), np.random.default_rng(0))
    _, stats = grpo_step(p, p.snapshot(), skipped, cfg)
    assert stats.skipped_groups == len(skipped)


def test_reinforce_surrogate_never_clips(prompts):
    rng = np.random.default_rng(5)
    old = PolicyParameters.random(LAYOUT, 0.5, rng)
    cfg = GrpoConfig(group_size=6, surrogate="reinforce")
    groups = generate_groups(old.snapshot(), prompts, cfg, rng)
    current = old.apply_update({h: 0.5 * rng.standard_normal(old.heads[h].shape) for h in HEADS})
    _, stats = grpo_step(current, old, groups, cfg)
    assert stats.clip_frac == 0.0


def test_non_finite_gradient_is_reported(prompts):
    rng = np.random.default_rng(6)
    p = PolicyParameters.zeros(LAYOUT)
    groups = generate_groups(p, prompts[:2], GrpoConfig(group_size=4), rng)
    groups[0].logprob_old[:] = -1e6  # ratio overflows to inf
    with pytest.raises(NonFiniteGradient, match=groups[0].example_id):
        grpo_step(p, p.snapshot(), groups, GrpoConfig(group_size=4, surrogate="reinforce"))


def test_training_raises_reward(prompts):
    data = synth_corpus(CorpusSpec(200, 6, seed=3, textual=True))
    ps = [Prompt(ex, Channel.TEXT_ONLY, PLAIN) for ex in data]
    p = PolicyParameters.zeros(LAYOUT)
    cfg = GrpoConfig(group_size=8)
    rng = np.random.default_rng(0)
    first = None
    for _ in range(30):
        snap = p.snapshot()
        p, stats = grpo_step(p, snap, generate_groups(snap, ps, cfg, rng), cfg)
        first = first if first is not None else stats.mean_reward
    assert stats.mean_reward > first + 0.5


def test_sft_step_lowers_loss():
    data = synth_corpus(CorpusSpec(50, 6, seed=4))
    pairs = [(ex, StructuredAction(ex.label, ex.task, True, True), Channel.VISUAL) for ex in data]
    p = PolicyParameters.zeros(LAYOUT)
    before = sft_loss(p, pairs)
    after = sft_loss(sft_step(p, pairs, 0.01), pairs)
    assert after < before
    assert sft_step(p, [], 0.1).equal(p)
