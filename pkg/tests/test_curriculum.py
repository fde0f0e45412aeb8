import json
from dataclasses import replace

import numpy as np
import pytest
import yaml

from msrl.corpus import CorpusSpec, save_corpus, synth_corpus, to_caption_based
from msrl.curriculum import (
    CmkdRollout,
    CmkdSpec,
    NoConsensus,
    PlanError,
    ReplaySpec,
    StagePlan,
    StageSpec,
    apply_freeze,
    build_replay_buffer,
    cmkd_distill,
    cmkd_select,
    distilled_target,
    parse_ratio,
    run_plan,
)
from msrl.grammar import StageFormat, filler_rationale, render_rationale
from msrl.policy import HEADS, Channel, FeatureLayout, PolicyParameters, load_checkpoint
from msrl.presets import default_corpora, default_plan

TYPED = StageFormat.TYPED_THINK_ANSWER
PLAIN = StageFormat.THINK_ANSWER


def reply(answer, broken=False):
    text = render_rationale(filler_rationale(answer, None, None))
    return text.replace("</think>", "") if broken else text


def typed_reply(answer):
    from msrl.corpus import TaskKind

    return render_rationale(filler_rationale(answer, TaskKind.IMAGE_UNDERSTANDING, "bits: 01. An image."))


@pytest.fixture(scope="module")
def small():
    return default_corpora(0, n_text=200, n_probe=50, n_stage2=120, n_stage3=64, n_heldout=50)


def small_plan(**kw):
    kw = {"stage1_steps": 5, "stage2_steps": 3, "stage3_steps": 2} | kw
    plan = default_plan(**kw)
    stages = [replace(s, optimizer=replace(s.optimizer, batch_prompts=30)) if s.phase == "rlvr" else s
              for s in plan.stages]
    return StagePlan(stages, plan.layout)


def test_default_plan_is_valid():
    default_plan().validate()


@pytest.mark.parametrize(
    "change,msg",
    [
        (lambda s: replace(s[0], freeze_visual=False), "stage 1"),
        (lambda s: replace(s[2], use_task_reward=False), "task reward"),
        (lambda s: replace(s[3], cmkd=CmkdSpec()), "distillation"),
        (lambda s: replace(s[3], channel=Channel.TEXT_ONLY), "does not fit"),
        (lambda s: replace(s[1], corpus_ref="mm_stage3"), "later stage"),
    ],
)
def test_plan_validation(change, msg):
    stages = list(default_plan().stages)
    bad = change(stages)
    idx = next(i for i, s in enumerate(stages) if s.stage_id == bad.stage_id and s.phase == bad.phase)
    stages[idx] = bad
    with pytest.raises(PlanError, match=msg):
        StagePlan(stages).validate()


def test_stage_order_is_enforced():
    stages = default_plan().stages
    with pytest.raises(PlanError):
        StagePlan([stages[2], stages[0]]).validate()
    with pytest.raises(PlanError):
        StagePlan([]).validate()


def test_plan_loads_from_yaml(tmp_path):
    doc = {
        "layout": {"bits": 8, "buckets": 4},
        "stages": [
            {"stage_id": 1, "phase": "rlvr", "corpus": "text.jsonl", "channel": "text_only",
             "stage_format": "think_answer", "use_task_reward": False, "freeze_visual": True,
             "steps": 10, "optimizer": {"group_size": 4, "learning_rate": 1.0}},
            {"stage_id": 2, "phase": "rlvr", "corpus": "cap.jsonl", "channel": "caption",
             "stage_format": "typed_think_answer", "use_task_reward": True, "freeze_visual": False,
             "steps": 10, "replay": {"buffer_source": "text.jsonl", "ratio_new_to_replay": "4:1"},
             "cmkd": {"n_samples": 4}},
        ],
    }
    path = tmp_path / "plan.yaml"
    path.write_text(yaml.safe_dump(doc))
    plan = StagePlan.load(path)
    plan.validate()
    assert plan.base_dir == tmp_path
    assert plan.stages[1].replay.ratio_new_to_replay == (4, 1)
    assert plan.stages[0].optimizer.group_size == 4
    assert plan.stages[1].cmkd.n_samples == 4


def test_plan_errors_name_the_stage():
    with pytest.raises(PlanError, match="#0"):
        StagePlan.from_dict({"stages": [{"stage_id": 1, "phase": "rlvr", "channel": "smell"}]})


def test_parse_ratio():
    assert parse_ratio("5:1") == (5, 1)
    assert parse_ratio("1:0") == (1, 0)


def test_with_ratio_drops_replay_and_distillation():
    s2 = default_plan().stages[2]
    assert s2.with_ratio((1, 0)).replay is None
    assert s2.with_ratio((2, 1)).replay.ratio_new_to_replay == (2, 1)
    assert s2.with_ratio((2, 1)).cmkd is None


def test_apply_freeze_masks_visual_rows():
    p = PolicyParameters.zeros(FeatureLayout(8, 4))
    frozen = apply_freeze(p, default_plan().stages[0])
    thawed = apply_freeze(frozen, default_plan().stages[2])
    for h in HEADS:
        assert frozen.frozen[h][frozen.layout.visual].all()
        assert not frozen.frozen[h][frozen.layout.text].any()
        assert not thawed.frozen[h].any()


def test_cmkd_select_cases():
    r = lambda text, c: CmkdRollout(text, c)  # noqa: E731
    picked = cmkd_select([r(typed_reply("B"), -1), r(typed_reply("A"), -3), r(typed_reply("A"), -2)], TYPED)
    assert (picked.pseudo_label, picked.rollout_index) == ("A", 2)
    # tie in the vote goes to A; tie in confidence goes to the first index
    picked = cmkd_select([r(typed_reply("B"), 0), r(typed_reply("A"), -1), r(typed_reply("A"), -1),
                          r(typed_reply("B"), 0)], TYPED)
    assert (picked.pseudo_label, picked.rollout_index) == ("A", 1)
    # malformed replies vote but are never chosen
    broken = typed_reply("B").replace("</think>", "")
    picked = cmkd_select([r(broken, 0), r(broken, 0), r(typed_reply("B"), -5), r(typed_reply("A"), 0)], TYPED)
    assert (picked.pseudo_label, picked.rollout_index) == ("B", 2)
    assert isinstance(cmkd_select([r(broken, 0)], TYPED), NoConsensus)
    assert isinstance(cmkd_select([], TYPED), NoConsensus)
    assert isinstance(cmkd_select([r("<answer>C</answer>", 0)], TYPED), NoConsensus)


def test_cmkd_distill_targets(small):
    p = PolicyParameters.zeros(FeatureLayout(8, 4))
    p.heads["format"][p.layout.bucket, 0] = 30.0
    captioned = [to_caption_based(ex) for ex in small["mm_stage2"][:40]]
    pairs = cmkd_distill(p, captioned, CmkdSpec(n_samples=5), seed=1)
    assert pairs == cmkd_distill(p, captioned, CmkdSpec(n_samples=5), seed=1)
    assert len(pairs) == 40
    for pair in pairs:
        t = distilled_target(pair)
        assert t.answer == pair.pseudo_label and t.well_formed and t.caption_faithful
        assert t.task_tag is pair.teacher.task_tag


def test_replay_admission(small):
    p = PolicyParameters.zeros(FeatureLayout(8, 4))
    src = small["text_train"]
    assert len(build_replay_buffer(p, src, ReplaySpec("x", admission="all"), 0)) == len(src)
    high = build_replay_buffer(p, src, ReplaySpec("x"), 0)
    assert 0 < len(high) < len(src)  # zero policy: a quarter of replies earn full reward
    with pytest.raises(PlanError):
        build_replay_buffer(p, src, ReplaySpec("x", admission="bogus"), 0)


def test_run_plan_writes_checkpoints_and_logs(tmp_path, small):
    plan = small_plan()
    params, logs = run_plan(plan, None, 3, out_dir=tmp_path, corpora=small)
    assert [log.stage_id for log in logs] == [1, 2, 3]
    for k in (1, 2, 3):
        assert (tmp_path / f"stage{k}.ckpt").exists()
        records = [json.loads(line) for line in (tmp_path / f"stage{k}.jsonl").read_text().splitlines()]
        assert records
    assert load_checkpoint(tmp_path / "stage3.ckpt").equal(params)
    cm = [r for r in logs[1].records if r.get("phase") == "cmkd"]
    assert cm and cm[0]["distilled"] > 0


def test_run_plan_is_deterministic(small):
    a, _ = run_plan(small_plan(), None, 5, corpora=small)
    b, _ = run_plan(small_plan(), None, 5, corpora=small)
    c, _ = run_plan(small_plan(), None, 6, corpora=small)
    assert a.equal(b) and not a.equal(c)


def test_run_plan_reads_jsonl_relative_to_plan(tmp_path, small):
    save_corpus(small["text_train"], tmp_path / "text.jsonl")
    plan = small_plan(only_stage1=True)
    stages = [replace(s, corpus_ref="text.jsonl", heldout_ref="text.jsonl", eval_every=5) for s in plan.stages]
    params, logs = run_plan(StagePlan(stages, plan.layout, tmp_path), None, 0)
    assert any("heldout_acc" in r for r in logs[0].records)


def test_missing_corpus_is_a_plan_error(tmp_path):
    plan = small_plan(only_stage1=True)
    with pytest.raises(PlanError, match="cannot load"):
        run_plan(StagePlan(plan.stages, plan.layout, tmp_path), None, 0)


def test_sft_needs_rationales(small):
    plain = synth_corpus(CorpusSpec(20, 8, textual=True))
    plan = small_plan(only_stage1=True)
    with pytest.raises(PlanError, match="rationale"):
        run_plan(plan, None, 0, corpora={"text_train": plain})


def test_layout_mismatch_is_rejected(small):
    with pytest.raises(PlanError, match="layout"):
        run_plan(small_plan(only_stage1=True), PolicyParameters.zeros(FeatureLayout(4, 4)), 0, corpora=small)


def test_stage1_keeps_visual_rows_with_random_init(small):
    init = PolicyParameters.random(FeatureLayout(8, 4), 0.2, np.random.default_rng(0))
    after, _ = run_plan(small_plan(only_stage1=True), init, 0, corpora=small)
    for h in HEADS:
        assert after.heads[h][:8].tobytes() == init.heads[h][:8].tobytes()
