"""Command-line entry point: ``msrl synth|train|distill|eval|sweep|score``.

Exit codes: 0 success, 2 usage, 3 bad input data, 4 bad plan or checkpoint,
5 numerical failure. ``MSRL_SEED`` sets the default ``--seed``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import yaml

from .corpus import CorpusError, CorpusSpec, TaskKind, load_corpus, save_corpus, synth_corpus, to_caption_based
from .curriculum import CmkdSpec, PlanError, StagePlan, cmkd_distill, parse_ratio, run_plan
from .grammar import StageFormat, render_rationale
from .harness import evaluate, ratio_sweep, report_render
from .optimizer import NonFiniteGradient
from .policy import Channel, load_checkpoint, save_checkpoint
from .rewards import RewardConfig, total_reward

EXIT_USAGE, EXIT_DATA, EXIT_PLAN, EXIT_NUMERIC = 2, 3, 4, 5


class UsageError(Exception):
    pass


def _default_seed() -> int:
    raw = os.environ.get("MSRL_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"MSRL_SEED must be an integer, got {raw!r}") from None


def _read_doc(path: str) -> dict:
    try:
        doc = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except yaml.YAMLError as e:
        raise CorpusError(f"{path}: not a valid YAML/JSON document: {e}") from None
    if not isinstance(doc, dict):
        raise CorpusError(f"{path}: expected a mapping")
    return doc


def _load_params(path: str):
    try:
        return load_checkpoint(path)
    except (KeyError, ValueError, json.JSONDecodeError) as e:
        raise PlanError(f"{path}: unreadable checkpoint: {e}") from None


def _write(text: str, out: str | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text, encoding="utf-8")


# -- subcommands ------------------------------------------------------------


def cmd_synth(args) -> None:
    if args.preset:
        from .presets import default_corpora, default_plan

        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        corpora = default_corpora(args.seed)
        for name, examples in corpora.items():
            save_corpus(examples, out / f"{name}.jsonl")
        plan = default_plan()
        doc = plan.to_dict()
        for st in doc["stages"]:
            st["corpus_ref"] = f"{st['corpus_ref']}.jsonl"
            if "replay" in st:
                st["replay"]["buffer_source"] += ".jsonl"
        (out / "plan.yaml").write_text(yaml.safe_dump(doc, sort_keys=False), encoding="utf-8")
        print(f"wrote {len(corpora)} corpora and plan.yaml to {out}")
        return
    if not args.spec:
        raise UsageError("synth needs --spec or --preset")
    doc = _read_doc(args.spec)
    doc.setdefault("seed", args.seed)
    try:
        spec = CorpusSpec.from_dict(doc)
    except TypeError as e:
        raise CorpusError(f"{args.spec}: {e}") from None
    examples = synth_corpus(spec)
    save_corpus(examples, args.out)
    print(f"wrote {len(examples)} examples to {args.out}")


def cmd_train(args) -> None:
    plan = StagePlan.load(args.plan)
    init = _load_params(args.init) if args.init else None
    params, logs = run_plan(plan, init, args.seed, out_dir=args.out)
    for log in logs:
        last = next((r for r in reversed(log.records) if "mean_reward" in r), None)
        if last:
            print(f"stage {log.stage_id}: final mean reward {last['mean_reward']:.3f}")
    save_checkpoint(params, Path(args.out) / "final.ckpt")
    print(f"checkpoints in {args.out}")


def cmd_distill(args) -> None:
    params = _load_params(args.checkpoint)
    corpus = [to_caption_based(ex) for ex in load_corpus(args.corpus) if not ex.is_textual]
    pairs = cmkd_distill(params, corpus, CmkdSpec(n_samples=args.n), args.seed)
    lines = []
    for p in pairs:
        lines.append(json.dumps({
            "id": p.example_id,
            "pseudo_label": p.pseudo_label,
            "task": p.teacher.task_tag.value,
            "rollout_index": p.rollout_index,
            "caption": p.caption,
            "rationale": render_rationale(p.teacher),
        }, ensure_ascii=False))
    _write("".join(line + "\n" for line in lines), args.out)
    print(f"distilled {len(pairs)} of {len(corpus)} examples", file=sys.stderr)


def cmd_eval(args) -> None:
    params = _load_params(args.checkpoint)
    corpus = load_corpus(args.corpus)
    if not corpus:
        raise CorpusError(f"{args.corpus}: empty corpus")
    textual = corpus[0].is_textual
    if any(ex.is_textual != textual for ex in corpus):
        raise CorpusError(f"{args.corpus}: mixes textual and multimodal examples")
    channel = Channel(args.channel) if args.channel else (Channel.TEXT_ONLY if textual else Channel.VISUAL)
    if channel is Channel.CAPTION:
        corpus = [to_caption_based(ex) for ex in corpus]
    fmt = StageFormat.THINK_ANSWER if channel is Channel.TEXT_ONLY else StageFormat.TYPED_THINK_ANSWER
    report = evaluate(params, corpus, fmt, channel, args.k, args.seed)
    table, doc = report_render(report)
    print(table)
    if args.json:
        Path(args.json).write_text(doc + "\n", encoding="utf-8")


def cmd_sweep(args) -> None:
    plan = StagePlan.load(args.plan)
    try:
        ratios = [parse_ratio(r) for r in args.ratios.split(",")]
    except ValueError:
        raise UsageError(f"bad --ratios {args.ratios!r}; expected e.g. 1:0,4:1") from None
    rows = ratio_sweep(plan, ratios, load_corpus(args.eval_corpus), load_corpus(args.text_probe), args.seed)
    table, doc = report_render(rows)
    print(table)
    if args.json:
        Path(args.json).write_text(doc + "\n", encoding="utf-8")


def _score_record(rec: dict, lineno: int) -> dict:
    where = f"line {lineno}"
    if not isinstance(rec, dict):
        raise CorpusError(f"{where}: expected a JSON object")
    try:
        text, gold, stage = rec["output_text"], rec["gold"], rec["stage"]
    except KeyError as e:
        raise CorpusError(f"{where}: missing field {e.args[0]!r}") from None
    if gold not in ("A", "B"):
        raise CorpusError(f"{where}: gold must be 'A' or 'B'")
    if stage in (1, "1", "think_answer"):
        fmt = StageFormat.THINK_ANSWER
    elif stage in (2, 3, "2", "3", "typed_think_answer"):
        fmt = StageFormat.TYPED_THINK_ANSWER
    else:
        raise CorpusError(f"{where}: unknown stage {stage!r}")
    task = TaskKind.from_name(rec["task"]) if rec.get("task") else None
    cfg = RewardConfig(use_task_reward=fmt is StageFormat.TYPED_THINK_ANSWER)
    rb = total_reward(text, fmt, gold, task, cfg)
    return {"id": rec.get("id")} | rb.as_dict()


def cmd_score(args) -> None:
    src = open(args.input, encoding="utf-8") if args.input != "-" else sys.stdin
    out = []
    with src:
        for lineno, line in enumerate(src, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusError(f"line {lineno}: malformed JSON: {e.msg}") from None
            out.append(json.dumps(_score_record(rec, lineno)))
    _write("".join(line + "\n" for line in out), args.out)


# -- wiring -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="msrl", description="Staged RL training of a toy generative reward model.")
    sub = parser.add_subparsers(dest="command", required=True)
    seed = {"type": int, "default": None, "help": "random seed (default: $MSRL_SEED or 0)"}

    p = sub.add_parser("synth", help="generate a synthetic JSONL corpus")
    p.add_argument("--spec", help="YAML/JSON corpus spec")
    p.add_argument("--preset", choices=["default"], help="write the default corpora and plan into --out")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", **seed)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="run a stage plan")
    p.add_argument("--plan", required=True)
    p.add_argument("--out", default="runs")
    p.add_argument("--init", help="starting checkpoint")
    p.add_argument("--seed", **seed)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("distill", help="cross-modal distillation from captioned inputs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--out")
    p.add_argument("--seed", **seed)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("eval", help="accuracy with voting@k")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--channel", choices=[c.value for c in Channel])
    p.add_argument("--json")
    p.add_argument("--seed", **seed)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="replay-ratio sweep of the caption stage")
    p.add_argument("--plan", required=True)
    p.add_argument("--ratios", default="1:0,1:1,2:1,4:1,5:1")
    p.add_argument("--eval-corpus", required=True)
    p.add_argument("--text-probe", required=True)
    p.add_argument("--json")
    p.add_argument("--seed", **seed)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("score", help="score model outputs with the verifiable rewards")
    p.add_argument("--input", default="-")
    p.add_argument("--out")
    p.set_defaults(func=cmd_score)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if getattr(args, "seed", 0) is None:
            args.seed = _default_seed()
        if getattr(args, "k", 1) < 1 or getattr(args, "n", 1) < 1:
            raise UsageError("--k and --n must be >= 1")
        args.func(args)
    except UsageError as e:
        print(f"msrl: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except PlanError as e:
        print(f"msrl: plan error: {e}", file=sys.stderr)
        return EXIT_PLAN
    except (CorpusError, OSError, ValueError) as e:
        print(f"msrl: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteGradient, FloatingPointError) as e:
        print(f"msrl: numerical error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
