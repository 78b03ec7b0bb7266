"""Command-line entry points for the staged pipeline and benchmark harness."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .bench import render_markdown, run_bench
from .config import RunConfig
from .inference import GenerationTrace
from . import pipeline as pl


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="routedlm",
        description="Token-routed language model with frozen numeric experts")
    parser.add_argument("--config", help="flat key-value config file")
    parser.add_argument("--seed", type=int, help="override the run seed")
    parser.add_argument("--out-dir", help="override the run output directory")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", help="generate and serialize both task datasets")
    sub.add_parser("train-lm", help="train the backbone language model")
    sub.add_parser("train-expert", help="train and freeze every configured expert")
    sub.add_parser("train-text2comp", help="train the text-to-computation aligner")
    sub.add_parser("train-router", help="train the token router")
    infer = sub.add_parser("infer", help="routed generation for one prompt")
    infer.add_argument("--prompt", required=True)
    infer.add_argument("--max-len", type=int, default=256)
    infer.add_argument("--mode", default=None, choices=["greedy", "sample"])
    infer.add_argument("--temperature", type=float, default=1.0)
    infer.add_argument("--trace-out", help="write the generation trace as JSONL")
    sub.add_parser("bench", help="run the benchmark against the agent baseline")
    report = sub.add_parser("report", help="re-render the markdown benchmark summary")
    report.add_argument("--summary", help="bench_summary.json path (default: run dir)")
    return parser


def _load_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig({})
    if args.seed is not None:
        cfg.override("seed", str(args.seed))
    if args.out_dir is not None:
        cfg.override("out_dir", args.out_dir)
    return cfg


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    cfg = _load_config(args)
    log = True

    if args.command == "gen-data":
        pl.stage_gen_data(cfg, log=log)
        print(f"datasets written under {pl.out_dir(cfg) / 'data'}")
        return 0

    if args.command == "train-lm":
        splits = pl.load_data(cfg)
        model, _ = pl.stage_train_lm(cfg, splits, log=log)
        print(f"backbone checkpoint: {pl.out_dir(cfg) / 'checkpoints' / 'backbone'}.json "
              f"(hash {model.content_hash()[:12]})")
        return 0

    if args.command == "train-expert":
        splits = pl.load_data(cfg)
        eset = pl.stage_train_experts(cfg, splits, log=log)
        print(f"registered experts: {eset.ids}")
        return 0

    if args.command == "train-text2comp":
        splits = pl.load_data(cfg)
        backbone, vocab, eset = _load_frozen_stack(cfg)
        pl.stage_train_aligner(cfg, splits, backbone, vocab, eset, log=log)
        print("aligner checkpoint written")
        return 0

    if args.command == "train-router":
        splits = pl.load_data(cfg)
        backbone, vocab, eset = _load_frozen_stack(cfg)
        pl.stage_train_router(cfg, splits, backbone, vocab, eset, log=log)
        print("router checkpoint written")
        return 0

    if args.command == "infer":
        pipe = pl.load_pipeline(cfg)
        mode = args.mode or cfg.get("decode.mode")
        text, trace = pipe.generate(args.prompt, max_len=args.max_len, mode=mode,
                                    temperature=args.temperature)
        print(text)
        if args.trace_out:
            trace.write_jsonl(args.trace_out)
            print(f"trace: {args.trace_out}", file=sys.stderr)
        return 0

    if args.command == "bench":
        pipe = pl.load_pipeline(cfg)
        splits = pl.load_data(cfg)
        templates = {t: pl.load_templates(cfg, t) for t in cfg.get_list("tasks")}
        out = pl.out_dir(cfg) / "reports"
        result = run_bench(cfg, pipe, splits, templates, out=out, log=log)
        print(f"bench CSV: {result.csv_path}")
        print(f"bench summary: {result.md_path}")
        return 0

    if args.command == "report":
        summary_path = Path(args.summary) if args.summary \
            else pl.out_dir(cfg) / "reports" / "bench_summary.json"
        summary = json.loads(summary_path.read_text())
        md = render_markdown(summary)
        md_path = summary_path.with_name("bench.md")
        md_path.write_text(md)
        print(md)
        return 0

    raise AssertionError(f"unhandled command {args.command}")


def _load_frozen_stack(cfg: RunConfig):
    from .backbone import TransformerLM
    from .expert import ExpertSet
    from .tokenizer import Vocabulary
    root = pl.out_dir(cfg)
    backbone = TransformerLM.load(root / "checkpoints" / "backbone")
    backbone.freeze()
    vocab = Vocabulary.load(root / "vocab.json")
    eset = ExpertSet.load(root / "checkpoints" / "registry.json")
    return backbone, vocab, eset


if __name__ == "__main__":
    raise SystemExit(main())
