"""Benchmark harness: routed pipeline vs the staged agent baseline.

Runs the same rendered test prompts through both systems, recording latency
(after warmup), token totals, a deterministic multiply-accumulate op-count
proxy, success at the configured tolerance, and end-to-end MSE. Emits raw
per-request CSV rows and a markdown summary with reduction percentages.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .agent import AgentPipeline, decompose_tokens, total_tokens
from .backbone import OpCounter
from .checkpoint import sha256_file
from .config import RunConfig, subseed
from .datagen import DatasetSplit
from .inference import RoutedPipeline, count_lm_digit_events, extract_answer
from .templates import TemplateSet, build_stage_datasets
from .tokenizer import BOS, CANONICAL_NUMBER_RE, format_number

WALLCLOCK_COLUMNS = {"latency_sec"}

CSV_COLUMNS = ["system", "task", "request", "success", "answer", "oracle",
               "abs_error", "prompt_tokens", "completion_tokens", "total_tokens",
               "op_macs", "latency_sec", "inserted_exact", "refined",
               "lm_digit_violations", "parse_status"]


def compute_success(answer: float | None, oracle: float,
                    relative: float = 0.01, floor: float = 1e-3) -> bool:
    """Pass iff |answer - oracle| <= max(relative*|oracle|, floor); None fails."""
    if answer is None or not np.isfinite(oracle):
        return False
    return abs(answer - oracle) <= max(relative * abs(oracle), floor)


def latency_stats(durations: list[float]) -> tuple[float, float, float]:
    """(max, min, avg) over measured durations; warmups must not be included."""
    if not durations:
        raise ValueError("no durations to summarize")
    arr = np.asarray(durations, dtype=np.float64)
    return float(arr.max()), float(arr.min()), float(arr.mean())


def reduction(baseline: float, ours: float) -> float:
    """(baseline - ours) / baseline."""
    if baseline == 0:
        raise ValueError("baseline metric is zero")
    return (baseline - ours) / baseline


@dataclass
class BenchResult:
    rows: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    csv_path: Path | None = None
    md_path: Path | None = None


def _bench_prompts(cfg: RunConfig, splits: dict[str, DatasetSplit],
                   templates: dict[str, TemplateSet], task: str):
    n = cfg.get_int("bench.requests")
    rendered, _ = build_stage_datasets(splits[task].test, templates[task],
                                       seed=subseed(cfg.get_int("seed"), f"bench:{task}"))
    if len(rendered) < n:
        raise ValueError(f"task {task}: test split smaller than bench.requests")
    return rendered[:n]


def _routed_request(pipe: RoutedPipeline, templates: TemplateSet, text, cfg: RunConfig):
    counter = OpCounter()
    t0 = time.perf_counter()
    out_text, trace = pipe.generate(text.prompt, max_len=cfg.get_int("bench.max_len"),
                                    mode=cfg.get("decode.mode"), counter=counter)
    latency = time.perf_counter() - t0
    answer = extract_answer(out_text, templates)
    prompt_tokens = 1 + len(pipe.vocab.encode(text.prompt))
    completion = sum(len(e["token_ids"]) if e["type"] == "expert" else 1
                     for e in trace.events)
    experts = trace.expert_events()
    exact = all(e["inserted"] == format_number(e["raw_value"])
                and pipe.vocab.decode(e["token_ids"]) == e["inserted"]
                for e in experts)
    refined = bool(experts) and all(e["refined"] for e in experts)
    return {
        "answer": answer,
        "oracle": text.sample.y,
        "latency_sec": latency,
        "prompt_tokens": prompt_tokens,
        "completion_tokens": completion,
        "total_tokens": prompt_tokens + completion,
        "op_macs": counter.macs,
        "inserted_exact": int(exact),
        "refined": int(refined),
        "lm_digit_violations": count_lm_digit_events(trace, pipe.vocab),
        "parse_status": "",
        "trace": trace,
    }


def _agent_request(agent: AgentPipeline, text, cfg: RunConfig):
    counter = OpCounter()
    t0 = time.perf_counter()
    answer_text, records, tool_call = agent.run(text.prompt, counter=counter)
    latency = time.perf_counter() - t0
    m = CANONICAL_NUMBER_RE.search(answer_text)
    answer = float(m.group()) if m else None
    return {
        "answer": answer,
        "oracle": text.sample.y,
        "latency_sec": latency,
        "prompt_tokens": sum(r.prompt_tokens for r in records),
        "completion_tokens": sum(r.completion_tokens for r in records),
        "total_tokens": total_tokens(records),
        "op_macs": counter.macs,
        "inserted_exact": "",
        "refined": "",
        "lm_digit_violations": "",
        "parse_status": tool_call.parse_status,
        "records": records,
    }


def run_bench(cfg: RunConfig, pipe: RoutedPipeline, splits: dict[str, DatasetSplit],
              templates: dict[str, TemplateSet], out: Path | None = None,
              log: bool = False) -> BenchResult:
    """N requests per system per task; writes CSV rows and a markdown summary."""
    pipe.verify_hashes()
    agent = AgentPipeline(pipe.backbone, pipe.vocab, pipe.expert_set, pipe.aligner,
                          max_new_tokens=cfg.get_int("bench.agent_max_new"))
    relative = cfg.get_float("success.relative")
    floor = cfg.get_float("success.floor")
    warmup = cfg.get_int("bench.warmup")
    result = BenchResult()
    per_system_task: dict[tuple[str, str], list[dict]] = {}
    stage_decomposition: dict[str, dict] = {}

    for task in cfg.get_list("tasks"):
        prompts = _bench_prompts(cfg, splits, templates, task)
        for system in ("routed", "agent"):
            runner = (lambda t: _routed_request(pipe, templates[task], t, cfg)) \
                if system == "routed" else (lambda t: _agent_request(agent, t, cfg))
            for w in range(min(warmup, len(prompts))):
                runner(prompts[w])
            rows = []
            agent_records = []
            for i, text in enumerate(prompts):
                r = runner(text)
                r.update(system=system, task=task, request=i,
                         success=int(compute_success(r["answer"], r["oracle"],
                                                     relative, floor)),
                         abs_error="" if r["answer"] is None
                         else abs(r["answer"] - r["oracle"]))
                if system == "agent":
                    agent_records.extend(r.pop("records"))
                r.pop("trace", None)
                rows.append(r)
            per_system_task[(system, task)] = rows
            result.rows.extend(rows)
            if system == "agent":
                stage_decomposition[task] = decompose_tokens(agent_records)
            if log:
                srate = np.mean([r["success"] for r in rows])
                print(f"bench {system}/{task}: success {srate:.3f}, "
                      f"avg tokens {np.mean([r['total_tokens'] for r in rows]):.0f}",
                      flush=True)

    summary: dict = {"tasks": {}, "tolerance": {"relative": relative, "floor": floor},
                     "seed": cfg.get_int("seed"), "config_digest": cfg.digest(),
                     "checkpoint_hashes": pipe.component_hashes(),
                     "stage_token_decomposition": stage_decomposition,
                     "requests": cfg.get_int("bench.requests"), "warmup": warmup}
    for task in cfg.get_list("tasks"):
        t_sum: dict = {}
        for system in ("routed", "agent"):
            rows = per_system_task[(system, task)]
            lat = latency_stats([r["latency_sec"] for r in rows])
            answered = [r for r in rows if r["answer"] != "" and r["answer"] is not None]
            mse = (float(np.mean([(r["answer"] - r["oracle"]) ** 2 for r in answered]))
                   if answered else None)
            t_sum[system] = {
                "latency_max": lat[0], "latency_min": lat[1], "latency_avg": lat[2],
                "tokens_avg": float(np.mean([r["total_tokens"] for r in rows])),
                "op_macs_avg": float(np.mean([r["op_macs"] for r in rows])),
                "success_rate": float(np.mean([r["success"] for r in rows])),
                "e2e_mse": mse,
            }
        t_sum["reductions"] = {
            "tokens": reduction(t_sum["agent"]["tokens_avg"],
                                t_sum["routed"]["tokens_avg"]),
            "latency": reduction(t_sum["agent"]["latency_avg"],
                                 t_sum["routed"]["latency_avg"]),
            "op_macs": reduction(t_sum["agent"]["op_macs_avg"],
                                 t_sum["routed"]["op_macs_avg"]),
        }
        summary["tasks"][task] = t_sum
    result.summary = summary

    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        result.csv_path = out / "bench.csv"
        with open(result.csv_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
            writer.writeheader()
            for row in result.rows:
                writer.writerow({k: row.get(k, "") for k in CSV_COLUMNS})
        data_dir = Path(cfg.get("out_dir")) / "data"
        dataset_hashes = {}
        for task in cfg.get_list("tasks"):
            for suffix in (".train.jsonl", ".test.jsonl"):
                f = data_dir / f"{task}{suffix}"
                if f.exists():
                    dataset_hashes[f.name] = sha256_file(f)
        summary["dataset_hashes"] = dataset_hashes
        result.md_path = out / "bench.md"
        result.md_path.write_text(render_markdown(summary))
        (out / "bench_summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    return result


def render_markdown(summary: dict) -> str:
    """Human-readable report mirroring the per-task Max/Min/Avg latency layout."""
    lines = ["# Benchmark report", ""]
    lines.append(f"- seed: {summary['seed']}")
    lines.append(f"- config digest: {summary['config_digest']}")
    lines.append(f"- requests per system per task: {summary['requests']} "
                 f"(after {summary['warmup']} warmup)")
    tol = summary["tolerance"]
    lines.append(f"- success tolerance: relative {tol['relative']}, "
                 f"absolute floor {tol['floor']}")
    lines.append("")
    for task, t_sum in summary["tasks"].items():
        lines.append(f"## Task: {task}")
        lines.append("")
        lines.append("| latency (s) | routed | agent |")
        lines.append("|---|---|---|")
        for key in ("max", "min", "avg"):
            lines.append(f"| {key.capitalize()} | "
                         f"{t_sum['routed'][f'latency_{key}']:.4f} | "
                         f"{t_sum['agent'][f'latency_{key}']:.4f} |")
        lines.append("")
        lines.append("| metric | routed | agent | reduction |")
        lines.append("|---|---|---|---|")
        red = t_sum["reductions"]
        lines.append(f"| tokens avg | {t_sum['routed']['tokens_avg']:.1f} | "
                     f"{t_sum['agent']['tokens_avg']:.1f} | {red['tokens']:.1%} |")
        lines.append(f"| op-count proxy (MACs) | {t_sum['routed']['op_macs_avg']:.3e} | "
                     f"{t_sum['agent']['op_macs_avg']:.3e} | {red['op_macs']:.1%} |")
        lines.append(f"| latency avg (s) | {t_sum['routed']['latency_avg']:.4f} | "
                     f"{t_sum['agent']['latency_avg']:.4f} | {red['latency']:.1%} |")
        routed_mse = t_sum["routed"]["e2e_mse"]
        agent_mse = t_sum["agent"]["e2e_mse"]
        lines.append(f"| success rate | {t_sum['routed']['success_rate']:.3f} | "
                     f"{t_sum['agent']['success_rate']:.3f} | |")
        lines.append(f"| end-to-end MSE | "
                     f"{routed_mse if routed_mse is None else f'{routed_mse:.3e}'} | "
                     f"{agent_mse if agent_mse is None else f'{agent_mse:.3e}'} | |")
        lines.append("")
        lines.append("External finetuned-model MSE columns are comparison slots "
                     "filled from other systems, not computed here.")
        lines.append("")
    if summary.get("stage_token_decomposition"):
        lines.append("## Agent stage token decomposition")
        lines.append("")
        for task, dec in summary["stage_token_decomposition"].items():
            lines.append(f"- {task}: " + ", ".join(
                f"{stage} {dec['shares'][stage]:.1%}" for stage in dec["shares"]))
        lines.append("")
    lines.append("## Checkpoint hashes")
    lines.append("")
    for name, digest in summary["checkpoint_hashes"].items():
        lines.append(f"- {name}: {digest}")
    if summary.get("dataset_hashes"):
        lines.append("")
        lines.append("## Dataset hashes")
        lines.append("")
        for name, digest in summary["dataset_hashes"].items():
            lines.append(f"- {name}: {digest}")
    lines.append("")
    return "\n".join(lines)
