"""Stagewise orchestration: data, backbone, experts, aligner, router.

Every stage derives its seed from the run seed and the stage name, writes its
artifacts under the run directory, and records a JSON report, so two runs with
the same config produce identical datasets and checkpoints.
"""

from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np

from .aligner import (AlignerModel, Stage2Config, cache_prompt_states, extraction_mse,
                      train_head, train_probe, _probe_labels)
from .agent import load_stage_templates
from .backbone import LmConfig, TransformerLM, train_lm
from .config import RunConfig, subseed
from .datagen import DatasetSplit, generate_dataset, read_jsonl, write_jsonl
from .expert import (ExpertSet, ExpertTrainConfig, register_expert, train_expert)
from .inference import RoutedPipeline
from .router import RouterModel, RouterTrainConfig, derive_labels, train_router
from .templates import (TemplateSet, TaskText, build_stage_datasets,
                        load_default_templates, load_template_file)
from .tokenizer import Vocabulary, build_vocab


def out_dir(cfg: RunConfig) -> Path:
    return Path(cfg.get("out_dir"))


def _paths(cfg: RunConfig) -> dict[str, Path]:
    root = out_dir(cfg)
    return {
        "root": root,
        "data": root / "data",
        "ckpt": root / "checkpoints",
        "reports": root / "reports",
        "vocab": root / "vocab.json",
    }


def _write_report(cfg: RunConfig, name: str, payload: dict) -> None:
    p = _paths(cfg)
    p["reports"].mkdir(parents=True, exist_ok=True)
    payload = {"stage": name, "seed": cfg.get_int("seed"),
               "config_digest": cfg.digest(), **payload}
    (p["reports"] / f"{name}.json").write_text(json.dumps(payload, indent=1) + "\n")


def load_templates(cfg: RunConfig, task: str) -> TemplateSet:
    ref = cfg.get(f"templates.{task}")
    if ref == "default":
        return load_default_templates(task)
    return load_template_file(task, ref)


# -- stage: data -------------------------------------------------------------


def stage_gen_data(cfg: RunConfig, log: bool = False) -> dict[str, DatasetSplit]:
    p = _paths(cfg)
    p["data"].mkdir(parents=True, exist_ok=True)
    splits = {}
    for task in cfg.get_list("tasks"):
        sizes = (cfg.get_int(f"data.{task}.train_size"),
                 cfg.get_int(f"data.{task}.test_size"))
        split = generate_dataset(task, sizes=sizes, seed=subseed(cfg.get_int("seed"),
                                                                 f"data:{task}"))
        write_jsonl(split, p["data"] / task)
        splits[task] = split
        if log:
            print(f"gen-data: {task} train={sizes[0]} test={sizes[1]}", flush=True)
    _write_report(cfg, "gen_data", {
        "tasks": cfg.get_list("tasks"),
        "files": {t: str(p["data"] / t) for t in splits},
    })
    return splits


def load_data(cfg: RunConfig) -> dict[str, DatasetSplit]:
    p = _paths(cfg)
    return {task: read_jsonl(p["data"] / task) for task in cfg.get_list("tasks")}


# -- rendered corpora -----------------------------------------------------------


def render_corpora(cfg: RunConfig, splits: dict[str, DatasetSplit]
                   ) -> dict[str, dict[str, list[TaskText]]]:
    """Deterministic template renderings for every training/eval consumer."""
    seed = cfg.get_int("seed")
    need_train = max(cfg.get_int("lm.corpus_per_task"),
                     cfg.get_int("stage2.texts_per_task"),
                     cfg.get_int("router.texts_per_task"))
    need_test = (cfg.get_int("lm.eval_per_task")
                 + cfg.get_int("stage2.val_texts_per_task")
                 + cfg.get_int("router.val_texts_per_task"))
    corpora: dict[str, dict[str, list[TaskText]]] = {}
    for task, split in splits.items():
        templates = load_templates(cfg, task)
        if need_train > len(split.train) or need_test > len(split.test):
            raise ValueError(f"task {task}: splits too small for configured corpora")
        train_texts, _ = build_stage_datasets(split.train[:need_train], templates,
                                              seed=subseed(seed, f"render_train:{task}"))
        test_texts, _ = build_stage_datasets(split.test[:need_test], templates,
                                             seed=subseed(seed, f"render_test:{task}"))
        n_eval = cfg.get_int("lm.eval_per_task")
        n_s2val = cfg.get_int("stage2.val_texts_per_task")
        corpora[task] = {
            "templates": templates,
            "lm": train_texts[:cfg.get_int("lm.corpus_per_task")],
            "stage2": train_texts[:cfg.get_int("stage2.texts_per_task")],
            "router": train_texts[:cfg.get_int("router.texts_per_task")],
            "lm_eval": test_texts[:n_eval],
            "stage2_val": test_texts[n_eval:n_eval + n_s2val],
            "router_val": test_texts[n_eval + n_s2val:
                                     n_eval + n_s2val + cfg.get_int("router.val_texts_per_task")],
        }
    return corpora


def vocab_corpus(cfg: RunConfig, splits: dict[str, DatasetSplit],
                 corpora: dict) -> list[str]:
    """Texts whose tokens the vocabulary must cover: one render per template,
    the LM corpus, and the agent stage preambles."""
    texts: list[str] = []
    for task, split in splits.items():
        templates = corpora[task]["templates"]
        for tid in range(len(templates)):
            texts.append(templates.render(split.train[0], tid).text)
        texts.extend(t.text for t in corpora[task]["lm"])
    stage_templates = load_stage_templates(
        None if cfg.get("templates.agent_stages") == "default"
        else cfg.get("templates.agent_stages"))
    for tpl in stage_templates.values():
        if tpl:
            texts.append(tpl.format(task_text="x", tool_list="a, b", stage1="x",
                                    stage2="x", stage3="x", result="0.0000"))
    return texts


# -- stage: backbone ---------------------------------------------------------------


def stage_train_lm(cfg: RunConfig, splits: dict[str, DatasetSplit],
                   corpora: dict | None = None, log: bool = False
                   ) -> tuple[TransformerLM, Vocabulary]:
    p = _paths(cfg)
    corpora = corpora or render_corpora(cfg, splits)
    vocab = build_vocab(vocab_corpus(cfg, splits, corpora))
    vocab.save(p["vocab"])
    lm_config = LmConfig(vocab_size=len(vocab),
                         layers=cfg.get_int("lm.layers"),
                         heads=cfg.get_int("lm.heads"),
                         dim=cfg.get_int("lm.dim"),
                         context=cfg.get_int("lm.context"),
                         ff_mult=cfg.get_int("lm.ff_mult"))
    corpus_texts = [t for task in corpora.values() for t in task["lm"]]
    eval_texts = [t for task in corpora.values() for t in task["lm_eval"]]
    corpus_ids = [vocab.encode(t.text) for t in corpus_texts]
    eval_ids = [vocab.encode(t.text) for t in eval_texts]
    t0 = time.perf_counter()
    model, history = train_lm(corpus_ids, lm_config,
                              epochs=cfg.get_int("lm.epochs"),
                              seed=subseed(cfg.get_int("seed"), "lm"),
                              lr=cfg.get_float("lm.lr"),
                              batch_size=cfg.get_int("lm.batch_size"),
                              log_every=cfg.get_int("log_every") if log else 0,
                              eval_ids=eval_ids)
    model.freeze()
    p["ckpt"].mkdir(parents=True, exist_ok=True)
    model.save(p["ckpt"] / "backbone", vocab_ref=str(p["vocab"]))
    _write_report(cfg, "train_lm", {
        "duration_sec": time.perf_counter() - t0,
        "vocab_size": len(vocab),
        "corpus_texts": len(corpus_ids),
        "final_train_loss": history["epoch_loss"][-1],
        "final_eval_loss": history["eval_loss"][-1] if history["eval_loss"] else None,
        "epoch_loss": history["epoch_loss"],
        "backbone_hash": model.content_hash(),
    })
    return model, vocab


# -- stage: experts ------------------------------------------------------------------


def stage_train_experts(cfg: RunConfig, splits: dict[str, DatasetSplit],
                        log: bool = False) -> ExpertSet:
    p = _paths(cfg)
    p["ckpt"].mkdir(parents=True, exist_ok=True)
    eset = ExpertSet()
    reports = {}
    for task in cfg.get_list("tasks"):
        tcfg = ExpertTrainConfig(hidden=cfg.get_int("expert.hidden"),
                                 epochs=cfg.get_int(f"expert.{task}.epochs"),
                                 batch_size=cfg.get_int("expert.batch_size"),
                                 lr=cfg.get_float("expert.lr"),
                                 min_delta=cfg.get_float("expert.min_delta"),
                                 patience=cfg.get_int("expert.patience"),
                                 log_every=cfg.get_int("log_every") if log else 0)
        t0 = time.perf_counter()
        model, report = train_expert(splits[task], tcfg,
                                     seed=subseed(cfg.get_int("seed"), f"expert:{task}"))
        report["duration_sec"] = time.perf_counter() - t0
        report["hash"] = model.content_hash()
        reports[task] = report
        register_expert(eset, task, model)
        if log:
            print(f"expert[{task}]: test raw MSE {report['test_mse_raw']:.3e} "
                  f"({report['duration_sec']:.0f}s)", flush=True)
    eset.save(p["ckpt"] / "registry.json", p["ckpt"])
    eset.router_stale = False
    _write_report(cfg, "train_experts", {"experts": reports})
    return eset


# -- stage: aligner --------------------------------------------------------------------


def stage_train_aligner(cfg: RunConfig, splits: dict[str, DatasetSplit],
                        backbone: TransformerLM, vocab: Vocabulary,
                        eset: ExpertSet, corpora: dict | None = None,
                        log: bool = False) -> AlignerModel:
    p = _paths(cfg)
    corpora = corpora or render_corpora(cfg, splits)
    s2cfg = Stage2Config(lam=cfg.get_float("stage2.lambda"),
                         tau=cfg.get_float("stage2.tau"),
                         contrastive=cfg.get_bool("stage2.contrastive"),
                         heads=cfg.get_int("stage2.heads"),
                         epochs=cfg.get_int("stage2.epochs"),
                         batch_size=cfg.get_int("stage2.batch_size"),
                         lr=cfg.get_float("stage2.lr"),
                         probe_epochs=cfg.get_int("stage2.probe_epochs"),
                         refine=cfg.get_bool("stage2.refine"),
                         refine_gate=cfg.get_float("stage2.refine_gate"),
                         max_pos=cfg.get_int("lm.context"),
                         log_every=cfg.get_int("log_every") if log else 0)
    model = AlignerModel(backbone.config.dim, s2cfg,
                         backbone_hash=backbone.content_hash())
    report: dict = {"experts": {}}
    t0 = time.perf_counter()

    # shared character probe over every task's prompt states
    probe_states, probe_masks, probe_labels = [], [], []
    cached: dict[str, tuple] = {}
    for task in cfg.get_list("tasks"):
        texts = corpora[task]["stage2"]
        states, mask = cache_prompt_states(backbone, vocab, texts)
        cached[task] = (texts, states, mask)
        probe_states.append(states)
        probe_masks.append(mask)
        probe_labels.append(_probe_labels(texts, vocab, states.shape[1]))
    T = max(s.shape[1] for s in probe_states)

    def pad_to(arr, fill=0.0):
        out = np.full((arr.shape[0], T) + arr.shape[2:], fill, dtype=arr.dtype)
        out[:, :arr.shape[1]] = arr
        return out

    all_states = np.concatenate([pad_to(s) for s in probe_states])
    all_masks = np.concatenate([pad_to(m) for m in probe_masks])
    all_labels = np.concatenate([pad_to(l, fill=-1) for l in probe_labels])
    probe_acc = train_probe(model, all_states, all_masks, all_labels, s2cfg,
                            seed=subseed(cfg.get_int("seed"), "probe"))
    report["probe_train_accuracy"] = probe_acc
    if log:
        print(f"aligner probe accuracy {probe_acc:.6f}", flush=True)

    for task in cfg.get_list("tasks"):
        texts, states, mask = cached[task]
        stats = splits[task].stats
        targets = np.array([stats.normalize_x(t.sample.x) for t in texts])
        val_texts = corpora[task]["stage2_val"]
        vstates, vmask = cache_prompt_states(backbone, vocab, val_texts)
        vtargets = np.array([stats.normalize_x(t.sample.x) for t in val_texts])
        head_report = train_head(model, task, len(stats.x_mean), stats,
                                 states, mask, targets, s2cfg,
                                 seed=subseed(cfg.get_int("seed"), f"aligner:{task}"),
                                 val=(vstates, vmask, vtargets))
        head_report.pop("train_curve", None)
        report["experts"][task] = head_report
        if log:
            print(f"aligner[{task}] val extraction MSE "
                  f"{head_report.get('val_extraction_mse'):.3e}", flush=True)
    model.freeze()
    model.save(p["ckpt"] / "aligner")
    report["duration_sec"] = time.perf_counter() - t0
    report["aligner_hash"] = model.content_hash()
    _write_report(cfg, "train_aligner", report)
    return model


# -- stage: router --------------------------------------------------------------------


def stage_train_router(cfg: RunConfig, splits: dict[str, DatasetSplit],
                       backbone: TransformerLM, vocab: Vocabulary,
                       eset: ExpertSet, corpora: dict | None = None,
                       log: bool = False):
    p = _paths(cfg)
    corpora = corpora or render_corpora(cfg, splits)
    rcfg = RouterTrainConfig(hidden=cfg.get_int("router.hidden"),
                             epochs=cfg.get_int("router.epochs"),
                             batch_size=cfg.get_int("router.batch_size"),
                             lr=cfg.get_float("router.lr"),
                             log_every=cfg.get_int("log_every") if log else 0)
    train_sets, val_sets = [], []
    for task in cfg.get_list("tasks"):
        train_sets.extend(derive_labels(t, vocab, eset) for t in corpora[task]["router"])
        val_sets.extend(derive_labels(t, vocab, eset) for t in corpora[task]["router_val"])
    t0 = time.perf_counter()
    model, report = train_router(backbone, vocab, eset, train_sets, rcfg,
                                 seed=subseed(cfg.get_int("seed"), "router"),
                                 val_label_sets=val_sets)
    model.backbone_hash = backbone.content_hash()
    model.save(p["ckpt"] / "router")
    report["duration_sec"] = time.perf_counter() - t0
    report["router_hash"] = model.content_hash()
    _write_report(cfg, "train_router", report)
    if log:
        print(f"router val: {report['val']}", flush=True)
    return model


# -- assembly ------------------------------------------------------------------------


def load_pipeline(cfg: RunConfig) -> RoutedPipeline:
    p = _paths(cfg)
    backbone = TransformerLM.load(p["ckpt"] / "backbone")
    backbone.freeze()
    vocab = Vocabulary.load(p["vocab"])
    eset = ExpertSet.load(p["ckpt"] / "registry.json")
    aligner = AlignerModel.load(p["ckpt"] / "aligner")
    router = RouterModel.load(p["ckpt"] / "router",
                              expected_registry_hash=eset.registry_hash())
    return RoutedPipeline(backbone, vocab, eset, aligner, router)


def run_all(cfg: RunConfig, log: bool = False) -> RoutedPipeline:
    splits = stage_gen_data(cfg, log=log)
    corpora = render_corpora(cfg, splits)
    backbone, vocab = stage_train_lm(cfg, splits, corpora, log=log)
    eset = stage_train_experts(cfg, splits, log=log)
    stage_train_aligner(cfg, splits, backbone, vocab, eset, corpora, log=log)
    stage_train_router(cfg, splits, backbone, vocab, eset, corpora, log=log)
    return load_pipeline(cfg)
