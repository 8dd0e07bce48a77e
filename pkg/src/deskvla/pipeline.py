"""High-level orchestration shared by the CLI, the ablation suite and tests."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os

import torch

from .annotator import HTTPLLMClient, TemplateLLMClient, build_dataset
from .config import RunConfig
from .evaluation import success_table
from .inference import ModelPolicy, SamplerConfig
from .model import BackboneConfig, VLAModel, build_vocab, save_checkpoint
from .simenv import ExpertFailed, SimConfig, generate_demo, load_task_bank
from .training import TrainConfig, TrainingData, run_training


def make_llm_client(cfg: RunConfig):
    if cfg.llm.backend == "template":
        return TemplateLLMClient()
    return HTTPLLMClient(cfg.llm.endpoint, cfg.llm.api_key_env)


def load_world(cfg: RunConfig):
    """(class extents, all tasks, id tasks, sim config)."""
    classes, tasks = load_task_bank(cfg.data.task_bank or None)
    if cfg.data.task_names:
        tasks_sel = [t for t in tasks if t.name in cfg.data.task_names]
        missing = set(cfg.data.task_names) - {t.name for t in tasks_sel}
        if missing:
            raise ValueError(f"unknown task names: {sorted(missing)}")
    else:
        tasks_sel = [t for t in tasks if not t.ood]
    return classes, tasks, tasks_sel, cfg.simenv


def resolve_model_config(cfg: RunConfig, n_classes: int) -> BackboneConfig:
    """Model grid fields follow the simulator config; everything else is as given."""
    return dataclasses.replace(
        cfg.model,
        grid_size=cfg.simenv.grid_size,
        grid_channels=cfg.simenv.num_channels(n_classes),
    )


def build_model(cfg: RunConfig, seed: int = None) -> VLAModel:
    classes, tasks, _, _ = load_world(cfg)
    mc = resolve_model_config(cfg, len(classes))
    if seed is not None:
        mc = dataclasses.replace(mc, seed=seed)
    return VLAModel(mc, build_vocab(tasks))


def gen_demos(cfg: RunConfig):
    """Expert demonstrations for every selected task; failed seeds are skipped.

    Returns (records, manifest dict). Deterministic given the config.
    """
    classes, _, tasks_sel, sim = load_world(cfg)
    records, per_task = [], {}
    for task in tasks_sel:
        seeds, skipped = [], []
        seed = cfg.data.seed_start
        while len(seeds) < cfg.data.demos_per_task:
            try:
                records.append(generate_demo(task, seed, classes, sim))
                seeds.append(seed)
            except ExpertFailed:
                skipped.append(seed)
            seed += 1
        per_task[task.name] = {"seeds": seeds, "skipped": skipped}
    manifest = {
        "schema_version": 1,
        "count": len(records),
        "per_task": per_task,
    }
    return records, manifest


def annotate_demos(cfg: RunConfig, records, omit=()):
    classes, tasks, _, _ = load_world(cfg)
    formats = tuple(f for f in cfg.data.formats if f not in omit)
    if not formats:
        raise ValueError("all formats omitted")
    client = make_llm_client(cfg)
    return build_dataset(
        records, {t.name: t for t in tasks}, set(formats), client,
        horizon=cfg.data.horizon, deadband=cfg.simenv.deadband,
        workers=cfg.data.workers)


def train_full(cfg: RunConfig, data: TrainingData, seed: int = None,
               omit_formats=None, finetune_mode=None, log_dir=None):
    """Stage 1 then stage 2 on one model; returns the trained model."""
    torch.set_num_threads(cfg.num_threads)
    model = build_model(cfg, seed=seed)
    s1 = cfg.stage1 if seed is None else dataclasses.replace(cfg.stage1, seed=seed)
    s2 = cfg.stage2 if seed is None else dataclasses.replace(cfg.stage2, seed=seed)
    if omit_formats is not None:
        s1 = dataclasses.replace(s1, omit_formats=tuple(omit_formats))
    if finetune_mode is not None:
        s2 = dataclasses.replace(s2, finetune_mode=finetune_mode)
    log1 = run_training(s1, data, model,
                        log_path=_log_path(log_dir, "stage1", seed))
    log2 = run_training(s2, data, model, stage1_done=True,
                        log_path=_log_path(log_dir, "stage2", seed))
    return model, log1 + log2


def _log_path(log_dir, stage, seed):
    if log_dir is None:
        return None
    return os.path.join(log_dir, f"loss_{stage}_seed{seed}.csv")


def make_policy(cfg: RunConfig, model: VLAModel, mode: str = "compact") -> ModelPolicy:
    classes, _, _, sim = load_world(cfg)
    return ModelPolicy(model, cfg.sampler, mode=mode,
                       execute_horizon=cfg.eval.execute_horizon,
                       classes=classes, sim_cfg=sim)


def evaluate_model(cfg: RunConfig, model: VLAModel, conditions=None, tasks=None,
                   trials=None):
    classes, _, tasks_sel, sim = load_world(cfg)
    policy = make_policy(cfg, model)
    return success_table(
        policy,
        tasks if tasks is not None else tasks_sel,
        conditions if conditions is not None else cfg.eval.conditions,
        trials if trials is not None else cfg.eval.trials,
        classes, sim, cfg.eval.max_steps, cfg.eval.seed_base)


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for blk in iter(lambda: f.read(1 << 20), b""):
            h.update(blk)
    return h.hexdigest()
