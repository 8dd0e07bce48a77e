"""Command-line entry points for the desk-scale manipulation pipeline.

Every command takes a YAML run configuration and an output directory, echoes
the fully-resolved config plus SHA-256 hashes of its input and output files
into that directory, and exits non-zero with a diagnostic on any failure.

Typical end-to-end run:

    deskvla gen-data  --config cfg.yaml --out out/run
    deskvla annotate  --config cfg.yaml --out out/run
    deskvla train     --config cfg.yaml --out out/run --stage both
    deskvla eval      --config cfg.yaml --out out/run --checkpoint out/run/ckpt/stage2.ckpt
    deskvla latency   --config cfg.yaml --out out/run --checkpoint out/run/ckpt/stage2.ckpt
    deskvla ablate    --config cfg.yaml --out out/run
    deskvla inspect out/run/ckpt/stage2.ckpt
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import pipeline
from .annotator import load_dataset, save_dataset
from .config import ConfigError, load_config, resolved_yaml
from .evaluation import (ablation_suite, check_split_hygiene, latency_report,
                         write_trace)
from .model import load_checkpoint, save_checkpoint
from .simenv import load_trajectories, reset_scene, save_trajectories
from .training import MissingStage1Checkpoint, TrainingData, run_training


class CliError(RuntimeError):
    """A user-facing failure: printed to stderr, exit code 1."""


# ---------------------------------------------------------------------------
# Run-directory helpers
# ---------------------------------------------------------------------------

def _ensure_dirs(out):
    for sub in ("", "data", "ckpt", "tables", "traces"):
        os.makedirs(os.path.join(out, sub), exist_ok=True)


def _echo_config(cfg, out):
    path = os.path.join(out, "config.resolved.yaml")
    with open(path, "w") as f:
        f.write(resolved_yaml(cfg))
    return path


def _record_hashes(out, command, paths):
    """Append content hashes for this command to out/hashes.json."""
    index_path = os.path.join(out, "hashes.json")
    index = {}
    if os.path.exists(index_path):
        with open(index_path) as f:
            index = json.load(f)
    index[command] = {
        os.path.relpath(p, out): pipeline.file_sha256(p)
        for p in paths if os.path.exists(p)
    }
    with open(index_path, "w") as f:
        json.dump(index, f, indent=2, sort_keys=True)


def _load_cfg(args):
    try:
        return load_config(args.config)
    except (ConfigError, OSError) as e:
        raise CliError(f"config error: {e}") from e


def _demos_path(args, out):
    return args.demos or os.path.join(out, "data", "demos.jsonl")


def _dataset_path(args, out):
    return args.dataset or os.path.join(out, "data", "dataset.jsonl")


def _load_training_data(cfg, demos_path, dataset_path):
    classes, _, _, sim = pipeline.load_world(cfg)
    for p in (demos_path, dataset_path):
        if not os.path.exists(p):
            raise CliError(f"missing input file {p} (run gen-data/annotate first)")
    records = load_trajectories(demos_path, classes, sim)
    samples = load_dataset(dataset_path)
    return TrainingData(samples, records)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args):
    cfg = _load_cfg(args)
    _ensure_dirs(args.out)
    echo = _echo_config(cfg, args.out)
    classes, _, _, sim = pipeline.load_world(cfg)
    records, manifest = pipeline.gen_demos(cfg)
    demos_path = _demos_path(args, args.out)
    save_trajectories(demos_path, records, classes, sim)
    manifest_path = os.path.join(args.out, "data", "demos.manifest.json")
    with open(manifest_path, "w") as f:
        json.dump(manifest, f, indent=2)
    _record_hashes(args.out, "gen-data", [echo, demos_path, manifest_path])
    print(f"wrote {manifest['count']} demonstrations to {demos_path}")
    for name, info in manifest["per_task"].items():
        print(f"  {name}: {len(info['seeds'])} demos, {len(info['skipped'])} seeds skipped")
    return 0


def cmd_annotate(args):
    cfg = _load_cfg(args)
    _ensure_dirs(args.out)
    echo = _echo_config(cfg, args.out)
    classes, tasks, _, sim = pipeline.load_world(cfg)
    demos_path = _demos_path(args, args.out)
    if not os.path.exists(demos_path):
        raise CliError(f"missing demonstrations file {demos_path} (run gen-data first)")
    records = load_trajectories(demos_path, classes, sim)
    samples = pipeline.annotate_demos(cfg, records, omit=tuple(args.omit))
    violations = check_split_hygiene(samples, tasks)
    if violations:
        raise CliError(f"held-out instructions leaked into training data: {violations[:3]}")
    dataset_path = _dataset_path(args, args.out)
    save_dataset(dataset_path, samples)
    _record_hashes(args.out, "annotate", [echo, demos_path, dataset_path])
    by_fmt = {}
    for s in samples:
        by_fmt[s.format] = by_fmt.get(s.format, 0) + 1
    print(f"wrote {len(samples)} reasoning samples to {dataset_path}")
    for fmt, n in sorted(by_fmt.items()):
        print(f"  {fmt}: {n}")
    return 0


def cmd_train(args):
    cfg = _load_cfg(args)
    _ensure_dirs(args.out)
    echo = _echo_config(cfg, args.out)
    import torch

    torch.set_num_threads(cfg.num_threads)
    demos_path = _demos_path(args, args.out)
    dataset_path = _dataset_path(args, args.out)
    data = _load_training_data(cfg, demos_path, dataset_path)
    outputs = [echo, demos_path, dataset_path]

    stages = ("stage1", "stage2") if args.stage == "both" else (args.stage,)
    stage1_done = False
    if args.init:
        model, init_stage, _ = load_checkpoint(args.init)
        stage1_done = init_stage in ("stage1", "stage2")
    elif stages[0] == "stage2":
        raise CliError("stage2 requires --init with a stage-1 checkpoint "
                       "(or use --stage both)")
    else:
        model = pipeline.build_model(cfg, seed=args.seed)

    for stage in stages:
        scfg = getattr(cfg, stage)
        if args.seed is not None:
            scfg = dataclasses.replace(scfg, seed=args.seed)
        log_path = os.path.join(args.out, "tables", f"loss_{stage}.csv")
        try:
            run_training(scfg, data, model, stage1_done=stage1_done,
                         log_path=log_path)
        except MissingStage1Checkpoint as e:
            raise CliError(str(e)) from e
        stage1_done = True
        ckpt_path = os.path.join(args.out, "ckpt", f"{stage}.ckpt")
        save_checkpoint(ckpt_path, model, stage,
                        extra={"seed": args.seed, "config_echo": "config.resolved.yaml"})
        outputs += [log_path, ckpt_path]
        print(f"{stage} complete -> {ckpt_path}")

    _record_hashes(args.out, "train", outputs)
    return 0


def _load_eval_model(args):
    if not os.path.exists(args.checkpoint):
        raise CliError(f"missing checkpoint {args.checkpoint}")
    model, stage, _ = load_checkpoint(args.checkpoint)
    if stage != "stage2":
        raise CliError(f"checkpoint {args.checkpoint} is {stage!r}; evaluation "
                       "needs a stage-2 (action) checkpoint")
    return model


def cmd_eval(args):
    cfg = _load_cfg(args)
    _ensure_dirs(args.out)
    echo = _echo_config(cfg, args.out)
    model = _load_eval_model(args)
    table = pipeline.evaluate_model(cfg, model)
    csv_path = os.path.join(args.out, "tables", "success.csv")
    with open(csv_path, "w") as f:
        f.write(table.to_csv())
    print(table.to_text())
    outputs = [echo, args.checkpoint, csv_path]
    if args.trace:
        classes, _, tasks_sel, sim = pipeline.load_world(cfg)
        policy = pipeline.make_policy(cfg, model)
        for task in tasks_sel[: args.trace]:
            trace_path = os.path.join(args.out, "traces", f"{task.name}.jsonl")
            write_trace(trace_path, policy, task, task.direct_instruction,
                        cfg.eval.seed_base, classes, sim, cfg.eval.max_steps)
            outputs.append(trace_path)
        print(f"wrote {min(args.trace, len(tasks_sel))} rollout traces")
    _record_hashes(args.out, "eval", outputs)
    return 0


def cmd_ablate(args):
    cfg = _load_cfg(args)
    _ensure_dirs(args.out)
    echo = _echo_config(cfg, args.out)
    demos_path = _demos_path(args, args.out)
    dataset_path = _dataset_path(args, args.out)
    data = _load_training_data(cfg, demos_path, dataset_path)
    seeds = tuple(args.seeds)
    pretrain, finetune = ablation_suite(cfg, data, training_seeds=seeds)
    pre_path = os.path.join(args.out, "tables", "ablation_pretrain_data.csv")
    fin_path = os.path.join(args.out, "tables", "ablation_finetune_mode.csv")
    with open(pre_path, "w") as f:
        f.write(pretrain.to_csv())
    with open(fin_path, "w") as f:
        f.write(finetune.to_csv())
    print("pretraining-data ablation:")
    print(pretrain.to_text())
    print("fine-tuning-mode comparison:")
    print(finetune.to_text())
    _record_hashes(args.out, "ablate", [echo, pre_path, fin_path])
    return 0


def cmd_latency(args):
    cfg = _load_cfg(args)
    _ensure_dirs(args.out)
    echo = _echo_config(cfg, args.out)
    model = _load_eval_model(args)
    import torch

    torch.set_num_threads(cfg.num_threads)
    classes, _, tasks_sel, sim = pipeline.load_world(cfg)
    states = []
    for i in range(cfg.eval.latency_states):
        task = tasks_sel[i % len(tasks_sel)]
        scene = reset_scene(task, cfg.eval.seed_base + i, classes, sim)
        instr = task.intention_instructions[i % len(task.intention_instructions)]
        states.append((scene, instr))
    report = latency_report(model, states, cfg.sampler, classes, sim)
    report_path = os.path.join(args.out, "tables", "latency.json")
    with open(report_path, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
    for mode, stats in report.items():
        print(f"{mode}: mean {stats['mean_seconds'] * 1e3:.1f} ms, "
              f"median {stats['median_seconds'] * 1e3:.1f} ms, "
              f"mean tokens {stats['mean_tokens']:.1f}")
    _record_hashes(args.out, "latency", [echo, args.checkpoint, report_path])
    return 0


def cmd_inspect(args):
    path = args.path
    if not os.path.exists(path):
        raise CliError(f"no such file {path}")
    if path.endswith(".ckpt"):
        model, stage, extra = load_checkpoint(path)
        n_params = sum(int(np.prod(t.shape)) for t in model.named_tensors().values())
        print(f"checkpoint {path}")
        print(f"  stage: {stage}")
        print(f"  parameters: {n_params}")
        print(f"  vocab size: {len(model.vocab.words)}")
        print(f"  config: {json.dumps(dataclasses.asdict(model.cfg))}")
        if extra:
            print(f"  extra: {json.dumps(extra)}")
        return 0
    if path.endswith(".jsonl"):
        with open(path) as f:
            records = [json.loads(line) for line in f]
        if records and "reasoning_text" in records[0]:
            # rollout trace: reasoning alongside actions, one step per line
            for r in records:
                act = " ".join(f"{v:+.3f}" for v in r["action"])
                print(f"step {r['step']:3d}  [{act}]  {r['reasoning_text']}")
            return 0
        print(f"jsonl {path}: {len(records)} lines")
        if records:
            print(f"  first record keys: {sorted(records[0].keys())}")
        return 0
    if path.endswith((".json", ".yaml", ".csv")):
        with open(path) as f:
            sys.stdout.write(f.read())
        return 0
    raise CliError(f"don't know how to inspect {path}")


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="deskvla", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, needs_out=True):
        sp.add_argument("--config", default=None,
                        help="YAML run config (defaults apply when omitted)")
        if needs_out:
            sp.add_argument("--out", required=True, help="run output directory")

    sp = sub.add_parser("gen-data", help="generate expert demonstrations")
    common(sp)
    sp.add_argument("--demos", default=None, help="override demos output path")
    sp.set_defaults(fn=cmd_gen_data)

    sp = sub.add_parser("annotate", help="build the reasoning dataset from demos")
    common(sp)
    sp.add_argument("--demos", default=None)
    sp.add_argument("--dataset", default=None, help="override dataset output path")
    sp.add_argument("--omit", nargs="*", default=[],
                    choices=["intention", "spatial", "compact"],
                    help="reasoning formats to leave out")
    sp.set_defaults(fn=cmd_annotate)

    sp = sub.add_parser("train", help="run the two-stage training curriculum")
    common(sp)
    sp.add_argument("--demos", default=None)
    sp.add_argument("--dataset", default=None)
    sp.add_argument("--stage", choices=["stage1", "stage2", "both"], default="both")
    sp.add_argument("--init", default=None, help="checkpoint to start from")
    sp.add_argument("--seed", type=int, default=None,
                    help="override the training seed for both stages")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="closed-loop success-rate evaluation")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--trace", type=int, default=0,
                    help="also write rollout traces for the first N tasks")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("ablate", help="pretraining-data and fine-tuning ablations")
    common(sp)
    sp.add_argument("--demos", default=None)
    sp.add_argument("--dataset", default=None)
    sp.add_argument("--seeds", type=int, nargs="+", default=[0])
    sp.set_defaults(fn=cmd_ablate)

    sp = sub.add_parser("latency", help="reasoning-mode latency comparison")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.set_defaults(fn=cmd_latency)

    sp = sub.add_parser("inspect", help="summarize a checkpoint or data file")
    sp.add_argument("path")
    sp.set_defaults(fn=cmd_inspect)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (ValueError, RuntimeError, OSError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
