"""Rollout harness: success-rate tables, ablations and latency comparison."""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .inference import ModelPolicy, SamplerConfig, policy_step
from .simenv import (
    Observation,
    SimConfig,
    TaskSpec,
    expert_action,
    is_success,
    perturb_goal,
    render,
    reset_scene,
    step,
)

CONDITIONS = ("direct", "intention", "unseen-intention", "moving-goal")


@dataclass(frozen=True)
class EpisodeResult:
    task: str
    condition: str
    seed: int
    success: bool
    steps_used: int
    failure_reason: Optional[str]
    mean_step_latency: float
    reasonings: tuple = ()

    def __post_init__(self):
        if self.success and self.failure_reason is not None:
            raise ValueError("failure reason only on failures")
        if not self.success and self.failure_reason is None:
            raise ValueError("failures must carry a reason tag")


@dataclass
class EvalTable:
    """Rows of (task, condition) -> success percentage over seeded trials."""

    rows: list  # list of dicts: task, condition, success_pct, trials, seeds

    def with_average(self) -> "EvalTable":
        if any(r["task"] == "average" for r in self.rows):
            return self
        by_cond = {}
        for r in self.rows:
            by_cond.setdefault(r["condition"], []).append(r["success_pct"])
        avg_rows = [
            {"task": "average", "condition": c, "success_pct": float(np.mean(v)),
             "trials": sum(r["trials"] for r in self.rows if r["condition"] == c),
             "seeds": []}
            for c, v in by_cond.items()
        ]
        return EvalTable(rows=self.rows + avg_rows)

    def cell(self, task: str, condition: str) -> float:
        for r in self.rows:
            if r["task"] == task and r["condition"] == condition:
                return r["success_pct"]
        raise KeyError((task, condition))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["task", "condition", "success_pct", "trials", "seeds"])
        for r in self.rows:
            w.writerow([r["task"], r["condition"], repr(r["success_pct"]),
                        r["trials"], json.dumps(r["seeds"])])
        return buf.getvalue()

    @staticmethod
    def from_csv(text: str) -> "EvalTable":
        rows = []
        for rec in csv.DictReader(io.StringIO(text)):
            rows.append({
                "task": rec["task"],
                "condition": rec["condition"],
                "success_pct": float(rec["success_pct"]),
                "trials": int(rec["trials"]),
                "seeds": json.loads(rec["seeds"]),
            })
        return EvalTable(rows=rows)

    def to_text(self) -> str:
        conds = sorted({r["condition"] for r in self.rows})
        tasks = []
        for r in self.rows:
            if r["task"] not in tasks:
                tasks.append(r["task"])
        lines = [f"{'task':24s}" + "".join(f"{c:>18s}" for c in conds)]
        for t in tasks:
            cells = []
            for c in conds:
                try:
                    cells.append(f"{self.cell(t, c):18.1f}")
                except KeyError:
                    cells.append(f"{'-':>18s}")
            lines.append(f"{t:24s}" + "".join(cells))
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# Baseline policies
# ---------------------------------------------------------------------------

class ExpertPolicy:
    """Privileged scripted controller wrapped in the policy interface."""

    def __init__(self, sim_cfg: SimConfig = SimConfig()):
        self.sim_cfg = sim_cfg

    def plan(self, scene, task, instruction, seed):
        return [expert_action(scene, task, self.sim_cfg)], None


class RandomPolicy:
    """Null baseline: uniform actions within per-step limits."""

    def __init__(self, sim_cfg: SimConfig = SimConfig()):
        self.sim_cfg = sim_cfg

    def plan(self, scene, task, instruction, seed):
        rng = np.random.default_rng([scene.seed, scene.t, seed])
        a = np.zeros(7)
        a[:3] = rng.uniform(-self.sim_cfg.max_xyz_step, self.sim_cfg.max_xyz_step, 3)
        a[6] = rng.uniform(0, 1)
        return [a], None


# ---------------------------------------------------------------------------
# Rollouts
# ---------------------------------------------------------------------------

def rollout(policy, task: TaskSpec, instruction: str, seed: int, classes: dict,
            sim_cfg: SimConfig = SimConfig(), max_steps: int = 200,
            condition: str = "intention") -> EpisodeResult:
    """Run one seeded episode until success or the step budget runs out."""
    s = reset_scene(task, seed, classes, sim_cfg)
    perturb_at = None
    if condition == "moving-goal":
        perturb_rng = np.random.default_rng([seed, 0xF00D])
        perturb_at = int(perturb_rng.integers(5, 20))
    latencies = []
    reasonings = []
    perturbed = False
    n = 0
    while n < max_steps:
        t0 = time.perf_counter()
        actions, info = policy.plan(s, task, instruction, seed)
        latencies.append(time.perf_counter() - t0)
        if info is not None:
            reasonings.append(info.reasoning_text)
        for a in actions:
            if n >= max_steps:
                break
            s = step(s, a, sim_cfg)
            n += 1
            if perturb_at is not None and not perturbed and n >= perturb_at:
                s = perturb_goal(s, np.random.default_rng([seed, 0xBEEF]), sim_cfg)
                perturbed = True
            if is_success(s, task):
                return EpisodeResult(
                    task=task.name, condition=condition, seed=seed, success=True,
                    steps_used=n, failure_reason=None,
                    mean_step_latency=float(np.mean(latencies)),
                    reasonings=tuple(reasonings))
    return EpisodeResult(
        task=task.name, condition=condition, seed=seed, success=False,
        steps_used=n, failure_reason="timeout",
        mean_step_latency=float(np.mean(latencies)),
        reasonings=tuple(reasonings))


def instruction_for(task: TaskSpec, condition: str, trial: int) -> str:
    if condition == "direct":
        return task.direct_instruction
    if condition in ("intention", "moving-goal"):
        bank = task.intention_instructions
    elif condition == "unseen-intention":
        bank = task.heldout_instructions
        if not bank:
            raise ValueError(f"task {task.name} has no heldout instructions")
    else:
        raise ValueError(f"unknown condition {condition!r}")
    return bank[trial % len(bank)]


def success_table(policy, tasks, conditions, trials: int, classes: dict,
                  sim_cfg: SimConfig = SimConfig(), max_steps: int = 200,
                  seed_base: int = 10_000) -> EvalTable:
    """Per-cell success rate over seeded trials, with an average row appended."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rows = []
    for task in tasks:
        for cond in conditions:
            seeds = [seed_base + i for i in range(trials)]
            wins = 0
            for i, seed in enumerate(seeds):
                instr = instruction_for(task, cond, i)
                res = rollout(policy, task, instr, seed, classes, sim_cfg,
                              max_steps, condition=cond)
                wins += int(res.success)
            rows.append({"task": task.name, "condition": cond,
                         "success_pct": 100.0 * wins / trials,
                         "trials": trials, "seeds": seeds})
    return EvalTable(rows=rows).with_average()


def collect_rollout_reasonings(policy, tasks, trials: int, classes: dict,
                               sim_cfg: SimConfig = SimConfig(),
                               seed_base: int = 10_000, max_steps: int = 200):
    """All reasoning strings produced during seeded intention rollouts."""
    texts = []
    for task in tasks:
        for i in range(trials):
            instr = instruction_for(task, "intention", i)
            res = rollout(policy, task, instr, seed_base + i, classes, sim_cfg,
                          max_steps, condition="intention")
            texts.extend(res.reasonings)
    return texts


# ---------------------------------------------------------------------------
# Ablations
# ---------------------------------------------------------------------------

PRETRAIN_VARIANTS = (
    ("full_data", ()),
    ("wo_intention_reason", ("intention",)),
    ("wo_spatial_reason", ("spatial",)),
    ("wo_compact_reasoning", ("compact",)),
)


def ablation_suite(run_cfg, data, training_seeds=(0,), trials=None):
    """Train pretraining-data variants plus both finetune modes, shared eval seeds.

    Returns (pretrain EvalTable with variant-named conditions, finetune
    EvalTable). Success is measured under intention instructions.
    """
    from .pipeline import evaluate_model, train_full

    pretrain_cells = {}  # (task, variant) -> per-seed success rates
    finetune_cells = {}  # (task, mode label) -> per-seed success rates
    for variant, omit in PRETRAIN_VARIANTS:
        for seed in training_seeds:
            model, _ = train_full(run_cfg, data, seed=seed, omit_formats=omit)
            table = evaluate_model(run_cfg, model, conditions=("intention",),
                                   trials=trials)
            for r in table.rows:
                if r["task"] == "average":
                    continue
                pretrain_cells.setdefault((r["task"], variant), []).append(r["success_pct"])
                if variant == "full_data":
                    finetune_cells.setdefault(
                        (r["task"], "only_action_expert"), []).append(r["success_pct"])
            if variant == "full_data":
                joint_model, _ = train_full(run_cfg, data, seed=seed,
                                            finetune_mode="joint")
                joint_table = evaluate_model(run_cfg, joint_model,
                                             conditions=("intention",),
                                             trials=trials)
                for r in joint_table.rows:
                    if r["task"] != "average":
                        finetune_cells.setdefault(
                            (r["task"], "vlm_and_action_expert"), []).append(r["success_pct"])

    def rows_from(cells):
        return [
            {"task": task, "condition": cond, "success_pct": float(np.mean(vals)),
             "trials": len(vals), "seeds": list(training_seeds)}
            for (task, cond), vals in cells.items()
        ]

    return (EvalTable(rows=rows_from(pretrain_cells)).with_average(),
            EvalTable(rows=rows_from(finetune_cells)).with_average())


# ---------------------------------------------------------------------------
# Latency
# ---------------------------------------------------------------------------

def latency_report(model, states, sampler: SamplerConfig = SamplerConfig(),
                   classes: dict = None, sim_cfg: SimConfig = SimConfig(),
                   modes=("compact", "intention-chain")):
    """Paired wall-time and token-count statistics per reasoning mode.

    `states` is a list of (SceneState, instruction) probe pairs; each state is
    evaluated under every mode so the comparison is paired.
    """
    if len(states) < 1:
        raise ValueError("need probe states")
    report = {}
    for mode in modes:
        times, tokens = [], []
        for i, (scene, instr) in enumerate(states):
            obs = render(scene, classes, sim_cfg)
            out = policy_step(model, obs, instr, sampler, seed=i, mode=mode,
                              sim_cfg=sim_cfg)
            times.append(out.timing["total_seconds"])
            tokens.append(out.token_counts["reasoning_tokens"])
        report[mode] = {
            "mean_seconds": float(np.mean(times)),
            "median_seconds": float(np.median(times)),
            "mean_tokens": float(np.mean(tokens)),
            "total_tokens": int(np.sum(tokens)),
            "states": len(states),
        }
    return report


# ---------------------------------------------------------------------------
# Split hygiene
# ---------------------------------------------------------------------------

def check_split_hygiene(samples, tasks):
    """Heldout instruction strings must not occur in any training sample."""
    heldout = {instr for t in tasks for instr in t.heldout_instructions}
    violations = []
    for s in samples:
        if s.split != "train":
            continue
        for phrase in heldout:
            if phrase in s.prompt_text or phrase in s.target_text:
                violations.append((s.traj_id, s.step, phrase))
    return violations


# ---------------------------------------------------------------------------
# Trace files
# ---------------------------------------------------------------------------

def write_trace(path, policy, task, instruction, seed, classes,
                sim_cfg: SimConfig = SimConfig(), max_steps: int = 200):
    """JSONL rollout trace of (step, reasoning_text, action, timing)."""
    s = reset_scene(task, seed, classes, sim_cfg)
    n = 0
    with open(path, "w") as f:
        while n < max_steps and not is_success(s, task):
            actions, info = policy.plan(s, task, instruction, seed)
            for a in actions:
                if n >= max_steps or is_success(s, task):
                    break
                rec = {
                    "step": n,
                    "reasoning_text": info.reasoning_text if info else None,
                    "action": [float(v) for v in a],
                    "timing": info.timing if info else None,
                }
                f.write(json.dumps(rec) + "\n")
                s = step(s, a, sim_cfg)
                n += 1
    return is_success(s, task)
