"""Two-stage training on a micro dataset, then closed-loop inference.

Stage 1 teaches the language backbone to emit reasoning text; stage 2 trains
the diffusion action expert against frozen backbone features. This script
uses a deliberately tiny configuration so it finishes in a couple of minutes
on CPU; success rates at this scale are not meaningful — see
demos/04_evaluate_and_compare.py for the full protocol.

Run with:  python3 demos/03_train_and_infer.py
"""
import numpy as np
import torch

from deskvla.config import load_config
from deskvla.inference import SamplerConfig, infer_reasoning, policy_step
from deskvla.pipeline import annotate_demos, build_model, gen_demos, train_full
from deskvla.simenv import render, reset_scene
from deskvla.training import TrainingData

CONFIG = """
num_threads: 4
simenv: {grid_size: 10}
data: {demos_per_task: 2, task_names: [phone_on_hand]}
model: {layers: 1, heads: 2, model_dim: 32, diff_dim: 16, connector_layers: 1,
        dit_layers: 1, dit_heads: 2, context_len: 256}
stage1: {steps: 150, batch_size: 8, log_every: 50}
stage2: {steps: 150, batch_size: 8, log_every: 50}
"""

cfg = load_config(text=CONFIG)
records, manifest = gen_demos(cfg)
samples = annotate_demos(cfg, records)
data = TrainingData(samples, records)
print(f"dataset: {len(records)} demos -> {len(samples)} reasoning samples")

print("\n=== two-stage training ===")
model, log = train_full(cfg, data, seed=0)
for step, stage, loss in log:
    if step % 50 == 49 or step == 0:
        print(f"  {stage} step {step:4d}  loss {loss:.4f}")

print("\n=== reasoning inference ===")
from deskvla.pipeline import load_world
classes, tasks, _, sim = load_world(cfg)
task = next(t for t in tasks if t.name == "phone_on_hand")
scene = reset_scene(task, seed=42, classes=classes, cfg=sim)
obs = render(scene, classes, sim)
instruction = task.intention_instructions[0]
for mode in ("compact", "intention-chain"):
    r = infer_reasoning(model, obs, instruction, mode)
    print(f"  {mode:16s} ({r.token_count:3d} tokens): \"{r.text[:70]}\"")

print("\n=== one policy step (reasoning + denoised action chunk) ===")
out = policy_step(model, obs, instruction, SamplerConfig(), seed=0, sim_cfg=sim)
print(f"  reasoning: \"{out.reasoning_text}\"")
print(f"  chunk shape {out.action_chunk.shape}, first action "
      f"{np.round(out.action_chunk[0], 3)}")
print(f"  timing: {({k: round(v, 4) for k, v in out.timing.items()})}")
