"""From raw demonstrations to the three reasoning formats.

Walks one expert trajectory through the annotation pipeline and prints the
intention chain, the spatial chain, and the compact reasoning string for a
few steps, then builds the full multi-format dataset.

Run with:  python3 demos/02_reasoning_annotations.py
"""
from deskvla.annotator import (COMPACT_RE, TemplateLLMClient, build_dataset,
                               compact_reasoning, discretize_delta,
                               intention_chain, scene_summary_for_task,
                               spatial_chain, undiscretize)
from deskvla.simenv import SimConfig, generate_demo, load_task_bank

classes, tasks = load_task_bank()
task = next(t for t in tasks if t.name == "phone_on_hand")
cfg = SimConfig()
demo = generate_demo(task, seed=3, classes=classes, cfg=cfg)
print(f"demo: {task.name}, {len(demo.steps)} steps, instruction "
      f"\"{demo.instruction}\"")

print("\n=== intention chain (instruction -> plan) ===")
client = TemplateLLMClient()
chain = intention_chain(demo.instruction, scene_summary_for_task(task), client)
for i, s in enumerate(chain.steps):
    print(f"  {i}. {s}")

print("\n=== delta-action tokens (16 bins per dimension) ===")
delta = demo.steps[2].action
tokens = discretize_delta(delta)
print(f"  raw delta    {[round(float(v), 4) for v in delta]}")
print(f"  bin indices  {list(tokens.pose_bins) + [tokens.gripper_token]}")
print(f"  decoded      {[round(float(v), 4) for v in undiscretize(tokens)]}")

print("\n=== compact reasoning per step ===")
for i in (0, 5, len(demo.steps) - 2):
    r = compact_reasoning(demo.steps[i], task, deadband=cfg.deadband)
    ok = bool(COMPACT_RE.match(r.rendered_text))
    print(f"  step {i:2d}: \"{r.rendered_text}\"  grammar_ok={ok}")

print("\n=== full dataset ===")
samples = build_dataset([demo], {t.name: t for t in tasks},
                        {"intention", "spatial", "compact"}, client,
                        horizon=8, deadband=cfg.deadband)
by_fmt = {}
for s in samples:
    by_fmt[s.format] = by_fmt.get(s.format, 0) + 1
for fmt, n in sorted(by_fmt.items()):
    print(f"  {fmt}: {n} samples")
example = next(s for s in samples if s.format == "compact")
print(f"\n  compact sample prompt : \"{example.prompt_text}\"")
print(f"  compact sample target : \"{example.target_text}\"")
print(f"  action chunk shape    : {example.action_chunk.shape}")
