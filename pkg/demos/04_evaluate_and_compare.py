"""Evaluation harness tour: success tables, latency pairing, split hygiene.

Uses the privileged scripted expert as the policy so the numbers are
meaningful without an hour of training; swap in a trained ModelPolicy (see
demos/03_train_and_infer.py) for real policy evaluation.

Run with:  python3 demos/04_evaluate_and_compare.py
"""
from deskvla.config import load_config
from deskvla.evaluation import (ExpertPolicy, RandomPolicy,
                                check_split_hygiene, latency_report,
                                success_table)
from deskvla.inference import SamplerConfig
from deskvla.pipeline import annotate_demos, build_model, gen_demos, load_world
from deskvla.simenv import reset_scene

CONFIG = """
num_threads: 4
simenv: {grid_size: 10}
data: {demos_per_task: 2, task_names: [phone_on_hand, marker_on_hand]}
model: {layers: 1, heads: 2, model_dim: 32, diff_dim: 16, connector_layers: 1,
        dit_layers: 1, dit_heads: 2, context_len: 256}
"""
cfg = load_config(text=CONFIG)
classes, tasks, id_tasks, sim = load_world(cfg)

print("=== success table: expert vs random, three instruction conditions ===")
for name, policy in (("expert", ExpertPolicy(sim)), ("random", RandomPolicy(sim))):
    table = success_table(policy, id_tasks,
                          ("direct", "intention", "unseen-intention"),
                          trials=5, classes=classes, sim_cfg=sim, max_steps=100)
    print(f"\n{name} policy:")
    print(table.to_text())

print("\n=== CSV round trip ===")
table = success_table(ExpertPolicy(sim), id_tasks[:1], ("direct",), trials=3,
                      classes=classes, sim_cfg=sim, max_steps=100)
csv_text = table.to_csv()
print(csv_text.strip())

print("\n=== paired latency: compact vs full intention chain ===")
model = build_model(cfg, seed=0)
states = []
for i, t in enumerate(id_tasks):
    states.append((reset_scene(t, 500 + i, classes, sim),
                   t.intention_instructions[0]))
rep = latency_report(model, states, SamplerConfig(), classes=classes,
                     sim_cfg=sim)
for mode, stats in rep.items():
    print(f"  {mode:16s} mean {stats['mean_seconds']*1e3:7.1f} ms, "
          f"{stats['mean_tokens']:5.1f} tokens/step")
ratio = rep["intention-chain"]["total_tokens"] / rep["compact"]["total_tokens"]
print(f"  chain:compact token ratio = {ratio:.1f}")

print("\n=== split hygiene ===")
records, _ = gen_demos(cfg)
samples = annotate_demos(cfg, records)
violations = check_split_hygiene(samples, tasks)
print(f"  {len(samples)} training samples, "
      f"{len(violations)} held-out instruction leaks")
