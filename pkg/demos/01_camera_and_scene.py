"""Tour of the tabletop world: scene resets, camera projection, detections.

Run with:  python3 demos/01_camera_and_scene.py
"""
import numpy as np

from deskvla.geometry import project_point
from deskvla.simenv import (SimConfig, default_calibration, detect,
                            expert_action, is_success, load_task_bank, render,
                            reset_scene, step)

classes, tasks = load_task_bank()
task = next(t for t in tasks if t.name == "phone_on_hand")
cfg = SimConfig()
calib = default_calibration()

print("=== task bank ===")
for t in tasks:
    tag = "OOD" if t.ood else "ID "
    print(f"  [{tag}] {t.name}: \"{t.direct_instruction}\"")

print("\n=== seeded scene reset ===")
scene = reset_scene(task, seed=7, classes=classes, cfg=cfg)
for obj in scene.objects:
    print(f"  {obj.class_name:12s} at {np.round(obj.pose.position, 3)}")
print(f"  gripper at {np.round(scene.ee.position, 3)}")

print("\n=== pinhole projection ===")
phone = scene.find("phone")
px = project_point(calib, phone.pose.position)
print(f"  phone world {np.round(phone.pose.position, 3)} -> pixel ({px.u}, {px.v})")

print("\n=== detections (projected bounding boxes) ===")
for obj in scene.objects:
    box = detect(scene, obj.class_name, 0.0, calib)
    print(f"  {obj.class_name:12s} bbox=({box.x_min:.0f},{box.y_min:.0f})"
          f"-({box.x_max:.0f},{box.y_max:.0f})")

print("\n=== semantic raster ===")
obs = render(scene, classes, cfg)
grid = obs.grid
print(f"  shape {grid.shape}, occupied cells: {int((grid.sum(axis=2) > 0).sum())}")

print("\n=== scripted expert rollout ===")
n = 0
while not is_success(scene, task) and n < 100:
    scene = step(scene, expert_action(scene, task, cfg), cfg)
    n += 1
print(f"  success={is_success(scene, task)} in {n} steps")
