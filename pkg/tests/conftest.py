"""Shared fixtures: small world configs, cached demos, and tiny models."""

import numpy as np
import pytest
import torch

from deskvla import pipeline
from deskvla.config import load_config
from deskvla.model import VLAModel, build_vocab
from deskvla.simenv import SimConfig, generate_demo, load_task_bank
from deskvla.training import TrainingData

torch.set_num_threads(4)

TINY_YAML = """
num_threads: 4
simenv: {grid_size: 10}
data: {demos_per_task: 2, task_names: [phone_on_hand, marker_on_hand]}
model: {layers: 2, heads: 2, model_dim: 64, diff_dim: 32, connector_layers: 2,
        dit_layers: 2, dit_heads: 2, context_len: 256}
stage1: {steps: 30, batch_size: 8, log_every: 10}
stage2: {steps: 30, batch_size: 8, log_every: 10}
eval: {trials: 1, max_steps: 60, conditions: [direct]}
"""


@pytest.fixture(scope="session")
def world():
    classes, tasks = load_task_bank()
    return classes, tasks


@pytest.fixture(scope="session")
def classes(world):
    return world[0]


@pytest.fixture(scope="session")
def tasks(world):
    return world[1]


@pytest.fixture(scope="session")
def id_tasks(tasks):
    return [t for t in tasks if not t.ood]


@pytest.fixture(scope="session")
def sim_cfg():
    return SimConfig()


@pytest.fixture(scope="session")
def tiny_cfg():
    return load_config(text=TINY_YAML)


@pytest.fixture(scope="session")
def demo(classes, id_tasks, sim_cfg):
    """One expert demonstration for a hand-goal task."""
    task = next(t for t in id_tasks if t.name == "phone_on_hand")
    return task, generate_demo(task, 3, classes, sim_cfg)


@pytest.fixture(scope="session")
def tiny_data(tiny_cfg):
    """Small annotated dataset backing training/inference tests."""
    records, _ = pipeline.gen_demos(tiny_cfg)
    samples = pipeline.annotate_demos(tiny_cfg, records)
    return TrainingData(samples, records)


@pytest.fixture(scope="session")
def tiny_model(tiny_cfg):
    return pipeline.build_model(tiny_cfg, seed=0)


@pytest.fixture(scope="session")
def vocab(tasks):
    return build_vocab(tasks)


def small_model(tasks, **overrides) -> VLAModel:
    """Minimal double-precision model for gradient/algebra tests."""
    from deskvla.model import BackboneConfig
    import dataclasses

    base = dict(layers=1, heads=2, model_dim=16, context_len=128, query_count=2,
                diff_dim=8, chunk_horizon=2, grid_size=4, grid_channels=16,
                connector_layers=2, dit_layers=1, dit_heads=2, diffusion_steps=10,
                mlp_ratio=2, seed=0)
    base.update(overrides)
    return VLAModel(BackboneConfig(**base), build_vocab(tasks))


@pytest.fixture()
def micro_model(tasks):
    return small_model(tasks)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
