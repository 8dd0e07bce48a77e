"""Compact-reasoning-guided policy.

One decision: autoregressively produce a short reasoning string, build the
diffusion condition in a single forward pass over [obs; instruction;
reasoning; queries], then iteratively denoise an action chunk (deterministic
DDIM-style update, eta = 0).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .annotator import COMPACT_RE, FORMAT_TAGS
from .model import VLAModel, denormalize_chunk, normalize_chunk, reconstruct_x0
from .simenv import Observation, SimConfig

REASONING_BUDGETS = {"compact": 8, "intention-chain": 64}
MODE_TAGS = {"compact": FORMAT_TAGS["compact"], "intention-chain": FORMAT_TAGS["intention"]}


@dataclass(frozen=True)
class SamplerConfig:
    num_denoise_steps: int = 10
    timesteps: Optional[tuple] = None  # strictly decreasing subsequence of [1..T]
    eta: float = 0.0

    def __post_init__(self):
        if self.num_denoise_steps < 1:
            raise ValueError("need at least one denoise step")
        if self.timesteps is not None:
            ts = tuple(int(t) for t in self.timesteps)
            if any(a <= b for a, b in zip(ts, ts[1:])):
                raise ValueError("timesteps must be strictly decreasing")
            object.__setattr__(self, "timesteps", ts)

    def resolve_timesteps(self, T: int) -> tuple:
        if self.timesteps is not None:
            return self.timesteps
        s = min(self.num_denoise_steps, T)
        return tuple(int(round(v)) for v in np.linspace(T, 1, s))


@dataclass(frozen=True)
class ReasoningResult:
    text: str
    token_count: int
    seconds: float
    hit_budget: bool  # budget exhausted without EOS (not fatal)


@dataclass(frozen=True)
class PolicyOutput:
    reasoning_text: str
    action_chunk: np.ndarray  # (H, 7)
    timing: dict  # reasoning_seconds, denoise_seconds, total_seconds
    token_counts: dict
    grammar_ok: bool


def infer_reasoning(model: VLAModel, obs: Observation, instruction: str,
                    mode: str = "compact") -> ReasoningResult:
    """Greedy short-reasoning decode with a per-mode token budget."""
    if mode not in REASONING_BUDGETS:
        raise ValueError(f"unknown reasoning mode {mode!r}")
    t0 = time.perf_counter()
    prompt = f"{instruction} {MODE_TAGS[mode]}"
    ids, hit = model.vlm_generate(obs, prompt, REASONING_BUDGETS[mode])
    return ReasoningResult(
        text=model.detokenize(ids),
        token_count=len(ids),
        seconds=time.perf_counter() - t0,
        hit_budget=hit,
    )


@torch.no_grad()
def build_condition(model: VLAModel, obs: Observation, instruction: str,
                    reasoning: str) -> torch.Tensor:
    """Single forward pass over [obs; instruction; reasoning; Q] -> (N, D_diff)."""
    vocab = model.vocab
    ids = ([vocab.bos_id] + vocab.tokenize(instruction) + [vocab.sep_id]
           + vocab.tokenize(reasoning))
    x = model.backbone.assemble(model.grid_tensor(obs), ids, include_queries=True)
    h = model.backbone.forward_hidden(x)
    z = model.extract_queries(h)
    return model.connector_forward(z)


@torch.no_grad()
def sample_actions(model, c: torch.Tensor, sampler: SamplerConfig,
                   seed: int, sim_cfg: SimConfig = SimConfig()) -> np.ndarray:
    """Iterative denoising from Gaussian noise; deterministic for eta = 0.

    `model` only needs .schedule, .cfg.chunk_horizon and .dit_denoise, so an
    oracle denoiser stub can stand in for tests.
    """
    sched = model.schedule
    h = model.cfg.chunk_horizon
    gen = torch.Generator().manual_seed(seed)
    A = torch.randn((h, 7), dtype=torch.float64, generator=gen)
    ts = sampler.resolve_timesteps(sched.T)
    x0 = A
    for i, k in enumerate(ts):
        eps_hat = model.dit_denoise(A, k, c)
        # Normalized actions live in [-1, 1]; clamping the running estimate
        # keeps the deterministic trajectory on-distribution.
        x0 = reconstruct_x0(A, k, eps_hat, sched).clamp(-1.0, 1.0)
        prev = ts[i + 1] if i + 1 < len(ts) else 0
        ab_prev = sched.bar(prev)
        A = np.sqrt(ab_prev) * x0 + np.sqrt(1.0 - ab_prev) * eps_hat
    chunk = denormalize_chunk(x0).numpy()
    chunk[:, :3] = np.clip(chunk[:, :3], -sim_cfg.max_xyz_step, sim_cfg.max_xyz_step)
    chunk[:, 3:6] = np.clip(chunk[:, 3:6], -sim_cfg.max_rpy_step, sim_cfg.max_rpy_step)
    chunk[:, 6] = np.clip(chunk[:, 6], 0.0, 1.0)
    return chunk


def policy_step(model: VLAModel, obs: Observation, instruction: str,
                sampler: SamplerConfig, seed: int = 0, mode: str = "compact",
                sim_cfg: SimConfig = SimConfig()) -> PolicyOutput:
    """Reasoning -> condition -> denoised action chunk, with a timing breakdown."""
    t_start = time.perf_counter()
    reasoning = infer_reasoning(model, obs, instruction, mode)
    t_mid = time.perf_counter()
    c = build_condition(model, obs, instruction, reasoning.text)
    chunk = sample_actions(model, c, sampler, seed, sim_cfg)
    t_end = time.perf_counter()
    return PolicyOutput(
        reasoning_text=reasoning.text,
        action_chunk=chunk,
        timing={
            "reasoning_seconds": reasoning.seconds,
            "denoise_seconds": t_end - t_mid,
            "total_seconds": t_end - t_start,
        },
        token_counts={"reasoning_tokens": reasoning.token_count},
        grammar_ok=bool(COMPACT_RE.match(reasoning.text)) if mode == "compact" else True,
    )


class ModelPolicy:
    """Receding-horizon wrapper: execute the first E of H predicted actions.

    Reasoning is re-generated on every replan tick so the object word can
    flip from target to goal when the gripper closes.
    """

    def __init__(self, model: VLAModel, sampler: SamplerConfig = SamplerConfig(),
                 mode: str = "compact", execute_horizon: int = 4,
                 classes: dict = None, sim_cfg: SimConfig = SimConfig()):
        if classes is None:
            raise ValueError("ModelPolicy needs the class table to render observations")
        self.model = model
        self.sampler = sampler
        self.mode = mode
        self.execute_horizon = min(execute_horizon, model.cfg.chunk_horizon)
        self.classes = classes
        self.sim_cfg = sim_cfg

    def plan(self, scene, task, instruction: str, seed: int):
        from .simenv import render

        obs = render(scene, self.classes, self.sim_cfg)
        out = policy_step(self.model, obs, instruction, self.sampler,
                          seed=seed, mode=self.mode, sim_cfg=self.sim_cfg)
        actions = [out.action_chunk[i] for i in range(self.execute_horizon)]
        return actions, out
