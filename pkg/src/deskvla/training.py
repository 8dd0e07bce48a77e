"""Two-stage curriculum.

Stage 1 trains the backbone with token cross-entropy over reasoning data.
Stage 2 trains the learnable queries, connector and DiT with the noise-MSE
diffusion loss; query hidden states are detached before the connector so the
backbone stays bitwise intact (unless joint finetuning is requested).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .annotator import FORMAT_TAGS, ReasoningSample
from .model import (
    DiffusionSchedule,
    TimestepOutOfRange,
    VLAModel,
    normalize_chunk,
)
from .simenv import Observation

FINETUNE_MODES = ("action-expert-only", "joint")


class MissingStage1Checkpoint(RuntimeError):
    """Stage 2 requested without a stage-1 checkpoint."""


class NonFiniteLoss(RuntimeError):
    """Training aborted on a non-finite loss."""


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "stage1"
    learning_rate: float = 1e-3
    steps: int = 1000
    batch_size: int = 16
    seed: int = 0
    omit_formats: tuple = ()  # ablation: drop these formats from stage-1 data
    finetune_mode: str = "action-expert-only"
    log_every: int = 50
    num_threads: int = 0  # 0 = leave torch default

    def __post_init__(self):
        if self.stage not in ("stage1", "stage2"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.finetune_mode not in FINETUNE_MODES:
            raise ValueError(f"unknown finetune mode {self.finetune_mode!r}")


def strip_format_tag(prompt_text: str) -> str:
    """Instruction part of a sample prompt (format tag removed)."""
    words = prompt_text.split()
    if words and words[-1] in FORMAT_TAGS.values():
        words = words[:-1]
    return " ".join(words)


class TrainingData:
    """Reasoning samples plus the trajectory store backing their observations."""

    def __init__(self, samples, trajectories):
        self.samples = list(samples)
        self.trajectories = list(trajectories)

    def observation(self, sample: ReasoningSample) -> Observation:
        return self.trajectories[sample.traj_id].steps[sample.step].observation

    def stage1_samples(self, omit_formats=()):
        return [s for s in self.samples
                if s.split == "train" and s.format not in omit_formats]

    def stage2_samples(self):
        return [s for s in self.samples
                if s.split == "train" and s.format == "compact"
                and s.action_chunk is not None]


# ---------------------------------------------------------------------------
# Batches
# ---------------------------------------------------------------------------

@dataclass
class Stage1Batch:
    """Padded token sequences with a loss mask over target positions."""

    grids: torch.Tensor  # (B, G, G, C)
    tokens: torch.Tensor  # (B, M) text tokens: bos prompt sep target eos pad*
    loss_mask: torch.Tensor  # (B, M) True at token positions to be predicted

    def __post_init__(self):
        if not bool(self.loss_mask.any()):
            raise ValueError("stage-1 batch has no unmasked target tokens")


@dataclass
class Stage2Batch:
    grids: torch.Tensor  # (B, G, G, C)
    token_lists: list  # per-sample text ids: bos instr sep reasoning
    chunks: torch.Tensor  # (B, H, 7) clean action chunks A_0 (raw units)


def make_stage1_batch(model: VLAModel, data: TrainingData, samples) -> Stage1Batch:
    vocab = model.vocab
    seqs, masks, grids = [], [], []
    for s in samples:
        prompt = [vocab.bos_id] + vocab.tokenize(s.prompt_text) + [vocab.sep_id]
        target = vocab.tokenize(s.target_text) + [vocab.eos_id]
        seqs.append(prompt + target)
        masks.append([False] * len(prompt) + [True] * len(target))
        grids.append(model.grid_tensor(data.observation(s)))
    m = max(len(q) for q in seqs)
    toks = torch.full((len(seqs), m), vocab.pad_id, dtype=torch.long)
    mask = torch.zeros((len(seqs), m), dtype=torch.bool)
    for i, (q, k) in enumerate(zip(seqs, masks)):
        toks[i, : len(q)] = torch.as_tensor(q)
        mask[i, : len(q)] = torch.as_tensor(k)
    return Stage1Batch(grids=torch.stack(grids), tokens=toks, loss_mask=mask)


def make_stage2_batch(model: VLAModel, data: TrainingData, samples) -> Stage2Batch:
    vocab = model.vocab
    grids, token_lists, chunks = [], [], []
    for s in samples:
        ids = ([vocab.bos_id] + vocab.tokenize(strip_format_tag(s.prompt_text))
               + [vocab.sep_id] + vocab.tokenize(s.target_text))
        token_lists.append(ids)
        grids.append(model.grid_tensor(data.observation(s)))
        chunks.append(torch.as_tensor(s.action_chunk, dtype=torch.float64))
    return Stage2Batch(grids=torch.stack(grids), token_lists=token_lists,
                       chunks=torch.stack(chunks))


# ---------------------------------------------------------------------------
# Diffusion forward process
# ---------------------------------------------------------------------------

def add_noise(A_0: torch.Tensor, k, eps: torch.Tensor,
              sched: DiffusionSchedule) -> torch.Tensor:
    """Forward noising: A_k = sqrt(abar_k) A_0 + sqrt(1 - abar_k) eps."""
    k_t = torch.as_tensor(k, dtype=torch.long).reshape(-1)
    if torch.any(k_t < 1) or torch.any(k_t > sched.T):
        raise TimestepOutOfRange(f"k={k} outside [1, {sched.T}]")
    ab = torch.as_tensor(sched.alpha_bar, dtype=A_0.dtype)[k_t]
    while ab.dim() < A_0.dim():
        ab = ab.unsqueeze(-1)
    if A_0.dim() == 2:  # single chunk
        ab = ab.squeeze(0)
    return torch.sqrt(ab) * A_0 + torch.sqrt(1.0 - ab) * eps


# ---------------------------------------------------------------------------
# Stage losses / steps
# ---------------------------------------------------------------------------

def stage1_logits_and_loss(model: VLAModel, batch: Stage1Batch) -> torch.Tensor:
    """Mean cross entropy (nats/token) over unmasked target positions."""
    b, m = batch.tokens.shape
    vis = torch.stack([model.backbone.encode_observation(g) for g in batch.grids])
    txt = model.backbone.tok_emb(batch.tokens)
    x = torch.cat([vis, txt], dim=1)
    x = x + model.backbone.pos_emb[: x.shape[1]]
    h = model.backbone.forward_hidden(x)
    v = vis.shape[1]
    # hidden at full position v + j - 1 predicts text token j (j >= 1)
    logits = model.backbone.logits(h[:, v - 1 : v + m - 1])
    logp = torch.log_softmax(logits, dim=-1)
    tok_logp = torch.gather(logp, 2, batch.tokens.unsqueeze(-1)).squeeze(-1)
    return -(tok_logp[batch.loss_mask]).mean()


def stage1_step(batch: Stage1Batch, model: VLAModel, opt) -> float:
    loss = stage1_logits_and_loss(model, batch)
    if not torch.isfinite(loss):
        raise NonFiniteLoss(f"stage-1 loss {loss}")
    opt.zero_grad()
    loss.backward()
    opt.step()
    return float(loss.detach())


def compute_z(model: VLAModel, grid: torch.Tensor, token_ids) -> torch.Tensor:
    """Query hidden states for one [obs; text; Q] sequence."""
    x = model.backbone.assemble(grid, token_ids, include_queries=True)
    h = model.backbone.forward_hidden(x)
    return model.extract_queries(h)


def stage2_loss(model: VLAModel, z: torch.Tensor, chunks: torch.Tensor,
                k: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """Sum-reduced noise MSE per chunk, averaged over the batch."""
    c = model.connector(z)
    A_0 = normalize_chunk(chunks)
    A_k = add_noise(A_0, k, eps, model.schedule)
    eps_hat = model.dit(A_k, k, c)
    return ((eps - eps_hat) ** 2).sum(dim=(-2, -1)).mean()


def stage2_step(batch: Stage2Batch, model: VLAModel, opt,
                generator: torch.Generator,
                finetune_mode: str = "action-expert-only") -> float:
    b = batch.chunks.shape[0]
    detach = finetune_mode == "action-expert-only"
    zs = []
    for grid, ids in zip(batch.grids, batch.token_lists):
        if detach:
            with torch.no_grad():
                zs.append(compute_z(model, grid, ids))
        else:
            zs.append(compute_z(model, grid, ids))
    z = torch.stack(zs)
    if detach:
        z = z.detach()
    k = torch.randint(1, model.schedule.T + 1, (b,), generator=generator)
    eps = torch.randn(batch.chunks.shape, dtype=torch.float64, generator=generator)
    loss = stage2_loss(model, z, batch.chunks, k, eps)
    if not torch.isfinite(loss):
        raise NonFiniteLoss(f"stage-2 loss {loss}")
    opt.zero_grad()
    loss.backward()
    opt.step()
    return float(loss.detach())


# ---------------------------------------------------------------------------
# Training driver
# ---------------------------------------------------------------------------

def make_optimizer(params, lr: float):
    return torch.optim.Adam(params, lr=lr)


def run_training(cfg: TrainConfig, data: TrainingData, model: VLAModel,
                 stage1_done: bool = False, log_path=None):
    """Train one stage in place; returns the loss log [(step, stage, loss)].

    Deterministic given (cfg.seed, model state). Stage 2 refuses to run unless
    the model carries stage-1 training (stage1_done, set from checkpoint tags).
    """
    if cfg.num_threads:
        torch.set_num_threads(cfg.num_threads)
    gen = torch.Generator().manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    log = []

    if cfg.stage == "stage1":
        samples = data.stage1_samples(cfg.omit_formats)
        if not samples:
            raise ValueError("no stage-1 samples after ablation filtering")
        opt = make_optimizer(model.backbone_parameters(), cfg.learning_rate)
        for step_i in range(cfg.steps):
            idx = rng.integers(0, len(samples), size=min(cfg.batch_size, len(samples)))
            batch = make_stage1_batch(model, data, [samples[i] for i in idx])
            loss = stage1_step(batch, model, opt)
            if step_i % cfg.log_every == 0 or step_i == cfg.steps - 1:
                log.append((step_i, "stage1", loss))
    else:
        if not stage1_done:
            raise MissingStage1Checkpoint("stage 2 requires a stage-1 checkpoint")
        samples = data.stage2_samples()
        if not samples:
            raise ValueError("no stage-2 samples (compact + action chunk) found")
        params = model.action_parameters()
        if cfg.finetune_mode == "joint":
            params = params + model.backbone_parameters()
        opt = make_optimizer(params, cfg.learning_rate)

        if cfg.finetune_mode == "action-expert-only":
            # backbone is frozen: precompute query states once
            z_all, chunk_all = _precompute_stage2_features(model, data, samples)
            for step_i in range(cfg.steps):
                idx = rng.integers(0, len(samples), size=min(cfg.batch_size, len(samples)))
                idx_t = torch.as_tensor(np.sort(idx))
                z = z_all[idx_t]
                chunks = chunk_all[idx_t]
                k = torch.randint(1, model.schedule.T + 1, (len(idx),), generator=gen)
                eps = torch.randn(chunks.shape, dtype=torch.float64, generator=gen)
                loss_t = stage2_loss(model, z, chunks, k, eps)
                if not torch.isfinite(loss_t):
                    raise NonFiniteLoss(f"stage-2 loss {loss_t}")
                opt.zero_grad()
                loss_t.backward()
                opt.step()
                if step_i % cfg.log_every == 0 or step_i == cfg.steps - 1:
                    log.append((step_i, "stage2", float(loss_t.detach())))
        else:
            for step_i in range(cfg.steps):
                idx = rng.integers(0, len(samples), size=min(cfg.batch_size, len(samples)))
                batch = make_stage2_batch(model, data, [samples[i] for i in idx])
                loss = stage2_step(batch, model, opt, gen, cfg.finetune_mode)
                if step_i % cfg.log_every == 0 or step_i == cfg.steps - 1:
                    log.append((step_i, "stage2", loss))

    if log_path is not None:
        with open(log_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "stage", "loss"])
            w.writerows(log)
    return log


@torch.no_grad()
def _precompute_stage2_features(model: VLAModel, data: TrainingData, samples):
    zs, chunks = [], []
    for s in samples:
        grid = model.grid_tensor(data.observation(s))
        ids = ([model.vocab.bos_id] + model.vocab.tokenize(strip_format_tag(s.prompt_text))
               + [model.vocab.sep_id] + model.vocab.tokenize(s.target_text))
        zs.append(compute_z(model, grid, ids))
        chunks.append(torch.as_tensor(s.action_chunk, dtype=torch.float64))
    return torch.stack(zs), torch.stack(chunks)
