"""Toy vision-language-action network.

A word-level vocabulary, a decoder-only backbone over [visual; text; queries]
sequences, a 4-layer connector refining query states into diffusion
conditions, and a DiT denoiser over action chunks. Everything runs in double
precision so analytic gradients can be checked against finite differences.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from .annotator import FORMAT_TAGS, LOC_BINS, NUM_BINS
from .geometry import DIRECTION_VOCAB
from .simenv import Observation

PAD, BOS, EOS, SEP = "<pad>", "<bos>", "<eos>", "<sep>"

TEMPLATE_WORDS = (
    "the user said object needed is should go to plan pick up and put it on "
    "move hold ee box act ."
).split()


class UnknownWord(KeyError):
    """Word not in the vocabulary."""


class ContextOverflow(ValueError):
    """Assembled sequence exceeds the context length."""


class TooFewPositions(ValueError):
    """Sequence shorter than the number of query positions."""


class TimestepOutOfRange(ValueError):
    """Diffusion timestep outside [1, T]."""


class BadRange(ValueError):
    """Invalid noise-schedule beta range."""


class Vocab:
    """Dense, stable word-level vocabulary built from the task bank."""

    def __init__(self, words):
        self.words = list(words)
        self.word2id = {w: i for i, w in enumerate(self.words)}
        if len(self.word2id) != len(self.words):
            raise ValueError("duplicate words in vocabulary")

    def __len__(self):
        return len(self.words)

    @property
    def pad_id(self):
        return self.word2id[PAD]

    @property
    def bos_id(self):
        return self.word2id[BOS]

    @property
    def eos_id(self):
        return self.word2id[EOS]

    @property
    def sep_id(self):
        return self.word2id[SEP]

    def tokenize(self, text: str):
        ids = []
        for w in text.split():
            if w not in self.word2id:
                raise UnknownWord(w)
            ids.append(self.word2id[w])
        return ids

    def detokenize(self, ids) -> str:
        return " ".join(self.words[int(i)] for i in ids)


def build_vocab(tasks) -> Vocab:
    """Deterministic vocabulary covering the task bank and all rendered formats."""
    words = set(TEMPLATE_WORDS)
    words.update(DIRECTION_VOCAB)
    for t in tasks:
        words.update(t.target_class.split())
        words.update(t.goal_entity.split())
        for instr in (t.direct_instruction,) + t.intention_instructions + t.heldout_instructions:
            words.update(instr.split())
    ordered = [PAD, BOS, EOS, SEP] + list(FORMAT_TAGS.values()) + sorted(words)
    ordered += [f"u{i}" for i in range(LOC_BINS)]
    ordered += [f"v{i}" for i in range(LOC_BINS)]
    ordered += [f"a{d}_{b}" for d in range(6) for b in range(NUM_BINS)]
    ordered += ["g0", "g1"]
    vocab = Vocab(ordered)
    if len(vocab) >= 1024:
        raise ValueError(f"vocabulary too large: {len(vocab)}")
    return vocab


@dataclass(frozen=True)
class BackboneConfig:
    layers: int = 4
    heads: int = 4
    model_dim: int = 128
    context_len: int = 512
    query_count: int = 8
    diff_dim: int = 64
    chunk_horizon: int = 8
    seed: int = 0
    grid_size: int = 16
    grid_channels: int = 16
    connector_layers: int = 4
    dit_layers: int = 4
    dit_heads: int = 4
    diffusion_steps: int = 100
    beta_start: float = 0.001
    beta_end: float = 0.1
    mlp_ratio: int = 4
    patch_size: int = 1  # cells per side folded into one visual token

    def __post_init__(self):
        if self.model_dim % self.heads != 0 or self.diff_dim % self.dit_heads != 0:
            raise ValueError("model dims must divide head counts")
        if self.query_count < 1:
            raise ValueError("need at least one query token")
        if self.chunk_horizon < 1:
            raise ValueError("chunk horizon must be >= 1")
        if self.patch_size < 1 or self.grid_size % self.patch_size != 0:
            raise ValueError("patch_size must divide grid_size")


# Per-dim scale mapping raw deltas to roughly unit range for diffusion.
ACTION_SCALE = np.array([0.05, 0.05, 0.05, 0.2, 0.2, 0.2, 1.0])


def normalize_chunk(chunk: torch.Tensor) -> torch.Tensor:
    scale = torch.as_tensor(ACTION_SCALE, dtype=chunk.dtype)
    out = chunk / scale
    out = out.clone()
    out[..., 6] = 2.0 * chunk[..., 6] - 1.0
    return out


def denormalize_chunk(chunk: torch.Tensor) -> torch.Tensor:
    scale = torch.as_tensor(ACTION_SCALE, dtype=chunk.dtype)
    out = chunk * scale
    out = out.clone()
    out[..., 6] = (chunk[..., 6] + 1.0) / 2.0
    return out


# ---------------------------------------------------------------------------
# Diffusion schedule
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DiffusionSchedule:
    T: int
    betas: np.ndarray  # length T, index k-1 holds beta_k
    alpha_bar: np.ndarray  # length T+1, alpha_bar[0] = 1

    def bar(self, k: int) -> float:
        if not 0 <= k <= self.T:
            raise TimestepOutOfRange(f"k={k} outside [0, {self.T}]")
        return float(self.alpha_bar[k])


def make_schedule(T: int, beta_start: float, beta_end: float) -> DiffusionSchedule:
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise BadRange(f"bad beta range ({beta_start}, {beta_end})")
    if T < 1:
        raise BadRange("T must be >= 1")
    betas = np.linspace(beta_start, beta_end, T)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return DiffusionSchedule(T=T, betas=betas, alpha_bar=alpha_bar)


def reconstruct_x0(A_k: torch.Tensor, k: int, eps_hat: torch.Tensor,
                   sched: DiffusionSchedule) -> torch.Tensor:
    """Clean-chunk estimate from a noisy chunk and a noise prediction."""
    if not 1 <= k <= sched.T:
        raise TimestepOutOfRange(f"k={k} outside [1, {sched.T}]")
    ab = sched.bar(k)
    return (A_k - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)


# ---------------------------------------------------------------------------
# Transformer pieces
# ---------------------------------------------------------------------------

class SelfAttention(nn.Module):
    def __init__(self, dim, heads, causal):
        super().__init__()
        self.heads = heads
        self.causal = causal
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x):  # x: (B, L, D)
        b, l, d = x.shape
        h = self.heads
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q = q.view(b, l, h, d // h).transpose(1, 2)
        k = k.view(b, l, h, d // h).transpose(1, 2)
        v = v.view(b, l, h, d // h).transpose(1, 2)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(d // h)
        if self.causal:
            mask = torch.triu(torch.ones(l, l, dtype=torch.bool), diagonal=1)
            att = att.masked_fill(mask, float("-inf"))
        att = torch.softmax(att, dim=-1)
        y = (att @ v).transpose(1, 2).reshape(b, l, d)
        return self.out(y)


class Block(nn.Module):
    def __init__(self, dim, heads, causal, mlp_ratio=4):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, heads, causal)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim)
        )

    def forward(self, x):
        x = x + self.attn(self.ln1(x))
        return x + self.mlp(self.ln2(x))


class Backbone(nn.Module):
    """Decoder-only causal transformer over [visual; text; queries]."""

    def __init__(self, cfg: BackboneConfig, vocab_size: int):
        super().__init__()
        d, g, p = cfg.model_dim, cfg.grid_size, cfg.patch_size
        self.cfg = cfg
        self.tok_emb = nn.Embedding(vocab_size, d)
        self.vis_proj = nn.Linear(p * p * cfg.grid_channels, d)
        self.row_emb = nn.Parameter(torch.randn(g // p, d) * 0.02)
        self.col_emb = nn.Parameter(torch.randn(g // p, d) * 0.02)
        self.pos_emb = nn.Parameter(torch.randn(cfg.context_len, d) * 0.02)
        self.queries = nn.Parameter(torch.randn(cfg.query_count, d) * 0.02)
        self.blocks = nn.ModuleList(
            [Block(d, cfg.heads, causal=True, mlp_ratio=cfg.mlp_ratio) for _ in range(cfg.layers)]
        )
        self.ln_f = nn.LayerNorm(d)
        self.lm_head = nn.Linear(d, vocab_size, bias=False)

    def encode_observation(self, grid: torch.Tensor) -> torch.Tensor:
        """(G, G, C) raster -> ((G/P)^2, D) embeddings with 2D positional terms.

        Each P x P block of cells is flattened into one visual token.
        """
        g, p = self.cfg.grid_size, self.cfg.patch_size
        n = g // p
        x = grid.reshape(n, p, n, p, -1).permute(0, 2, 1, 3, 4).reshape(n * n, -1)
        x = self.vis_proj(x)
        rows = self.row_emb.repeat_interleave(n, dim=0)
        cols = self.col_emb.repeat(n, 1)
        return x + rows + cols

    def assemble(self, grid: Optional[torch.Tensor], token_ids,
                 include_queries: bool) -> torch.Tensor:
        """Build the (L, D) input embedding sequence."""
        parts = []
        if grid is not None:
            parts.append(self.encode_observation(grid))
        if len(token_ids) > 0:
            ids = torch.as_tensor(token_ids, dtype=torch.long)
            parts.append(self.tok_emb(ids))
        if include_queries:
            parts.append(self.queries)
        x = torch.cat(parts, dim=0)
        if x.shape[0] > self.cfg.context_len:
            raise ContextOverflow(f"sequence length {x.shape[0]} > {self.cfg.context_len}")
        return x + self.pos_emb[: x.shape[0]]

    def forward_hidden(self, x: torch.Tensor) -> torch.Tensor:
        """Causal forward pass; accepts (L, D) or (B, L, D)."""
        squeeze = x.dim() == 2
        if squeeze:
            x = x.unsqueeze(0)
        if x.shape[1] > self.cfg.context_len:
            raise ContextOverflow(f"sequence length {x.shape[1]} > {self.cfg.context_len}")
        for blk in self.blocks:
            x = blk(x)
        x = self.ln_f(x)
        return x.squeeze(0) if squeeze else x

    def logits(self, hidden: torch.Tensor) -> torch.Tensor:
        return self.lm_head(hidden)


class Connector(nn.Module):
    """Self-attention refiner from query states (N, D) to conditions (N, D_diff).

    Attention is unmasked and positional encodings are off by default, so the
    module is equivariant to permutations of the query rows.
    """

    def __init__(self, cfg: BackboneConfig, use_pos: bool = False):
        super().__init__()
        d = cfg.model_dim
        self.use_pos = use_pos
        self.pos_emb = nn.Parameter(torch.randn(cfg.query_count, d) * 0.02)
        self.blocks = nn.ModuleList(
            [Block(d, cfg.heads, causal=False, mlp_ratio=cfg.mlp_ratio)
             for _ in range(cfg.connector_layers)]
        )
        self.ln = nn.LayerNorm(d)
        self.proj = nn.Linear(d, cfg.diff_dim)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        squeeze = z.dim() == 2
        if squeeze:
            z = z.unsqueeze(0)
        if self.use_pos:
            z = z + self.pos_emb[: z.shape[1]]
        for blk in self.blocks:
            z = blk(z)
        c = self.proj(self.ln(z))
        return c.squeeze(0) if squeeze else c


def timestep_embedding(k: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of diffusion timesteps, (B,) -> (B, dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(1, half - 1)
    )
    args = k.double().unsqueeze(-1) * freqs
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[..., :1])], dim=-1)
    return emb


class ModulatedBlock(nn.Module):
    """Transformer block whose LayerNorms are scaled/shifted by a conditioning
    vector (adaptive LayerNorm).

    Plain additive conditioning cannot change the gain of the token pathway
    because the LayerNorms renormalise it away; per-step noise prediction
    needs exactly such a timestep-dependent gain, so the denoiser uses these
    blocks instead of plain ones.
    """

    def __init__(self, dim, heads, mlp_ratio=4):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim, elementwise_affine=False)
        self.attn = SelfAttention(dim, heads, causal=False)
        self.ln2 = nn.LayerNorm(dim, elementwise_affine=False)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim)
        )
        # Zero init makes the block behave like an unconditioned one at the
        # start of training; the (1 + gain) form keeps gradients alive.
        self.mod = nn.Linear(dim, 6 * dim)
        nn.init.zeros_(self.mod.weight)
        nn.init.zeros_(self.mod.bias)

    def forward(self, x, t):
        s1, b1, g1, s2, b2, g2 = self.mod(t).unsqueeze(-2).chunk(6, dim=-1)
        x = x + (1 + g1) * self.attn(self.ln1(x) * (1 + s1) + b1)
        return x + (1 + g2) * self.mlp(self.ln2(x) * (1 + s2) + b2)


class DiT(nn.Module):
    """Denoiser: self-attention over [condition tokens; action tokens]."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        dd = cfg.diff_dim
        self.cfg = cfg
        self.act_in = nn.Linear(7, dd)
        self.act_pos = nn.Parameter(torch.randn(cfg.chunk_horizon, dd) * 0.02)
        self.t_mlp = nn.Sequential(nn.Linear(dd, dd), nn.SiLU(), nn.Linear(dd, dd))
        self.blocks = nn.ModuleList(
            [ModulatedBlock(dd, cfg.dit_heads, mlp_ratio=cfg.mlp_ratio)
             for _ in range(cfg.dit_layers)]
        )
        self.ln = nn.LayerNorm(dd, elementwise_affine=False)
        self.final_mod = nn.Linear(dd, 2 * dd)
        nn.init.zeros_(self.final_mod.weight)
        nn.init.zeros_(self.final_mod.bias)
        self.head = nn.Linear(dd, 7)
        # Timestep-gated linear skip from the noisy chunk to the output.  The
        # ideal noise estimate is linear in A_k with a timestep-dependent
        # gain; the normalised attention pathway cannot carry raw amplitude,
        # so this path makes that component directly representable.
        self.skip = nn.Linear(7, 7)
        self.skip_gain = nn.Linear(dd, 7)
        nn.init.zeros_(self.skip_gain.weight)
        nn.init.zeros_(self.skip_gain.bias)

    def forward(self, A_k: torch.Tensor, k, c: torch.Tensor) -> torch.Tensor:
        """Predict the noise on a (normalized) noisy chunk.

        A_k: (H, 7) or (B, H, 7); c: (N, D_diff) or (B, N, D_diff);
        k: int or (B,) tensor of timesteps in [1, T].
        """
        squeeze = A_k.dim() == 2
        if squeeze:
            A_k = A_k.unsqueeze(0)
            c = c.unsqueeze(0)
        b, h, _ = A_k.shape
        k_t = torch.as_tensor(k, dtype=torch.long).reshape(-1)
        if k_t.numel() == 1:
            k_t = k_t.expand(b)
        if torch.any(k_t < 1) or torch.any(k_t > self.cfg.diffusion_steps):
            raise TimestepOutOfRange(f"k={k} outside [1, {self.cfg.diffusion_steps}]")
        t_emb = self.t_mlp(timestep_embedding(k_t, self.cfg.diff_dim))  # (B, Dd)
        act = self.act_in(A_k) + self.act_pos[:h]
        x = torch.cat([c, act], dim=1)
        for blk in self.blocks:
            x = blk(x, t_emb)
        sh, sc = self.final_mod(t_emb).unsqueeze(-2).chunk(2, dim=-1)
        eps = (self.head(self.ln(x[:, -h:]) * (1 + sc) + sh)
               + self.skip_gain(t_emb).unsqueeze(-2) * self.skip(A_k))
        return eps.squeeze(0) if squeeze else eps


# ---------------------------------------------------------------------------
# Full model
# ---------------------------------------------------------------------------

class VLAModel:
    """Bundle of vocab, backbone, connector, DiT and noise schedule."""

    def __init__(self, cfg: BackboneConfig, vocab: Vocab):
        self.cfg = cfg
        self.vocab = vocab
        torch.manual_seed(cfg.seed)
        self.backbone = Backbone(cfg, len(vocab)).double()
        self.connector = Connector(cfg).double()
        self.dit = DiT(cfg).double()
        self.schedule = make_schedule(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end)

    # -- parameter groups ---------------------------------------------------

    def backbone_parameters(self):
        """Stage-1 trainables: backbone weights and embeddings, minus queries."""
        return [p for n, p in self.backbone.named_parameters() if n != "queries"]

    def action_parameters(self):
        """Stage-2 trainables: learnable queries, connector, DiT."""
        return [self.backbone.queries] + list(self.connector.parameters()) + list(
            self.dit.parameters())

    def named_tensors(self):
        out = {}
        for prefix, mod in (("backbone", self.backbone), ("connector", self.connector),
                            ("dit", self.dit)):
            for n, p in mod.named_parameters():
                out[f"{prefix}.{n}"] = p
        return out

    # -- spec operations ----------------------------------------------------

    def tokenize(self, text: str):
        return self.vocab.tokenize(text)

    def detokenize(self, ids) -> str:
        return self.vocab.detokenize(ids)

    def grid_tensor(self, obs: Observation) -> torch.Tensor:
        return torch.as_tensor(obs.grid, dtype=torch.float64)

    def encode_observation(self, obs: Observation) -> torch.Tensor:
        return self.backbone.encode_observation(self.grid_tensor(obs))

    def vlm_forward(self, embeddings: torch.Tensor) -> torch.Tensor:
        return self.backbone.forward_hidden(embeddings)

    def prompt_ids(self, instruction: str):
        return [self.vocab.bos_id] + self.vocab.tokenize(instruction) + [self.vocab.sep_id]

    @torch.no_grad()
    def vlm_generate(self, obs: Observation, instruction: str, max_len: int):
        """Greedy decoding; returns (token ids, hit_budget_without_eos)."""
        if max_len < 1:
            raise ValueError("max_len must be >= 1")
        grid = self.grid_tensor(obs)
        ids = self.prompt_ids(instruction)
        generated = []
        for _ in range(max_len):
            x = self.backbone.assemble(grid, ids + generated, include_queries=False)
            h = self.backbone.forward_hidden(x)
            nxt = int(torch.argmax(self.backbone.logits(h[-1])))
            if nxt == self.vocab.eos_id:
                return generated, False
            generated.append(nxt)
        return generated, True

    def extract_queries(self, hidden: torch.Tensor, n: Optional[int] = None) -> torch.Tensor:
        n = self.cfg.query_count if n is None else n
        if hidden.shape[-2] < n:
            raise TooFewPositions(f"sequence of {hidden.shape[-2]} < {n} queries")
        return hidden[..., -n:, :]

    def connector_forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.connector(z)

    def dit_denoise(self, A_k: torch.Tensor, k, c: torch.Tensor) -> torch.Tensor:
        return self.dit(A_k, k, c)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"DVLA"


class ChecksumMismatch(RuntimeError):
    pass


def save_checkpoint(path, model: VLAModel, stage: str, extra: Optional[dict] = None):
    """Manifest (config + tensor names/shapes + hash) then flat LE float64 payload."""
    tensors = model.named_tensors()
    names = sorted(tensors.keys())
    payload = b"".join(
        tensors[n].detach().numpy().astype("<f8").tobytes() for n in names
    )
    manifest = {
        "schema_version": 1,
        "stage": stage,
        "config": asdict(model.cfg),
        "vocab": model.vocab.words,
        "tensors": [{"name": n, "shape": list(tensors[n].shape)} for n in names],
        "hash": hashlib.sha256(payload).hexdigest(),
        "extra": extra or {},
    }
    blob = json.dumps(manifest).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        f.write(payload)


def load_checkpoint(path):
    """Returns (model, stage, extra). Bitwise inverse of save_checkpoint."""
    with open(path, "rb") as f:
        if f.read(4) != CKPT_MAGIC:
            raise ValueError("not a checkpoint file")
        (n,) = struct.unpack("<Q", f.read(8))
        manifest = json.loads(f.read(n).decode())
        payload = f.read()
    if hashlib.sha256(payload).hexdigest() != manifest["hash"]:
        raise ChecksumMismatch("payload hash mismatch")
    cfg = BackboneConfig(**manifest["config"])
    model = VLAModel(cfg, Vocab(manifest["vocab"]))
    tensors = model.named_tensors()
    offset = 0
    with torch.no_grad():
        for entry in manifest["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(payload, dtype="<f8", count=count, offset=offset)
            offset += count * 8
            tensors[entry["name"]].copy_(torch.from_numpy(arr.reshape(shape).copy()))
    return model, manifest["stage"], manifest["extra"]


def checkpoint_hash(model: VLAModel) -> str:
    tensors = model.named_tensors()
    payload = b"".join(
        tensors[n].detach().numpy().astype("<f8").tobytes() for n in sorted(tensors)
    )
    return hashlib.sha256(payload).hexdigest()


def parameter_hashes(module: nn.Module) -> dict:
    return {
        n: hashlib.sha256(p.detach().numpy().astype("<f8").tobytes()).hexdigest()
        for n, p in module.named_parameters()
    }


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------

def finite_difference_gradient_check(loss_fn, params, h: float = 1e-6,
                                     rel_tol: float = 1e-4) -> float:
    """Compare autograd gradients with central finite differences.

    loss_fn() must be a deterministic scalar function of `params`. Returns the
    worst relative error; raises AssertionError beyond rel_tol.
    """
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, grads):
            g = torch.zeros_like(p) if g is None else g
            flat = p.reshape(-1)
            gflat = g.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                loss_p = loss_fn().item()
                flat[i] = orig - h
                loss_m = loss_fn().item()
                flat[i] = orig
                fd = (loss_p - loss_m) / (2.0 * h)
                an = gflat[i].item()
                rel = abs(fd - an) / max(1.0, abs(fd), abs(an))
                worst = max(worst, rel)
    if worst > rel_tol:
        raise AssertionError(f"gradient check failed: rel error {worst:.3g} > {rel_tol}")
    return worst
