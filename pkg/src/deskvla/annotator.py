"""Reasoning-data annotation pipeline.

Turns expert demonstrations into three complementary supervision formats:
a 4-step intention chain, a spatial chain carrying grounded coordinates and
delta-action tokens, and a compact "move <direction> to <object>" string.
The four stages (intention, spatial grounding, compact, action tokens) are
independent per trajectory and integrate into one JSONL dataset.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import BBox, DIRECTION_VOCAB, Pixel, direction_words, project_point
from .simenv import SCHEMA_VERSION, TaskSpec, TrajStep, TrajectoryRecord

FORMAT_TAGS = {"intention": "<intention>", "spatial": "<spatial>", "compact": "<compact>"}

COMPACT_RE = re.compile(
    r"^move (forward|backward|left|right|up|down|hold)"
    r"( (forward|backward|left|right|up|down))* to [a-z_]+$"
)


class MalformedCompletion(ValueError):
    """LLM completion failed the 4-step parse."""


class NoValidFrames(ValueError):
    """Bbox interpolation received no valid entries."""


# ---------------------------------------------------------------------------
# LLM client abstraction
# ---------------------------------------------------------------------------

class TemplateLLMClient:
    """Deterministic template backend; fills a fixed 4-slot schema."""

    backend = "template"

    _field_re = re.compile(r"instruction: (?P<i>.*)\ntarget: (?P<t>\S+)\ngoal: (?P<g>\S+)")

    def complete(self, prompt: str) -> str:
        m = self._field_re.search(prompt)
        if m is None:
            raise ValueError(f"template prompt missing fields: {prompt!r}")
        instr, target, goal = m.group("i"), m.group("t"), m.group("g")
        return (
            f"1. the user said {instr}\n"
            f"2. the object needed is the {target}\n"
            f"3. the {target} should go to the {goal}\n"
            f"4. plan pick up the {target} and put it on the {goal}\n"
            f"summary: put the {target} on the {goal} ."
        )


class HTTPLLMClient:
    """Minimal HTTP text-completion client: POST {prompt} -> {completion}.

    The API key is read from an environment variable, never stored. One
    retry on transport errors; callers get MalformedCompletion on bad text.
    """

    backend = "external-http"

    def __init__(self, endpoint: str, api_key_env: str = "DESKVLA_LLM_API_KEY",
                 timeout: float = 30.0):
        self.endpoint = endpoint
        self.api_key_env = api_key_env
        self.timeout = timeout

    def complete(self, prompt: str) -> str:
        import requests

        headers = {}
        key = os.environ.get(self.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        last_err = None
        for _ in range(2):  # retry once
            try:
                resp = requests.post(self.endpoint, json={"prompt": prompt},
                                     headers=headers, timeout=self.timeout)
                resp.raise_for_status()
                return resp.json()["completion"]
            except Exception as e:  # noqa: BLE001 - transport errors retried once
                last_err = e
        raise RuntimeError(f"LLM endpoint failed after retry: {last_err}")


# ---------------------------------------------------------------------------
# Intention chain
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IntentionChain:
    steps: tuple  # exactly 4 strings
    summary: str  # single sentence, one terminal period

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))
        if len(self.steps) != 4 or any(not s for s in self.steps):
            raise ValueError("intention chain needs exactly 4 nonempty steps")
        if self.summary.count(".") != 1 or not self.summary.endswith("."):
            raise ValueError(f"summary must be one sentence: {self.summary!r}")

    def rendered_text(self) -> str:
        return " . ".join(self.steps) + " . " + self.summary


def scene_summary_for_task(task: TaskSpec) -> str:
    return f"target: {task.target_class}\ngoal: {task.goal_entity}"


def intention_chain(instruction: str, scene_summary: str, client) -> IntentionChain:
    """Prompt the client for a 4-step latent-intention analysis."""
    if not instruction:
        raise ValueError("instruction must be nonempty")
    prompt = (
        f"instruction: {instruction}\n{scene_summary}\n"
        "decompose the task into 4 numbered reasoning steps, then a summary line"
    )
    text = client.complete(prompt)
    chain = _parse_chain(text)
    if chain is None and client.backend != "template":
        chain = _parse_chain(client.complete(prompt))  # retry once
    if chain is None:
        raise MalformedCompletion(f"cannot parse 4-step chain from: {text!r}")
    return chain


def _parse_chain(text: str) -> Optional[IntentionChain]:
    steps, summary = [], None
    for line in text.strip().splitlines():
        line = line.strip()
        m = re.match(r"^([1-4])\.\s*(.+)$", line)
        if m:
            steps.append(m.group(2).strip())
        elif line.lower().startswith("summary:"):
            summary = line[len("summary:"):].strip()
    if len(steps) != 4 or not summary:
        return None
    try:
        return IntentionChain(steps=tuple(steps), summary=summary)
    except ValueError:
        return None


# ---------------------------------------------------------------------------
# Delta-action tokens
# ---------------------------------------------------------------------------

NUM_BINS = 16

DEFAULT_BIN_RANGES = tuple([(-0.05, 0.05)] * 3 + [(-0.2, 0.2)] * 3)


@dataclass(frozen=True)
class DeltaActionTokens:
    pose_bins: tuple  # 6 ints in [0, 16)
    gripper_token: int  # 0 or 1

    def __post_init__(self):
        object.__setattr__(self, "pose_bins", tuple(int(b) for b in self.pose_bins))
        if len(self.pose_bins) != 6 or any(not (0 <= b < NUM_BINS) for b in self.pose_bins):
            raise ValueError(f"pose bins out of range: {self.pose_bins}")
        if self.gripper_token not in (0, 1):
            raise ValueError("gripper token must be 0 or 1")


def discretize_delta(delta, ranges=DEFAULT_BIN_RANGES) -> DeltaActionTokens:
    """16-bin quantization of the 6 continuous pose dims; gripper is binary."""
    delta = np.asarray(delta, dtype=np.float64).reshape(7)
    bins = []
    for x, (lo, hi) in zip(delta[:6], ranges):
        if not lo < hi:
            raise ValueError(f"bad bin range ({lo}, {hi})")
        width = (hi - lo) / NUM_BINS
        bins.append(int(min(NUM_BINS - 1, max(0, np.floor((x - lo) / width)))))
    return DeltaActionTokens(pose_bins=tuple(bins),
                             gripper_token=1 if delta[6] >= 0.5 else 0)


def undiscretize(tokens: DeltaActionTokens, ranges=DEFAULT_BIN_RANGES) -> np.ndarray:
    """Bin centers; inverse of discretize_delta up to half a bin width."""
    out = np.zeros(7, dtype=np.float64)
    for i, (b, (lo, hi)) in enumerate(zip(tokens.pose_bins, ranges)):
        width = (hi - lo) / NUM_BINS
        out[i] = lo + (b + 0.5) * width
    out[6] = float(tokens.gripper_token)
    return out


# ---------------------------------------------------------------------------
# Bbox interpolation
# ---------------------------------------------------------------------------

def interpolate_bboxes(seq):
    """Replace missing entries with the nearest valid frame's bbox (tie -> earlier)."""
    valid = [i for i, b in enumerate(seq) if b is not None]
    if not valid:
        raise NoValidFrames("no valid bboxes to interpolate from")
    out = []
    for i, b in enumerate(seq):
        if b is not None:
            out.append(b)
        else:
            nearest = min(valid, key=lambda j: (abs(j - i), j))
            out.append(seq[nearest])
    return out


# ---------------------------------------------------------------------------
# Spatial chain
# ---------------------------------------------------------------------------

LOC_BINS = 64


def _loc_index(p: float, size: float) -> int:
    return int(min(LOC_BINS - 1, max(0, np.floor(p / size * LOC_BINS))))


@dataclass(frozen=True)
class SpatialChain:
    summary: str
    ee_pixel: Pixel
    target_bbox: BBox
    delta_tokens: DeltaActionTokens
    rendered_text: str


def spatial_chain(chain: IntentionChain, ee_px: Pixel, bbox: BBox,
                  tokens: DeltaActionTokens,
                  image_width: int = 128, image_height: int = 128) -> SpatialChain:
    """Integrate the compressed intention summary with grounded coordinates.

    Coordinates are embedded as quantized 64-cell location tokens; the stored
    ee pixel and bbox are snapped to the quantization grid so the rendered
    text parses back to the exact same chain.
    """
    iu = _loc_index(ee_px.u, image_width)
    iv = _loc_index(ee_px.v, image_height)
    bx0 = _loc_index(bbox.x_min, image_width)
    by0 = _loc_index(bbox.y_min, image_height)
    bx1 = _loc_index(bbox.x_max, image_width)
    by1 = _loc_index(bbox.y_max, image_height)
    text = (
        f"{chain.summary} ee u{iu} v{iv} box u{bx0} v{by0} u{bx1} v{by1} act "
        + " ".join(f"a{d}_{b}" for d, b in enumerate(tokens.pose_bins))
        + f" g{tokens.gripper_token}"
    )
    return SpatialChain(
        summary=chain.summary,
        ee_pixel=_pixel_from_loc(iu, iv, image_width, image_height),
        target_bbox=_bbox_from_loc(bx0, by0, bx1, by1, image_width, image_height),
        delta_tokens=tokens,
        rendered_text=text,
    )


def _pixel_from_loc(iu, iv, w, h) -> Pixel:
    u = (iu + 0.5) * w / LOC_BINS
    v = (iv + 0.5) * h / LOC_BINS
    return Pixel(float(u), float(v), bool(0 <= u < w and 0 <= v < h))


def _bbox_from_loc(x0, y0, x1, y1, w, h) -> BBox:
    # lower edges for mins, upper edges for maxes: never degenerate
    return BBox(x0 * w / LOC_BINS, y0 * h / LOC_BINS,
                (x1 + 1) * w / LOC_BINS, (y1 + 1) * h / LOC_BINS)


_SPATIAL_RE = re.compile(
    r"^(?P<summary>.+\.) ee u(?P<iu>\d+) v(?P<iv>\d+) "
    r"box u(?P<bx0>\d+) v(?P<by0>\d+) u(?P<bx1>\d+) v(?P<by1>\d+) act "
    r"a0_(?P<a0>\d+) a1_(?P<a1>\d+) a2_(?P<a2>\d+) "
    r"a3_(?P<a3>\d+) a4_(?P<a4>\d+) a5_(?P<a5>\d+) g(?P<g>[01])$"
)


def parse_spatial_chain(text: str, image_width: int = 128,
                        image_height: int = 128) -> SpatialChain:
    m = _SPATIAL_RE.match(text)
    if m is None:
        raise ValueError(f"unparseable spatial chain: {text!r}")
    tokens = DeltaActionTokens(
        pose_bins=tuple(int(m.group(f"a{i}")) for i in range(6)),
        gripper_token=int(m.group("g")),
    )
    return SpatialChain(
        summary=m.group("summary"),
        ee_pixel=_pixel_from_loc(int(m.group("iu")), int(m.group("iv")),
                                 image_width, image_height),
        target_bbox=_bbox_from_loc(int(m.group("bx0")), int(m.group("by0")),
                                   int(m.group("bx1")), int(m.group("by1")),
                                   image_width, image_height),
        delta_tokens=tokens,
        rendered_text=text,
    )


# ---------------------------------------------------------------------------
# Compact reasoning
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CompactReasoning:
    directions: tuple  # 1-3 words
    object_name: str

    def __post_init__(self):
        object.__setattr__(self, "directions", tuple(self.directions))
        if not 1 <= len(self.directions) <= 3:
            raise ValueError("need 1-3 direction words")
        for w in self.directions:
            if w not in DIRECTION_VOCAB + ("hold",):
                raise ValueError(f"unknown direction word {w!r}")

    @property
    def rendered_text(self) -> str:
        return "move " + " ".join(self.directions) + " to " + self.object_name


def compact_reasoning(step: TrajStep, task: TaskSpec,
                      deadband: float = 0.005) -> CompactReasoning:
    """Task-progress-aware minimal reasoning for one trajectory step.

    The gripper status picks the object word: open means the target is still
    to be grasped, closed means the gripper is carrying toward the goal.
    Stationary steps emit the single word "hold".
    """
    words = direction_words(step.action, deadband)
    if not words:
        words = ["hold"]
    obj = task.target_class if step.pose.gripper < 0.5 else task.goal_entity
    return CompactReasoning(directions=tuple(words), object_name=obj)


# ---------------------------------------------------------------------------
# Dataset assembly
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ReasoningSample:
    prompt_text: str
    target_text: str
    format: str  # intention | spatial | compact
    split: str  # train | heldout
    traj_id: int
    step: int
    action_chunk: Optional[np.ndarray] = None  # H x 7, on compact samples

    def to_json(self) -> dict:
        d = {
            "schema_version": SCHEMA_VERSION,
            "prompt_text": self.prompt_text,
            "target_text": self.target_text,
            "format": self.format,
            "split": self.split,
            "traj_id": self.traj_id,
            "step": self.step,
        }
        if self.action_chunk is not None:
            d["action_chunk"] = [[float(v) for v in row] for row in self.action_chunk]
        return d

    @staticmethod
    def from_json(d: dict) -> "ReasoningSample":
        chunk = d.get("action_chunk")
        return ReasoningSample(
            prompt_text=d["prompt_text"],
            target_text=d["target_text"],
            format=d["format"],
            split=d["split"],
            traj_id=d["traj_id"],
            step=d["step"],
            action_chunk=np.asarray(chunk, dtype=np.float64) if chunk is not None else None,
        )


def action_chunk_at(traj: TrajectoryRecord, i: int, horizon: int) -> np.ndarray:
    """Next `horizon` recorded deltas from step i, zero-padded at episode end."""
    chunk = np.zeros((horizon, 7), dtype=np.float64)
    for j in range(horizon):
        if i + j < len(traj.steps):
            chunk[j] = traj.steps[i + j].action
    return chunk


def annotate_trajectory(traj_id: int, traj: TrajectoryRecord, task: TaskSpec,
                        formats, client, horizon: int = 8,
                        deadband: float = 0.005,
                        bin_ranges=DEFAULT_BIN_RANGES):
    """All requested reasoning samples for one trajectory."""
    samples = []
    chain = None
    if "intention" in formats or "spatial" in formats:
        chain = intention_chain(traj.instruction, scene_summary_for_task(task), client)
    bboxes = None
    if "spatial" in formats:
        bboxes = interpolate_bboxes([s.detections for s in traj.steps])
    calib = traj.calibration

    for i, st in enumerate(traj.steps):
        if "intention" in formats:
            samples.append(ReasoningSample(
                prompt_text=f"{traj.instruction} {FORMAT_TAGS['intention']}",
                target_text=chain.rendered_text(),
                format="intention", split="train", traj_id=traj_id, step=i))
        if "spatial" in formats:
            ee_px = project_point(calib, st.pose.position)
            tokens = discretize_delta(st.action, bin_ranges)
            sc = spatial_chain(chain, ee_px, bboxes[i], tokens,
                               calib.image_width, calib.image_height)
            samples.append(ReasoningSample(
                prompt_text=f"{traj.instruction} {FORMAT_TAGS['spatial']}",
                target_text=sc.rendered_text,
                format="spatial", split="train", traj_id=traj_id, step=i))
        if "compact" in formats:
            cr = compact_reasoning(st, task, deadband)
            samples.append(ReasoningSample(
                prompt_text=f"{traj.instruction} {FORMAT_TAGS['compact']}",
                target_text=cr.rendered_text,
                format="compact", split="train", traj_id=traj_id, step=i,
                action_chunk=action_chunk_at(traj, i, horizon)))
    return samples


_FORMAT_ORDER = {"intention": 0, "spatial": 1, "compact": 2}


def build_dataset(trajs, tasks_by_name, formats, client, horizon: int = 8,
                  deadband: float = 0.005, bin_ranges=DEFAULT_BIN_RANGES,
                  workers: int = 0):
    """One ReasoningSample per (step, requested format), deterministically ordered.

    Annotation of distinct trajectories is independent; with workers > 0 it
    runs in a thread pool and results are canonically re-sorted.
    """
    if not trajs:
        raise ValueError("need at least one trajectory")
    jobs = [(ti, traj, tasks_by_name[traj.task_name]) for ti, traj in enumerate(trajs)]
    if workers and workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as ex:
            chunks = list(ex.map(
                lambda j: annotate_trajectory(j[0], j[1], j[2], formats, client,
                                              horizon, deadband, bin_ranges), jobs))
    else:
        chunks = [annotate_trajectory(ti, traj, task, formats, client,
                                      horizon, deadband, bin_ranges)
                  for ti, traj, task in jobs]
    samples = [s for chunk in chunks for s in chunk]
    samples.sort(key=lambda s: (s.traj_id, s.step, _FORMAT_ORDER[s.format]))
    return samples


def save_dataset(path, samples):
    with open(path, "w") as f:
        for s in samples:
            f.write(json.dumps(s.to_json()) + "\n")


def load_dataset(path):
    with open(path) as f:
        return [ReasoningSample.from_json(json.loads(line)) for line in f]
