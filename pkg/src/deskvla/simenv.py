"""Deterministic tabletop pick-and-place world.

A kinematic (no dynamics) scene: the end-effector integrates delta actions,
a gripper crossing 0.5 near an object grasps it, and the grasped object
tracks the end-effector until release. Everything is a pure function of
(inputs, seed), so repeated calls agree bitwise.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .geometry import BBox, CameraCalibration, Pose7, pose_delta, project_point

SCHEMA_VERSION = 1


class PlacementFailure(RuntimeError):
    """Rejection sampling could not place the scene objects."""


class ActionOutOfRange(ValueError):
    """Delta action exceeds per-step limits."""


class NoFeasibleAction(RuntimeError):
    """Expert cannot act (e.g. target object missing)."""


class UnknownClass(KeyError):
    """Class name not present in the scene or class table."""


class GoalNotMovable(ValueError):
    """perturb_goal called on a task whose goal entity is not a hand."""


class ExpertFailed(RuntimeError):
    """Scripted expert did not reach success within the step budget."""


@dataclass(frozen=True)
class TaskSpec:
    name: str
    target_class: str
    goal_entity: str
    direct_instruction: str
    intention_instructions: tuple
    heldout_instructions: tuple = ()
    success_radius: float = 0.03
    ood: bool = False

    def __post_init__(self):
        object.__setattr__(self, "intention_instructions", tuple(self.intention_instructions))
        object.__setattr__(self, "heldout_instructions", tuple(self.heldout_instructions))
        if not self.intention_instructions:
            raise ValueError("intention_instructions must be nonempty")
        if self.target_class == self.goal_entity:
            raise ValueError("target_class must differ from goal_entity")


@dataclass(frozen=True, eq=False)
class SceneObject:
    id: int
    class_name: str
    pose: Pose7  # gripper field unused
    extent: np.ndarray  # 3-vector, meters
    grasped: bool = False

    def __post_init__(self):
        object.__setattr__(self, "extent", np.asarray(self.extent, dtype=np.float64).reshape(3))
        if not np.all(self.extent > 0):
            raise ValueError("extent components must be positive")

    def __eq__(self, other):
        return (isinstance(other, SceneObject)
                and self.id == other.id
                and self.class_name == other.class_name
                and self.pose == other.pose
                and np.array_equal(self.extent, other.extent)
                and self.grasped == other.grasped)

    def aabb(self):
        c = self.pose.position
        h = self.extent / 2.0
        return c - h, c + h


@dataclass(frozen=True)
class SceneState:
    objects: tuple
    ee: Pose7
    t: int
    seed: int  # base seed identifying this episode's random stream

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        if sum(1 for o in self.objects if o.grasped) > 1:
            raise ValueError("at most one object may be grasped")

    def find(self, class_name: str) -> SceneObject:
        for o in self.objects:
            if o.class_name == class_name:
                return o
        raise UnknownClass(class_name)

    def grasped_object(self) -> Optional[SceneObject]:
        for o in self.objects:
            if o.grasped:
                return o
        return None


@dataclass(frozen=True)
class Observation:
    """G x G x C semantic raster standing in for the camera image."""

    grid: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=np.float64)
        object.__setattr__(self, "grid", g)
        if not np.all(np.isfinite(g)):
            raise ValueError("observation grid must be finite")
        if g.min() < 0.0 or g.max() > 1.0:
            raise ValueError("observation values must lie in [0, 1]")


@dataclass(frozen=True)
class TrajStep:
    observation: Observation
    pose: Pose7
    action: np.ndarray  # delta7 executed from this pose
    detections: Optional[BBox]  # target-class bbox, None when dropped
    instruction: str
    task_name: str


@dataclass(frozen=True)
class TrajectoryRecord:
    steps: tuple
    calibration: CameraCalibration
    seed: int
    task_name: str
    instruction: str

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))
        if len(self.steps) < 2:
            raise ValueError("trajectory needs at least 2 steps")


@dataclass(frozen=True)
class SimConfig:
    grid_size: int = 16
    workspace_lo: tuple = (0.20, -0.20, 0.00)
    workspace_hi: tuple = (0.60, 0.20, 0.30)
    max_xyz_step: float = 0.05
    max_rpy_step: float = 0.2
    grasp_radius: float = 0.03
    max_episode_steps: int = 200
    detection_dropout: float = 0.0
    deadband: float = 0.005
    # expert controller
    expert_gain: float = 0.04
    grasp_eps: float = 0.010
    place_eps: float = 0.012
    carry_height: float = 0.12
    place_z_offset: float = 0.010
    # placement
    placement_margin: float = 0.05
    min_axis_separation: float = 0.055

    @property
    def lo(self):
        return np.asarray(self.workspace_lo, dtype=np.float64)

    @property
    def hi(self):
        return np.asarray(self.workspace_hi, dtype=np.float64)

    def num_channels(self, n_classes: int) -> int:
        # class one-hots + ee marker + gripper + object/ee sub-cell offsets + ee height
        return n_classes + 7


def default_calibration() -> CameraCalibration:
    """Overhead camera centered on the workspace, looking straight down."""
    rotation = np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, -1.0]])
    center = np.array([0.40, 0.0, 0.80])
    return CameraCalibration(
        fx=180.0,
        fy=180.0,
        cx=64.0,
        cy=64.0,
        rotation=rotation,
        translation=-rotation @ center,
        image_width=128,
        image_height=128,
    )


def load_task_bank(path=None):
    """Load the task bank. Returns (class_extents dict, list of TaskSpec)."""
    import yaml

    if path is None:
        from importlib import resources

        text = resources.files("deskvla.data").joinpath("tasks.yaml").read_text()
    else:
        with open(path) as f:
            text = f.read()
    raw = yaml.safe_load(text)
    classes = {k: np.asarray(v, dtype=np.float64) for k, v in raw["classes"].items()}
    tasks = []
    for t in raw["tasks"]:
        tasks.append(
            TaskSpec(
                name=t["name"],
                target_class=t["target_class"],
                goal_entity=t["goal_entity"],
                direct_instruction=t["direct_instruction"],
                intention_instructions=tuple(t["intention_instructions"]),
                heldout_instructions=tuple(t.get("heldout_instructions", ())),
                success_radius=float(t.get("success_radius", 0.03)),
                ood=bool(t.get("ood", False)),
            )
        )
    return classes, tasks


def class_list(classes: dict) -> list:
    return sorted(classes.keys())


def _episode_rng(task: TaskSpec, seed: int) -> np.random.Generator:
    return np.random.default_rng([zlib.crc32(task.name.encode()), seed])


EE_HOME = Pose7(0.30, 0.0, 0.15, 0.0, 0.0, 0.0, 0.0)


def reset_scene(task: TaskSpec, seed: int, classes: dict, cfg: SimConfig = SimConfig()) -> SceneState:
    """Place target, goal entity and 3 distractors without overlap.

    Deterministic given (task, seed). Raises PlacementFailure after 1000
    rejection-sampling attempts.
    """
    rng = _episode_rng(task, seed)
    pool = [c for c in class_list(classes) if c not in (task.target_class, task.goal_entity)]
    distractors = [pool[i] for i in rng.choice(len(pool), size=3, replace=False)]
    names = [task.target_class, task.goal_entity] + distractors

    lo, hi = cfg.lo, cfg.hi
    placed = []
    # retry the whole scene when an early placement boxes in a later object
    for scene_attempt in range(20):
        placed = []
        for idx, name in enumerate(names):
            extent = classes[name]
            for _ in range(1000):
                x = rng.uniform(lo[0] + cfg.placement_margin, hi[0] - cfg.placement_margin)
                y = rng.uniform(lo[1] + cfg.placement_margin, hi[1] - cfg.placement_margin)
                z = extent[2] / 2.0
                cand = SceneObject(idx, name, Pose7(x, y, z, 0, 0, 0, 0), extent)
                if _placement_ok(cand, placed, cfg):
                    placed.append(cand)
                    break
        if len(placed) == len(names):
            break
    if len(placed) != len(names):
        raise PlacementFailure(f"could not place all objects (task {task.name}, seed {seed})")

    jitter = rng.uniform(-0.01, 0.01, size=2)
    ee = Pose7(EE_HOME.x + jitter[0], EE_HOME.y + jitter[1], EE_HOME.z, 0, 0, 0, 0)
    return SceneState(objects=tuple(placed), ee=ee, t=0, seed=seed)


def _placement_ok(cand: SceneObject, placed, cfg: SimConfig) -> bool:
    clo, chi = cand.aabb()
    for other in placed:
        olo, ohi = other.aabb()
        # inflated AABB overlap test
        if np.all(clo - 0.01 <= ohi) and np.all(olo - 0.01 <= chi):
            return False
        # keep object centers apart by more than one raster cell on x or y
        d = np.abs(cand.pose.position[:2] - other.pose.position[:2])
        if d.max() < cfg.min_axis_separation:
            return False
    return True


def step(s: SceneState, a, cfg: SimConfig = SimConfig()) -> SceneState:
    """Integrate one delta action. Raises ActionOutOfRange on limit breach."""
    a = np.asarray(a, dtype=np.float64).reshape(7)
    if np.any(np.abs(a[:3]) > cfg.max_xyz_step + 1e-12):
        raise ActionOutOfRange(f"xyz delta {a[:3]} exceeds {cfg.max_xyz_step}")
    if np.any(np.abs(a[3:6]) > cfg.max_rpy_step + 1e-12):
        raise ActionOutOfRange(f"rpy delta {a[3:6]} exceeds {cfg.max_rpy_step}")

    old = s.ee
    pos = np.clip(old.position + a[:3], cfg.lo, cfg.hi)
    new_grip = float(min(1.0, max(0.0, a[6])))
    ee = Pose7(pos[0], pos[1], pos[2],
               old.roll + a[3], old.pitch + a[4], old.yaw + a[5], new_grip)

    objects = list(s.objects)
    grasped = s.grasped_object()

    if grasped is not None:
        # grasped object tracks the end-effector
        i = objects.index(grasped)
        objects[i] = replace(grasped, pose=Pose7(ee.x, ee.y, ee.z, 0, 0, 0, 0))
        grasped = objects[i]

    closing = old.gripper < 0.5 <= new_grip
    opening = old.gripper >= 0.5 > new_grip
    if closing and grasped is None:
        nearest, best = None, np.inf
        for i, o in enumerate(objects):
            d = float(np.linalg.norm(o.pose.position - ee.position))
            if d < best:
                nearest, best = i, d
        if nearest is not None and best <= cfg.grasp_radius:
            objects[nearest] = replace(objects[nearest],
                                       pose=Pose7(ee.x, ee.y, ee.z, 0, 0, 0, 0),
                                       grasped=True)
    elif opening and grasped is not None:
        i = objects.index(grasped)
        objects[i] = replace(grasped, grasped=False)

    return SceneState(objects=tuple(objects), ee=ee, t=s.t + 1, seed=s.seed)


def _goal_position(s: SceneState, task: TaskSpec) -> np.ndarray:
    if task.goal_entity.startswith("zone:"):
        return np.asarray([float(v) for v in task.goal_entity[5:].split(",")], dtype=np.float64)
    return s.find(task.goal_entity).pose.position


def expert_action(s: SceneState, task: TaskSpec, cfg: SimConfig = SimConfig()) -> np.ndarray:
    """Scripted proportional pick-and-place controller."""
    try:
        target = s.find(task.target_class)
    except UnknownClass as e:
        raise NoFeasibleAction(str(e))
    goal = _goal_position(s, task)
    ee = s.ee.position
    a = np.zeros(7, dtype=np.float64)

    if not target.grasped:
        d = target.pose.position - ee
        if np.linalg.norm(d) < cfg.grasp_eps:
            a[6] = 1.0  # close
        else:
            a[:3] = np.clip(d, -cfg.expert_gain, cfg.expert_gain)
            a[6] = 0.0
    else:
        place = goal + np.array([0.0, 0.0, cfg.place_z_offset])
        d = place - ee
        if np.linalg.norm(d) < cfg.place_eps:
            a[6] = 0.0  # open: release
        else:
            if np.linalg.norm(d[:2]) > 0.05 and ee[2] < cfg.carry_height - 0.005:
                lift = np.array([0.0, 0.0, cfg.carry_height - ee[2]])
                a[:3] = np.clip(lift, -cfg.expert_gain, cfg.expert_gain)
            else:
                a[:3] = np.clip(d, -cfg.expert_gain, cfg.expert_gain)
            a[6] = 1.0  # stay closed while carrying
    return a


def cell_index(p, cfg: SimConfig):
    """Map a world (x, y) position to raster cell indices and sub-cell offsets."""
    lo, hi = cfg.lo, cfg.hi
    g = cfg.grid_size
    fx = (p[0] - lo[0]) / (hi[0] - lo[0]) * g
    fy = (p[1] - lo[1]) / (hi[1] - lo[1]) * g
    ix = int(min(g - 1, max(0, np.floor(fx))))
    iy = int(min(g - 1, max(0, np.floor(fy))))
    ox = float(min(1.0, max(0.0, fx - ix)))
    oy = float(min(1.0, max(0.0, fy - iy)))
    return ix, iy, ox, oy


def render(s: SceneState, classes: dict, cfg: SimConfig = SimConfig()) -> Observation:
    """Rasterize the scene into a G x G x C grid of values in [0, 1]."""
    names = class_list(classes)
    n = len(names)
    g = cfg.grid_size
    grid = np.zeros((g, g, cfg.num_channels(n)), dtype=np.float64)
    ch_ee, ch_grip = n, n + 1
    ch_ox, ch_oy = n + 2, n + 3
    ch_ex, ch_ey, ch_ez = n + 4, n + 5, n + 6

    for o in s.objects:
        ix, iy, ox, oy = cell_index(o.pose.position, cfg)
        grid[ix, iy, names.index(o.class_name)] = 1.0
        grid[ix, iy, ch_ox] = ox
        grid[ix, iy, ch_oy] = oy

    ix, iy, ox, oy = cell_index(s.ee.position, cfg)
    grid[ix, iy, ch_ee] = 1.0
    grid[ix, iy, ch_ex] = ox
    grid[ix, iy, ch_ey] = oy
    zlo, zhi = cfg.lo[2], cfg.hi[2]
    grid[ix, iy, ch_ez] = (s.ee.z - zlo) / (zhi - zlo)
    grid[ix, iy, ch_grip] = s.ee.gripper
    return Observation(grid)


def detect(s: SceneState, class_name: str, dropout_prob: float,
           calib: CameraCalibration, classes: dict = None) -> Optional[BBox]:
    """Ground-truth image-plane bbox of an object, dropped with given probability.

    The dropout draw is seeded from (episode seed, step, class), so repeated
    calls on the same state agree.
    """
    if not (0.0 <= dropout_prob < 1.0):
        raise ValueError("dropout_prob must be in [0, 1)")
    obj = s.find(class_name)  # raises UnknownClass
    rng = np.random.default_rng([s.seed, s.t, zlib.crc32(class_name.encode())])
    if rng.random() < dropout_prob:
        return None
    c = obj.pose.position
    h = obj.extent / 2.0
    us, vs = [], []
    for sx in (-1, 1):
        for sy in (-1, 1):
            for sz in (-1, 1):
                px = project_point(calib, c + h * np.array([sx, sy, sz]))
                us.append(px.u)
                vs.append(px.v)
    return BBox(
        x_min=float(np.clip(min(us), 0, calib.image_width - 1)),
        y_min=float(np.clip(min(vs), 0, calib.image_height - 1)),
        x_max=float(np.clip(max(us), 1e-6, calib.image_width)),
        y_max=float(np.clip(max(vs), 1e-6, calib.image_height)),
    )


def is_success(s: SceneState, task: TaskSpec) -> bool:
    """Target ungrasped, within success_radius of the goal, gripper open."""
    try:
        target = s.find(task.target_class)
        goal = _goal_position(s, task)
    except UnknownClass:
        return False
    return (
        not target.grasped
        and float(np.linalg.norm(target.pose.position - goal)) < task.success_radius
        and s.ee.gripper < 0.5
    )


def perturb_goal(s: SceneState, rng: np.random.Generator,
                 cfg: SimConfig = SimConfig(), max_shift: float = 0.08) -> SceneState:
    """Displace the hand goal once by a bounded planar offset."""
    hand = None
    for o in s.objects:
        if o.class_name == "hand":
            hand = o
    if hand is None:
        raise GoalNotMovable("scene has no hand goal")
    theta = rng.uniform(0.0, 2.0 * np.pi)
    r = rng.uniform(0.02, max_shift)
    offset = np.array([r * np.cos(theta), r * np.sin(theta), 0.0])
    pos = np.clip(hand.pose.position + offset,
                  cfg.lo + cfg.placement_margin, cfg.hi - cfg.placement_margin)
    pos[2] = hand.pose.z
    objects = [
        replace(o, pose=Pose7(pos[0], pos[1], pos[2], 0, 0, 0, 0)) if o is hand else o
        for o in s.objects
    ]
    return SceneState(objects=tuple(objects), ee=s.ee, t=s.t, seed=s.seed)


def generate_demo(task: TaskSpec, seed: int, classes: dict,
                  cfg: SimConfig = SimConfig(),
                  calib: CameraCalibration = None) -> TrajectoryRecord:
    """Roll the scripted expert and record a full demonstration."""
    if calib is None:
        calib = default_calibration()
    rng = _episode_rng(task, seed ^ 0x5EED)
    bank = (task.direct_instruction,) + task.intention_instructions
    instruction = bank[int(rng.integers(len(bank)))]

    s = reset_scene(task, seed, classes, cfg)
    steps = []
    for _ in range(cfg.max_episode_steps):
        obs = render(s, classes, cfg)
        det = detect(s, task.target_class, cfg.detection_dropout, calib)
        a = expert_action(s, task, cfg)
        steps.append(TrajStep(obs, s.ee, a, det, instruction, task.name))
        s = step(s, a, cfg)
        if is_success(s, task):
            break
    if not is_success(s, task):
        raise ExpertFailed(f"expert did not finish task {task.name} seed {seed}")
    # terminal step with zero action, for replay closure
    obs = render(s, classes, cfg)
    det = detect(s, task.target_class, cfg.detection_dropout, calib)
    steps.append(TrajStep(obs, s.ee, np.zeros(7), det, instruction, task.name))
    return TrajectoryRecord(steps=tuple(steps), calibration=calib, seed=seed,
                            task_name=task.name, instruction=instruction)


# ---------------------------------------------------------------------------
# JSONL serialization
# ---------------------------------------------------------------------------

def save_trajectories(path, records, classes: dict, cfg: SimConfig):
    """Write trajectories as JSONL: a header line then one step per line.

    Observations are not stored; they are re-rendered deterministically from
    the recorded scene snapshots on load.
    """
    names = class_list(classes)
    with open(path, "w") as f:
        for ti, rec in enumerate(records):
            # reconstruct per-step scenes by replaying
            header = {
                "kind": "header",
                "schema_version": SCHEMA_VERSION,
                "traj_id": ti,
                "task": rec.task_name,
                "seed": rec.seed,
                "instruction": rec.instruction,
                "calibration": rec.calibration.to_dict(),
                "num_steps": len(rec.steps),
            }
            f.write(json.dumps(header) + "\n")
            for si, st in enumerate(rec.steps):
                line = {
                    "kind": "step",
                    "traj_id": ti,
                    "step": si,
                    "pose": [float(v) for v in st.pose.as_array()],
                    "action": [float(v) for v in st.action],
                    "bbox": list(st.detections.as_tuple()) if st.detections else None,
                    "scene": _scene_blob(st, names),
                }
                f.write(json.dumps(line) + "\n")


def _scene_blob(st: TrajStep, names):
    # the observation grid is a pure function of this blob plus the pose
    g = st.observation.grid
    return {"grid_shape": list(g.shape), "grid_nonzero": _sparse(g)}


def _sparse(g: np.ndarray):
    idx = np.nonzero(g)
    vals = g[idx]
    return [[int(a), int(b), int(c), float(v)] for a, b, c, v in zip(*idx, vals)]


def load_trajectories(path, classes: dict, cfg: SimConfig):
    """Inverse of save_trajectories."""
    records = []
    header = None
    steps = []
    with open(path) as f:
        for line in f:
            d = json.loads(line)
            if d["kind"] == "header":
                if header is not None:
                    records.append(_finish_record(header, steps))
                header, steps = d, []
            else:
                shape = d["scene"]["grid_shape"]
                grid = np.zeros(shape, dtype=np.float64)
                for a, b, c, v in d["scene"]["grid_nonzero"]:
                    grid[a, b, c] = v
                steps.append(
                    TrajStep(
                        observation=Observation(grid),
                        pose=Pose7.from_array(d["pose"]),
                        action=np.asarray(d["action"], dtype=np.float64),
                        detections=BBox(*d["bbox"]) if d["bbox"] else None,
                        instruction=header["instruction"],
                        task_name=header["task"],
                    )
                )
    if header is not None:
        records.append(_finish_record(header, steps))
    return records


def _finish_record(header, steps):
    return TrajectoryRecord(
        steps=tuple(steps),
        calibration=CameraCalibration.from_dict(header["calibration"]),
        seed=header["seed"],
        task_name=header["task"],
        instruction=header["instruction"],
    )
