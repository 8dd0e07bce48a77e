"""Camera projection, pose arithmetic and direction-word extraction.

Everything in here is a pure function over immutable inputs, so it is safe
to call from parallel workers without locking.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * np.pi

# (axis index, positive word, negative word), in canonical output order.
DEFAULT_AXIS_WORDS = (
    (0, "forward", "backward"),
    (1, "left", "right"),
    (2, "up", "down"),
)

DIRECTION_VOCAB = ("forward", "backward", "left", "right", "up", "down")


class PointBehindCamera(ValueError):
    """3D point lies at or behind the camera plane."""


def wrap_angle(theta: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    return float(theta - TWO_PI * np.ceil((theta - np.pi) / TWO_PI))


@dataclass(frozen=True)
class Pose7:
    """7-DoF end-effector state: xyz (m), rpy (rad), gripper in [0, 1]."""

    x: float
    y: float
    z: float
    roll: float
    pitch: float
    yaw: float
    gripper: float

    def __post_init__(self):
        vals = (self.x, self.y, self.z, self.roll, self.pitch, self.yaw, self.gripper)
        if not np.all(np.isfinite(vals)):
            raise ValueError(f"non-finite pose fields: {vals}")
        object.__setattr__(self, "roll", wrap_angle(self.roll))
        object.__setattr__(self, "pitch", wrap_angle(self.pitch))
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))
        object.__setattr__(self, "gripper", float(min(1.0, max(0.0, self.gripper))))

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)

    @property
    def rpy(self) -> np.ndarray:
        return np.array([self.roll, self.pitch, self.yaw], dtype=np.float64)

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.x, self.y, self.z, self.roll, self.pitch, self.yaw, self.gripper],
            dtype=np.float64,
        )

    @staticmethod
    def from_array(a) -> "Pose7":
        a = np.asarray(a, dtype=np.float64)
        return Pose7(*[float(v) for v in a])


@dataclass(frozen=True)
class Pixel:
    u: float
    v: float
    in_frame: bool


@dataclass(frozen=True)
class CameraCalibration:
    """Pinhole camera: intrinsics in pixels plus world-to-camera extrinsics."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray  # 3x3 world-to-camera
    translation: np.ndarray  # 3-vector, meters
    image_width: int
    image_height: int

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.image_width <= 0 or self.image_height <= 0:
            raise ValueError("image dimensions must be positive")
        r = self.rotation
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-9):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValueError("rotation determinant must be +1")

    def to_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "rotation": [float(v) for v in self.rotation.reshape(-1)],  # row-major
            "translation": [float(v) for v in self.translation],
            "image_width": self.image_width,
            "image_height": self.image_height,
        }

    @staticmethod
    def from_dict(d: dict) -> "CameraCalibration":
        return CameraCalibration(
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            rotation=np.asarray(d["rotation"], dtype=np.float64).reshape(3, 3),
            translation=np.asarray(d["translation"], dtype=np.float64),
            image_width=int(d["image_width"]),
            image_height=int(d["image_height"]),
        )


@dataclass(frozen=True)
class BBox:
    """Axis-aligned image-plane bounding box, pixels."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate bbox {self}")

    def as_tuple(self):
        return (self.x_min, self.y_min, self.x_max, self.y_max)


def project_point(calib: CameraCalibration, p) -> Pixel:
    """Project a 3D world point onto the image plane.

    Raises PointBehindCamera when the camera-frame depth is <= 1e-6.
    """
    p = np.asarray(p, dtype=np.float64).reshape(3)
    cam = calib.rotation @ p + calib.translation
    if cam[2] <= 1e-6:
        raise PointBehindCamera(f"camera-frame z={cam[2]:.3g}")
    u = calib.fx * (cam[0] / cam[2]) + calib.cx
    v = calib.fy * (cam[1] / cam[2]) + calib.cy
    in_frame = (0.0 <= u < calib.image_width) and (0.0 <= v < calib.image_height)
    return Pixel(float(u), float(v), bool(in_frame))


def pose_delta(a: Pose7, b: Pose7) -> np.ndarray:
    """Continuous delta from pose a to pose b.

    Returns a 7-vector: xyz differences, wrapped rpy differences in (-pi, pi],
    and b's gripper command in the last slot.
    """
    return np.array(
        [
            b.x - a.x,
            b.y - a.y,
            b.z - a.z,
            wrap_angle(b.roll - a.roll),
            wrap_angle(b.pitch - a.pitch),
            wrap_angle(b.yaw - a.yaw),
            b.gripper,
        ],
        dtype=np.float64,
    )


def direction_words(delta, deadband: float, axis_words=DEFAULT_AXIS_WORDS) -> list:
    """Translate translational components of a delta into direction words.

    Per axis, |delta| must exceed the deadband (meters) to emit a word.
    Output order follows the axis_words table, so it is deterministic and
    never contains both words of an antonym pair.
    """
    if deadband <= 0:
        raise ValueError("deadband must be positive")
    delta = np.asarray(delta, dtype=np.float64)
    words = []
    for axis, pos_word, neg_word in axis_words:
        d = delta[axis]
        if abs(d) > deadband:
            words.append(pos_word if d > 0 else neg_word)
    return words
