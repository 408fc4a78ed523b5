"""Rigid poses, pinhole camera, and the projections every other module shares.

Frames
------
* ego: x forward, y left, z up.
* camera: x right, y down, z forward.

A :class:`Pose` maps child coordinates into its parent frame,
``p_parent = R @ p_child + t``. Trajectory poses are ego poses expressed in the
trajectory frame (``world`` or ``ego_start``).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

NEAR_CLIP = 0.1


# --------------------------------------------------------------------------
# quaternion helpers, (w, x, y, z), vectorised over leading axes
# --------------------------------------------------------------------------

def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product ``a * b``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_conj(q: np.ndarray) -> np.ndarray:
    q = np.array(q, dtype=np.float64)
    q[..., 1:] *= -1.0
    return q


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit quaternion (no renormalisation)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = np.moveaxis(q, -1, 0)
    r = np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], axis=-1)
    return r.reshape(q.shape[:-1] + (3, 3))


def rotmat_to_quat(r: np.ndarray) -> np.ndarray:
    """Single 3x3 rotation matrix to a unit quaternion with w >= 0."""
    r = np.asarray(r, dtype=np.float64)
    tr = np.trace(r)
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2
        q = [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
    elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
        s = math.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2
        q = [(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
    elif r[1, 1] > r[2, 2]:
        s = math.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2
        q = [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s]
    else:
        s = math.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2
        q = [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s]
    q = quat_normalize(np.array(q))
    return -q if q[0] < 0 else q


def axis_angle_to_quat(v: np.ndarray) -> np.ndarray:
    """Quaternion of a rotation vector; well defined at zero."""
    v = np.asarray(v, dtype=np.float64)
    theta = np.linalg.norm(v, axis=-1, keepdims=True)
    # sin(theta/2)/theta written via np.sinc to stay finite at 0
    k = 0.5 * np.sinc(theta / (2.0 * np.pi))
    return np.concatenate([np.cos(0.5 * theta), k * v], axis=-1)


def yaw_quat(yaw: float) -> np.ndarray:
    return np.array([math.cos(0.5 * yaw), 0.0, 0.0, math.sin(0.5 * yaw)])


def rotation_angle(q: np.ndarray) -> float:
    """Angle in [0, pi] of the rotation represented by ``q``."""
    q = quat_normalize(q)
    return 2.0 * math.atan2(float(np.linalg.norm(q[1:])), abs(float(q[0])))


# --------------------------------------------------------------------------
# Pose
# --------------------------------------------------------------------------

def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform with a unit-quaternion rotation (w, x, y, z) and a translation in meters."""

    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.q, dtype=np.float64).reshape(4)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n == 0.0:
            raise ValueError("pose quaternion must be finite and non-zero")
        object.__setattr__(self, "q", _frozen(q / n))
        object.__setattr__(self, "t", _frozen(np.asarray(self.t, dtype=np.float64).reshape(3)))

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_translation(cls, x: float, y: float, z: float) -> "Pose":
        return cls(t=(x, y, z))

    @classmethod
    def from_yaw(cls, yaw: float, t: Sequence[float] = (0.0, 0.0, 0.0)) -> "Pose":
        return cls(q=yaw_quat(yaw), t=t)

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        return cls(q=rotmat_to_quat(m[:3, :3]), t=m[:3, 3])

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_rotmat(self.q)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.t
        return m

    def apply(self, p: np.ndarray) -> np.ndarray:
        """Transform points of shape (..., 3) from child to parent frame."""
        p = np.asarray(p, dtype=np.float64)
        return p @ self.rotation.T + self.t

    def __matmul__(self, other: "Pose") -> "Pose":
        return se3_compose(self, other)

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        d = se3_compose(se3_inverse(self), other)
        return rotation_angle(d.q) <= atol and float(np.linalg.norm(d.t)) <= atol

    def to_json(self) -> dict:
        return {"q": [float(v) for v in self.q], "p": [float(v) for v in self.t]}

    @classmethod
    def from_json(cls, d: dict) -> "Pose":
        return cls(q=d["q"], t=d["p"])

    def __repr__(self) -> str:
        return f"Pose(q={np.round(self.q, 6).tolist()}, t={np.round(self.t, 6).tolist()})"


def se3_compose(a: Pose, b: Pose) -> Pose:
    """``a o b``: applies ``b`` first, then ``a``."""
    return Pose(q=quat_mul(a.q, b.q), t=a.rotation @ b.t + a.t)


def se3_inverse(a: Pose) -> Pose:
    qi = quat_conj(a.q)
    return Pose(q=qi, t=-(quat_to_rotmat(qi) @ a.t))


# --------------------------------------------------------------------------
# Camera
# --------------------------------------------------------------------------

# ego (x fwd, y left, z up) -> camera (x right, y down, z fwd): cam = (-y, -z, x)
EGO_TO_CAMERA_ROT = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])


def default_ego_to_camera(height: float = 0.0) -> Pose:
    """Forward-facing camera; ``height`` mounts it above the ego origin."""
    r = EGO_TO_CAMERA_ROT
    return Pose(q=rotmat_to_quat(r), t=-(r @ np.array([0.0, 0.0, height])))


@dataclass(frozen=True, eq=False)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    ego_to_camera: Pose = field(default_factory=default_ego_to_camera)
    near_clip: float = NEAR_CLIP

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (self.width > 0 and self.height > 0):
            raise ValueError("image size must be positive")

    def view(self, ego_pose: Pose) -> Pose:
        """Scene-to-camera transform for an ego pose given in the scene frame."""
        return se3_compose(self.ego_to_camera, se3_inverse(ego_pose))

    def to_json(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "w": self.width, "h": self.height, "ego_to_camera": self.ego_to_camera.to_json(),
                "near": self.near_clip}

    @classmethod
    def from_json(cls, d: dict) -> "CameraModel":
        e2c = Pose.from_json(d["ego_to_camera"]) if "ego_to_camera" in d else default_ego_to_camera()
        return cls(fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]), cy=float(d["cy"]),
                   width=int(d["w"]), height=int(d["h"]), ego_to_camera=e2c,
                   near_clip=float(d.get("near", NEAR_CLIP)))


def project_point(p_cam: np.ndarray, cam: CameraModel) -> np.ndarray | None:
    """Pinhole projection; ``None`` when the point is not beyond the near plane."""
    x, y, z = (float(v) for v in p_cam)
    if z <= cam.near_clip:
        return None
    return np.array([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy])


def projection_jacobian(p_cam: np.ndarray, cam: CameraModel) -> np.ndarray:
    """d(u, v)/d(x, y, z) of :func:`project_point`."""
    x, y, z = (float(v) for v in p_cam)
    if z <= cam.near_clip:
        raise ValueError(f"point depth {z} is inside the near clip {cam.near_clip}")
    return np.array([
        [cam.fx / z, 0.0, -cam.fx * x / (z * z)],
        [0.0, cam.fy / z, -cam.fy * y / (z * z)],
    ])


def _project_unchecked(p: np.ndarray, cam: CameraModel) -> np.ndarray:
    return np.stack([cam.fx * p[..., 0] / p[..., 2] + cam.cx,
                     cam.fy * p[..., 1] / p[..., 2] + cam.cy], axis=-1)


def _clip_segment(a: np.ndarray, b: np.ndarray, near: float):
    """Clip a camera-space segment to z >= near. Returns None when fully behind."""
    za, zb = a[2], b[2]
    if za < near and zb < near:
        return None
    if za >= near and zb >= near:
        return a, b
    s = (near - za) / (zb - za)
    c = a + s * (b - a)
    c[2] = near
    return (c, b) if za < near else (a, c)


# --------------------------------------------------------------------------
# Trajectories and boxes
# --------------------------------------------------------------------------

FRAME_IDS = ("world", "ego_start")


@dataclass(frozen=True, eq=False)
class Trajectory:
    timestamps: np.ndarray
    poses: tuple
    frame_id: str = "world"

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=np.float64).reshape(-1)
        poses = tuple(self.poses)
        if self.frame_id not in FRAME_IDS:
            raise ValueError(f"unknown frame id {self.frame_id!r}")
        if len(ts) != len(poses):
            raise ValueError("timestamps and poses differ in length")
        if len(ts) < 1:
            raise ValueError("trajectory needs at least one frame")
        if np.any(np.diff(ts) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        object.__setattr__(self, "timestamps", _frozen(ts))
        object.__setattr__(self, "poses", poses)

    def __len__(self) -> int:
        return len(self.poses)

    @property
    def positions(self) -> np.ndarray:
        return np.stack([p.t for p in self.poses])

    @classmethod
    def from_positions(cls, timestamps, positions, frame_id: str = "ego_start",
                       yaws: Iterable[float] | None = None) -> "Trajectory":
        positions = np.asarray(positions, dtype=np.float64)
        if yaws is None:
            yaws = headings_from_positions(positions)
        poses = tuple(Pose.from_yaw(float(y), p) for y, p in zip(yaws, positions))
        return cls(timestamps, poses, frame_id)

    def to_json(self) -> dict:
        return {"frame_id": self.frame_id,
                "frames": [{"t": float(t), **p.to_json()} for t, p in zip(self.timestamps, self.poses)]}

    @classmethod
    def from_json(cls, d: dict) -> "Trajectory":
        frames = d["frames"]
        return cls([f["t"] for f in frames], [Pose(q=f["q"], t=f["p"]) for f in frames],
                   d.get("frame_id", "world"))

    def dumps(self) -> str:
        return json.dumps(self.to_json())

    @classmethod
    def loads(cls, s: str) -> "Trajectory":
        return cls.from_json(json.loads(s))


def headings_from_positions(positions: np.ndarray) -> np.ndarray:
    """Yaw of the finite-difference tangent (central inside, one-sided at ends)."""
    p = np.asarray(positions, dtype=np.float64)
    if len(p) < 2:
        return np.zeros(len(p))
    tangent = np.gradient(p[:, :2], axis=0)
    return np.arctan2(tangent[:, 1], tangent[:, 0])


def to_ego_start(traj: Trajectory, m0: Pose) -> Trajectory:
    """Express a world trajectory relative to the ego pose ``m0`` of its first frame."""
    if traj.frame_id != "world":
        raise ValueError(f"expected a world trajectory, got {traj.frame_id!r}")
    inv = se3_inverse(m0)
    return Trajectory(traj.timestamps, tuple(se3_compose(inv, p) for p in traj.poses), "ego_start")


@dataclass(frozen=True, eq=False)
class Box3D:
    center: np.ndarray
    size: np.ndarray
    heading: float
    agent_id: int

    def __post_init__(self):
        object.__setattr__(self, "center", _frozen(np.asarray(self.center).reshape(3)))
        object.__setattr__(self, "size", _frozen(np.asarray(self.size).reshape(3)))
        if np.any(self.size <= 0):
            raise ValueError("box size components must be positive")

    def corners(self) -> np.ndarray:
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], float)
        local = 0.5 * signs * self.size
        c, s = math.cos(self.heading), math.sin(self.heading)
        rz = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return local @ rz.T + self.center

    def contains(self, pts: np.ndarray, margin: float = 0.0) -> np.ndarray:
        c, s = math.cos(self.heading), math.sin(self.heading)
        d = np.asarray(pts) - self.center
        local = np.stack([c * d[..., 0] + s * d[..., 1], -s * d[..., 0] + c * d[..., 1], d[..., 2]], -1)
        return np.all(np.abs(local) <= 0.5 * self.size + margin, axis=-1)

    def to_json(self) -> dict:
        return {"center": self.center.tolist(), "size": self.size.tolist(),
                "heading": float(self.heading), "id": int(self.agent_id)}

    @classmethod
    def from_json(cls, d: dict) -> "Box3D":
        return cls(d["center"], d["size"], float(d["heading"]), int(d["id"]))


@dataclass(frozen=True)
class Box2D:
    umin: float
    vmin: float
    umax: float
    vmax: float
    agent_id: int = 0

    def __post_init__(self):
        if not (self.umin <= self.umax and self.vmin <= self.vmax):
            raise ValueError("box min corner must not exceed max corner")

    @property
    def center(self) -> np.ndarray:
        return np.array([0.5 * (self.umin + self.umax), 0.5 * (self.vmin + self.vmax)])

    @property
    def diagonal(self) -> float:
        return math.hypot(self.umax - self.umin, self.vmax - self.vmin)

    @property
    def area(self) -> float:
        return (self.umax - self.umin) * (self.vmax - self.vmin)

    def to_json(self) -> dict:
        return {"id": int(self.agent_id), "min": [self.umin, self.vmin], "max": [self.umax, self.vmax]}

    @classmethod
    def from_json(cls, d: dict) -> "Box2D":
        return cls(d["min"][0], d["min"][1], d["max"][0], d["max"][1], int(d["id"]))


_BOX_EDGES = [(i, j) for i in range(8) for j in range(i + 1, 8) if bin(i ^ j).count("1") == 1]


def project_box(box: Box3D, cam_pose: Pose, cam: CameraModel) -> Box2D | None:
    """Image-clamped bounds of a 3D box seen from ego pose ``cam_pose``.

    Edges crossing the near plane are clipped there so partially visible boxes
    keep their visible extent.
    """
    view = cam.view(cam_pose)
    pc = view.apply(box.corners())
    pts = [c for c in pc if c[2] >= cam.near_clip]
    for i, j in _BOX_EDGES:
        if (pc[i, 2] < cam.near_clip) != (pc[j, 2] < cam.near_clip):
            seg = _clip_segment(pc[i].copy(), pc[j].copy(), cam.near_clip)
            pts.extend(seg)
    if not pts:
        return None
    uv = _project_unchecked(np.array(pts), cam)
    umin, vmin = np.clip(uv.min(axis=0), 0.0, [cam.width, cam.height])
    umax, vmax = np.clip(uv.max(axis=0), 0.0, [cam.width, cam.height])
    if umax - umin < 1.0 or vmax - vmin < 1.0:
        return None
    return Box2D(float(umin), float(vmin), float(umax), float(vmax), box.agent_id)


def project_polyline(lane: np.ndarray, cam_pose: Pose, cam: CameraModel) -> list:
    """Project consecutive lane vertices to 2D segments ``((u0, v0), (u1, v1))``."""
    lane = np.asarray(lane, dtype=np.float64)
    if len(lane) < 2:
        raise ValueError("a lane needs at least two points")
    pc = cam.view(cam_pose).apply(lane)
    segs = []
    for a, b in zip(pc[:-1], pc[1:]):
        clipped = _clip_segment(a.copy(), b.copy(), cam.near_clip)
        if clipped is None:
            continue
        uv = _project_unchecked(np.stack(clipped), cam)
        segs.append((tuple(uv[0]), tuple(uv[1])))
    return segs
