"""Novel trajectory proposals (lane change, speed change) with a safety gate,
and projection of agent boxes and lanes into the proposed camera views."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import shapely
from shapely.geometry import Point, Polygon

from .geom import Box2D, CameraModel, Pose, Trajectory, headings_from_positions, project_box, project_polyline
from .io import atomic_write_text

MAX_HALVINGS = 32


class InfeasibleTrajectory(RuntimeError):
    """No safe waypoint exists for some frame."""

    def __init__(self, frame: int, reason: str = ""):
        self.frame = frame
        super().__init__(f"no safe waypoint for frame {frame}" + (f": {reason}" if reason else ""))


@dataclass
class SafetyContext:
    drivable_area: np.ndarray | None  # (M, 2) polygon; None means unbounded
    agent_positions: list = field(default_factory=list)  # per frame: [(agent_id, xy), ...]
    d_min: float = 2.0

    def __post_init__(self):
        if self.d_min <= 0:
            raise ValueError("d_min must be positive")
        self._poly = None
        if self.drivable_area is not None:
            poly = Polygon(np.asarray(self.drivable_area, dtype=np.float64))
            if not poly.is_valid or not poly.exterior.is_simple:
                raise ValueError("drivable area must be a simple polygon")
            shapely.prepare(poly)
            self._poly = poly
        self._agents = [np.array([np.asarray(p, dtype=np.float64)[:2] for _, p in frame]).reshape(-1, 2)
                        for frame in self.agent_positions]

    @classmethod
    def from_world(cls, world, d_min: float = 2.0) -> "SafetyContext":
        return cls(np.asarray(world.drivable_area), world.agent_positions(), d_min)

    def inside(self, p) -> bool:
        if self._poly is None:
            return True
        return bool(self._poly.covers(Point(float(p[0]), float(p[1]))))

    def clearance(self, p, frame_idx: int) -> float:
        if frame_idx >= len(self._agents) or len(self._agents[frame_idx]) == 0:
            return math.inf
        return float(np.min(np.linalg.norm(self._agents[frame_idx] - np.asarray(p, dtype=np.float64)[:2], axis=1)))


def safe_check(p, frame_idx: int, ctx: SafetyContext) -> bool:
    """Inside the drivable area (boundary included) and at least ``d_min`` from every agent."""
    if frame_idx < 0 or (ctx.agent_positions and frame_idx >= len(ctx.agent_positions)):
        raise IndexError(f"frame {frame_idx} out of range")
    return ctx.inside(p) and ctx.clearance(p, frame_idx) >= ctx.d_min


def propose_lane_change(traj_ego: Trajectory, ctx: SafetyContext, max_offset_init: float = 0.1,
                        seed: int = 0) -> Trajectory:
    """Drift left by accumulating random non-negative lateral increments.

    Each frame draws ``uniform(0, max_offset)`` on top of the offset accepted so
    far; a rejected candidate halves ``max_offset`` (reset every frame). Only
    waypoints are checked, not the path between them.
    """
    if traj_ego.frame_id != "ego_start":
        raise ValueError("lane changes are proposed in the ego-start frame")
    pos = traj_ego.positions
    if not np.allclose(pos[0], 0.0, atol=1e-9):
        raise ValueError("ego-start trajectory must begin at the origin")
    if not safe_check(np.zeros(3), 0, ctx):
        raise InfeasibleTrajectory(0, "the start pose itself is unsafe")
    rng = np.random.default_rng(seed)
    out = [np.zeros(3)]
    offset = 0.0
    for k in range(1, len(pos)):
        max_offset = max_offset_init
        for _ in range(MAX_HALVINGS + 1):
            new_offset = offset + rng.uniform(0.0, max_offset)
            cand = pos[k] + np.array([0.0, new_offset, 0.0])
            if safe_check(cand, k, ctx):
                out.append(cand)
                offset = new_offset
                break
            max_offset /= 2.0
        else:
            raise InfeasibleTrajectory(k, f"{MAX_HALVINGS} halvings exhausted")
    out = np.array(out)
    for k, p in enumerate(out):
        assert safe_check(p, k, ctx)
    return Trajectory.from_positions(traj_ego.timestamps, out, "ego_start", headings_from_positions(out))


def _yaw(pose: Pose) -> float:
    r = pose.rotation
    return math.atan2(r[1, 0], r[0, 0])


def propose_speed_change(traj_ego: Trajectory, factor: float) -> Trajectory:
    """Scale the cumulative forward displacement by ``factor``; y, z and times are kept.

    Headings follow the scaled tangent, ``atan2(sin psi, factor * cos psi)``.
    """
    if not factor > 0:
        raise ValueError("speed factor must be positive")
    if factor == 1.0:
        return Trajectory(traj_ego.timestamps, traj_ego.poses, traj_ego.frame_id)
    pos = traj_ego.positions.copy()
    pos[:, 0] = pos[0, 0] + factor * (pos[:, 0] - pos[0, 0])
    yaws = [math.atan2(math.sin(_yaw(p)), factor * math.cos(_yaw(p))) for p in traj_ego.poses]
    return Trajectory.from_positions(traj_ego.timestamps, pos, traj_ego.frame_id, yaws)


def parse_maneuver(text: str) -> tuple:
    """``lane_change``, ``accel:F`` or ``decel:F`` -> (kind, factor)."""
    if text == "lane_change":
        return ("lane_change", None)
    kind, _, val = text.partition(":")
    if kind not in ("accel", "decel") or not val:
        raise ValueError(f"bad maneuver {text!r}")
    f = float(val)
    if not f > 0:
        raise ValueError("maneuver factor must be positive")
    return (kind, f)


def propose(world, maneuver: str, seed: int, d_min: float = 2.0) -> Trajectory:
    """Apply a maneuver to the world's original ego trajectory."""
    kind, f = parse_maneuver(maneuver)
    base = world.ego_start_traj()
    if kind == "lane_change":
        return propose_lane_change(base, SafetyContext.from_world(world, d_min), seed=seed)
    # accel:F scales speed by F, decel:F by 1/F when F > 1, else by F
    if kind == "decel" and f > 1.0:
        f = 1.0 / f
    return propose_speed_change(base, f)


# --------------------------------------------------------------------------
# structured conditions
# --------------------------------------------------------------------------

@dataclass
class ConditionFrame:
    t: float
    boxes2d: list
    lanes2d: list

    def to_json(self) -> dict:
        return {"t": float(self.t), "boxes": [b.to_json() for b in self.boxes2d],
                "lanes": [[[float(a[0]), float(a[1])], [float(b[0]), float(b[1])]] for a, b in self.lanes2d]}

    @classmethod
    def from_json(cls, d: dict) -> "ConditionFrame":
        return cls(d["t"], [Box2D.from_json(b) for b in d["boxes"]],
                   [(tuple(a), tuple(b)) for a, b in d["lanes"]])


def build_conditions(novel_traj: Trajectory, world, cam: CameraModel) -> list:
    ts = world.timestamps
    if len(novel_traj) != len(ts) or not np.allclose(novel_traj.timestamps, ts, atol=1e-9):
        raise ValueError("trajectory timestamps do not match the world's agent tracks")
    frames = []
    for k, (t, pose) in enumerate(zip(novel_traj.timestamps, novel_traj.poses)):
        boxes = [b2 for b in world.boxes_at(k) if (b2 := project_box(b, pose, cam)) is not None]
        segs = [s for lane in world.lanes for s in project_polyline(lane, pose, cam)]
        frames.append(ConditionFrame(float(t), boxes, segs))
    return frames


def conditions_jsonl(frames: list) -> str:
    return "".join(json.dumps(f.to_json()) + "\n" for f in frames)


def write_conditions(path, frames: list) -> None:
    atomic_write_text(path, conditions_jsonl(frames))


def read_conditions(path) -> list:
    with open(path) as fh:
        return [ConditionFrame.from_json(json.loads(line)) for line in fh if line.strip()]
