"""Synthetic driving world used as ground truth and as the novel-view data source.

The oracle scene is itself a :class:`~splat4d.gauss4d.GaussianScene`: ground,
backdrop, roadside clutter and lane markings are static; each agent is a rigid
block of Gaussians sharing one polynomial motion, so agent boxes follow
exactly the same trajectory as their primitives.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import raster
from .gauss4d import GaussianScene, checkpoint_bytes, logit, scene_from_bytes
from .geom import Box3D, CameraModel, Pose, Trajectory, default_ego_to_camera, se3_compose, to_ego_start
from .io import atomic_write_bytes, atomic_write_text

LANE_WIDTH = 3.5
LANE_COLOR = (0.97, 0.97, 0.95)
# lane marking chain: splat spacing along the road and sigmas (m), dense
# enough that the chain reads as one unbroken white stripe
LANE_MARK = dict(spacing=0.3, long=0.55, lat=0.16)
AGENT_SIZE = (4.5, 1.9, 1.5)
AGENT_SIGMA = 0.3  # splat sigma as a fraction of the grid cell
AGENT_HUES = [
    (0.85, 0.10, 0.10), (0.10, 0.35, 0.90), (0.95, 0.75, 0.05), (0.10, 0.75, 0.20),
    (0.80, 0.15, 0.80), (0.05, 0.75, 0.80), (0.95, 0.45, 0.05), (0.45, 0.10, 0.85),
]


@dataclass
class SceneConfig:
    kind: str = "straight"
    lanes: int = 2
    agents: int = 3
    frames: int = 40
    hz: float = 10.0
    seed: int = 7
    ego_speed: float = 10.0
    arc_radius: float = 250.0
    width: int = 96
    height: int = 64
    focal: float = 80.0
    camera_height: float = 1.6

    def validate(self) -> None:
        if self.kind not in ("straight", "arc"):
            raise ValueError(f"unknown road kind {self.kind!r}")
        if self.lanes < 1:
            raise ValueError("need at least one lane")
        if self.agents < 0 or self.agents > len(AGENT_HUES):
            raise ValueError(f"agent count must be in [0, {len(AGENT_HUES)}]")
        if self.frames < 2:
            raise ValueError("need at least two frames")
        if self.hz <= 0 or self.ego_speed <= 0:
            raise ValueError("rates and speeds must be positive")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "SceneConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)

    def camera(self) -> CameraModel:
        return CameraModel(self.focal, self.focal, self.width / 2.0, self.height / 2.0,
                           self.width, self.height, default_ego_to_camera(self.camera_height))


@dataclass(frozen=True)
class DegradeSpec:
    blur_sigma: float = 0.0
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.blur_sigma < 0 or self.noise_sigma < 0:
            raise ValueError("degradation levels must be non-negative")


@dataclass
class WorldScene:
    gt_scene: GaussianScene
    agents: dict            # agent_id -> list[Box3D] per timestamp
    lanes: list             # list of (N, 3) polylines
    lane_keys: list         # colour key per lane
    drivable_area: np.ndarray  # (M, 2) polygon, counter-clockwise
    ego_traj: Trajectory    # world frame
    m0: Pose
    config: SceneConfig = field(default_factory=SceneConfig)

    @property
    def timestamps(self) -> np.ndarray:
        return self.ego_traj.timestamps

    def ego_start_traj(self) -> Trajectory:
        return to_ego_start(self.ego_traj, self.m0)

    def camera(self) -> CameraModel:
        return self.config.camera()

    def boxes_at(self, frame_idx: int) -> list:
        return [boxes[frame_idx] for boxes in self.agents.values()]

    def agent_positions(self) -> list:
        """Per frame: list of (agent_id, xy) in the ego-start ground plane."""
        return [[(aid, boxes[k].center[:2].copy()) for aid, boxes in self.agents.items()]
                for k in range(len(self.timestamps))]


# --------------------------------------------------------------------------
# road geometry
# --------------------------------------------------------------------------

class _Road:
    """Centreline at lateral 0 (ego lane centre); lanes extend to +y (left)."""

    def __init__(self, cfg: SceneConfig):
        self.kind = cfg.kind
        self.kappa = 0.0 if cfg.kind == "straight" else 1.0 / cfg.arc_radius

    def point(self, s, d):
        s = np.asarray(s, dtype=np.float64)
        d = np.asarray(d, dtype=np.float64)
        if self.kappa == 0.0:
            return np.stack([s + 0 * d, d + 0 * s], -1)
        r = 1.0 / self.kappa
        th = s * self.kappa
        return np.stack([(r - d) * np.sin(th), r - (r - d) * np.cos(th)], -1)

    def heading(self, s):
        return np.asarray(s, dtype=np.float64) * self.kappa


def _fit_motion(ts, t0, pos, degree):
    basis = np.stack([(ts - t0) ** (k + 1) for k in range(degree)], -1)
    i0 = int(np.argmin(np.abs(ts - t0)))
    coef, *_ = np.linalg.lstsq(basis, pos - pos[i0], rcond=None)
    return coef, pos[i0]


def _smooth_noise(rng, shape, scale):
    field_ = gaussian_filter(rng.normal(size=shape), scale, mode="wrap")
    return field_ / (field_.std() + 1e-12)


def synth_scene(config: SceneConfig | None = None, seed: int | None = None, degree: int = 2) -> WorldScene:
    """Build the oracle world. Deterministic in ``seed`` (defaults to ``config.seed``)."""
    cfg = config or SceneConfig()
    cfg.validate()
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    road = _Road(cfg)
    ts = np.arange(cfg.frames) / cfg.hz
    t0 = float(ts[len(ts) // 2])
    duration = float(ts[-1])
    travel = cfg.ego_speed * duration
    road_lo = -0.5 * LANE_WIDTH
    road_hi = road_lo + LANE_WIDTH * cfg.lanes

    means, scales, colors, opac, quats, agent_ids = [], [], [], [], [], []
    motions = {}

    def add(m, sc, col, op, aid=0, q=None):
        m = np.atleast_2d(m)
        means.append(m)
        scales.append(np.broadcast_to(sc, m.shape).copy())
        colors.append(np.broadcast_to(col, m.shape).copy())
        opac.append(np.broadcast_to(op, (len(m),)).copy())
        if q is None:
            q = np.array([1.0, 0.0, 0.0, 0.0])
        quats.append(np.broadcast_to(q, (len(m), 4)).copy())
        agent_ids.append(np.full(len(m), aid, np.int64))

    # ground. Near the ego corridor the grid is fine enough for the EWA
    # footprint to stay local; the far field uses coarse splats. Road rows sit
    # between lane boundaries so markings are not buried under asphalt.
    near_end = travel + 22.0
    far_end = travel + 75.0
    road_rows = []
    for i in range(cfg.lanes):
        c = i * LANE_WIDTH
        road_rows += [c - 0.875, c, c + 0.875]
    verge = np.r_[np.arange(road_lo - 12.6, road_lo - 0.3, 1.4), np.arange(road_hi + 0.7, road_hi + 13.0, 1.4)]

    def ground_row(s_vals, d, sx, sy, col_base, var_row):
        xy = road.point(s_vals, np.full_like(s_vals, d))
        for k_, (p, s) in enumerate(zip(xy, s_vals)):
            col = np.clip(col_base + 0.035 * var_row[k_], 0.02, 0.98)
            add([p[0], p[1], 0.0], np.array([sx, sy, 0.03]), col, 0.97, q=_yaw_q(float(road.heading(s))))

    asphalt = np.array([0.27, 0.27, 0.29])
    grass = np.array([0.33, 0.42, 0.22])
    s_near = np.arange(-4.0, near_end, 1.0)
    for d in road_rows:
        ground_row(s_near, d, 0.6, 0.4, asphalt, _smooth_noise(rng, (len(s_near),), 3.0))
    for d in verge:
        ground_row(s_near, d, 0.6, 0.8, grass, _smooth_noise(rng, (len(s_near),), 3.0))
    s_far = np.arange(near_end + 1.0, far_end, 3.0)
    for d in np.arange(road_lo - 40.0, road_hi + 40.0, 3.0):
        on_road = road_lo <= d <= road_hi
        ground_row(s_far, d, 1.8, 1.7, asphalt if on_road else grass, _smooth_noise(rng, (len(s_far),), 2.0))

    # backdrop: wall with a vertical sky gradient just past the far ground
    wall_s = far_end + 3.0
    for d in np.arange(-90.0, 90.0 + 1e-9, 9.0):
        for z in np.arange(2.0, 60.0, 7.0):
            h = z / 60.0
            col = np.array([0.62 - 0.25 * h, 0.72 - 0.2 * h, 0.86 - 0.1 * h]) + 0.02 * rng.normal(size=3)
            xy = road.point(wall_s, d)
            add([xy[0], xy[1], z], np.array([0.5, 6.0, 5.5]), np.clip(col, 0.02, 0.98), 0.98,
                q=_yaw_q(float(road.heading(wall_s))))

    # roadside clutter: trunks and canopies on both sides
    for side in (road_lo - 4.0, road_hi + 4.0):
        for s in np.arange(0.0, far_end - 5.0, 9.0):
            s_j = s + rng.uniform(-2.0, 2.0)
            d_j = side + np.sign(side - 0.5 * (road_lo + road_hi)) * rng.uniform(0.0, 3.0)
            xy = road.point(s_j, d_j)
            add([xy[0], xy[1], 1.2], np.array([0.2, 0.2, 1.2]), np.array([0.35, 0.22, 0.12]), 0.95)
            green = np.array([0.12, 0.45 + 0.15 * rng.uniform(), 0.12])
            for dz in (3.0, 4.2):
                add([xy[0], xy[1], dz], np.array([1.1, 1.1, 0.8]), green, 0.9)

    # lane markings along every boundary, laterally between the asphalt rows
    lanes = []
    s_line = np.arange(-4.2, near_end - 0.2, LANE_MARK['spacing'])
    for i in range(cfg.lanes + 1):
        d = road_lo + i * LANE_WIDTH
        pts = road.point(s_line, np.full_like(s_line, d))
        poly = np.c_[pts, np.full(len(pts), 0.0)]
        s_meta = np.linspace(s_line[0], s_line[-1], 25)
        lanes.append(np.c_[road.point(s_meta, np.full(25, d)), np.zeros(25)])
        for p, s in zip(poly, s_line):
            add(p, np.array([LANE_MARK['long'], LANE_MARK['lat'], 0.02]), np.array(LANE_COLOR), 0.99,
                q=_yaw_q(float(road.heading(s))))

    # agents: rigid blocks of Gaussians, lane keeping ahead of the ego
    agents_tracks = {}
    lane_slots = {}
    for a in range(cfg.agents):
        aid = a + 1
        # start in the neighbouring lane so a same-lane follower is not hidden
        lane = (a + 1) % cfg.lanes
        slot = lane_slots.get(lane, 0)
        lane_slots[lane] = slot + 1
        rel_speed = rng.uniform(-2.5, 2.5)
        speed = float(np.clip(cfg.ego_speed + rel_speed, 5.0, 15.0))
        gap0 = 12.0 + 14.0 * slot + rng.uniform(0.0, 6.0)
        # keep the agent well ahead through the whole clip
        gap_end = gap0 + (speed - cfg.ego_speed) * duration
        if gap_end < 10.0:
            gap0 += 10.0 - gap_end
        s_track = gap0 + speed * ts
        d_center = lane * LANE_WIDTH
        xy = road.point(s_track, np.full_like(s_track, d_center))
        pos = np.c_[xy, np.full(len(ts), 0.5 * AGENT_SIZE[2])]
        coef, c0 = _fit_motion(ts, t0, pos, degree)
        heading = float(road.heading(gap0 + speed * t0))
        l, w, h = AGENT_SIZE
        gl, gw, gh = 8, 5, 5
        hue = np.array(AGENT_HUES[a])
        shade = _smooth_noise(rng, (gl, gw, gh), 1.0)
        c, s_ = math.cos(heading), math.sin(heading)
        rz = np.array([[c, -s_, 0], [s_, c, 0], [0, 0, 1]])
        for i in range(gl):
            for j in range(gw):
                for k in range(gh):
                    local = np.array([(i + 0.5) / gl - 0.5, (j + 0.5) / gw - 0.5, (k + 0.5) / gh - 0.5]) \
                        * np.array([l, w, h])
                    col = np.clip(hue * (0.85 + 0.1 * shade[i, j, k]), 0.02, 0.98)
                    # darker windows band on the upper part
                    if k == gh - 1:
                        col = col * 0.55
                    add(c0 + rz @ local, AGENT_SIGMA * np.array([l / gl, w / gw, h / gh]), col, 0.95,
                        aid=aid, q=_yaw_q(heading))
        motions[aid] = coef
        boxes = []
        basis = np.stack([(ts - t0) ** (k + 1) for k in range(degree)], -1)
        centers = c0 + basis @ coef
        for k_ in range(len(ts)):
            boxes.append(Box3D(centers[k_], AGENT_SIZE, heading, aid))
        agents_tracks[aid] = boxes

    means_a = np.concatenate(means)
    n = len(means_a)
    agent_ids_a = np.concatenate(agent_ids)
    scene = GaussianScene.create(
        means=means_a,
        opacity_logits=logit(np.clip(np.concatenate(opac), 1e-4, 1 - 1e-4)),
        log_scales=np.log(np.concatenate(scales)),
        quats=np.concatenate(quats),
        color_logits=logit(np.clip(np.concatenate(colors), 1e-3, 1 - 1e-3)),
        agent_ids=agent_ids_a,
        degree=degree, t0=t0, time_range=(float(ts[0]), float(ts[-1])),
    )
    for aid, coef in motions.items():
        scene.d_means[agent_ids_a == aid] = coef

    # drivable polygon (counter-clockwise): right edge forward, left edge back
    s_poly = np.linspace(-10.0, far_end, 40)
    right = road.point(s_poly, np.full_like(s_poly, road_lo))
    left = road.point(s_poly[::-1], np.full_like(s_poly, road_hi))
    polygon = np.concatenate([right, left])

    # ego in lane 0; world frame is an arbitrary rigid placement of ego_start
    s_ego = cfg.ego_speed * ts
    ego_xy = road.point(s_ego, np.zeros_like(s_ego))
    m0 = Pose.from_yaw(float(rng.uniform(-math.pi, math.pi)), (rng.uniform(-500, 500), rng.uniform(-500, 500), 0.0))
    ego_start = Trajectory.from_positions(ts, np.c_[ego_xy, np.zeros(len(ts))], "ego_start",
                                          yaws=road.heading(s_ego))
    ego_world = Trajectory(ts, tuple(se3_compose(m0, p) for p in ego_start.poses), "world")
    return WorldScene(gt_scene=scene, agents=agents_tracks, lanes=lanes,
                      lane_keys=["white"] * len(lanes), drivable_area=polygon,
                      ego_traj=ego_world, m0=m0, config=cfg)


def _yaw_q(yaw: float) -> np.ndarray:
    return np.array([math.cos(yaw / 2), 0.0, 0.0, math.sin(yaw / 2)])


# --------------------------------------------------------------------------
# oracle rendering
# --------------------------------------------------------------------------

def _check_range(world: WorldScene, traj: Trajectory) -> None:
    lo, hi = world.gt_scene.time_range
    ts = traj.timestamps
    if ts[0] < lo - 1e-9 or ts[-1] > hi + 1e-9:
        raise ValueError(f"trajectory times [{ts[0]}, {ts[-1]}] outside world range [{lo}, {hi}]")


def degrade_image(image: np.ndarray, deg: DegradeSpec, rng: np.random.Generator) -> np.ndarray:
    out = image
    if deg.blur_sigma > 0:
        out = gaussian_filter(out, sigma=(deg.blur_sigma, deg.blur_sigma, 0.0), mode="nearest")
    if deg.noise_sigma > 0:
        out = np.clip(out + rng.normal(0.0, deg.noise_sigma, size=out.shape), 0.0, 1.0)
    return out


def oracle_render(world: WorldScene, traj: Trajectory, cam: CameraModel,
                  degrade: DegradeSpec | None = None) -> list:
    """Render the oracle along an ego-start trajectory, optionally degraded like a generative model."""
    _check_range(world, traj)
    frames = [raster.strip(o) for o in raster.render_video(world.gt_scene, traj, cam)]
    if degrade is None:
        return frames
    rng = np.random.default_rng(degrade.seed)
    return [raster.RenderOutput(degrade_image(f.image, degrade, rng), f.depth, f.alpha, f.agent_weights)
            for f in frames]


def lidar_depth(world: WorldScene, traj: Trajectory, cam: CameraModel, dropout: float, seed: int,
                frames: list | None = None) -> list:
    """Sparse depth: oracle depth where alpha >= 0.5, thinned by a seeded random mask."""
    if not 0.0 <= dropout < 1.0:
        raise ValueError("dropout must be in [0, 1)")
    frames = oracle_render(world, traj, cam) if frames is None else frames
    rng = np.random.default_rng(seed)
    out = []
    for f in frames:
        keep = rng.random(f.depth.shape) >= dropout
        out.append(np.where((f.alpha >= 0.5) & keep, f.depth, 0.0))
    return out


# --------------------------------------------------------------------------
# persistence
# --------------------------------------------------------------------------

def world_metadata(world: WorldScene) -> dict:
    return {
        "config": world.config.to_json(),
        "agents": {str(aid): [b.to_json() for b in boxes] for aid, boxes in world.agents.items()},
        "lanes": [{"key": k, "points": np.asarray(l).tolist()} for k, l in zip(world.lane_keys, world.lanes)],
        "drivable_area": np.asarray(world.drivable_area).tolist(),
        "trajectory": world.ego_traj.to_json(),
        "m0": world.m0.to_json(),
        "time_range": list(world.gt_scene.time_range),
    }


def save_world(directory, world: WorldScene) -> None:
    d = Path(directory)
    atomic_write_bytes(d / "scene.sp4d", checkpoint_bytes(world.gt_scene))
    side = {"time_range": list(world.gt_scene.time_range), "provenance": {"kind": "oracle"}}
    atomic_write_text(d / "scene.sp4d.json", json.dumps(side, indent=2, sort_keys=True))
    atomic_write_text(d / "world.json", json.dumps(world_metadata(world), indent=1, sort_keys=True))


def load_world(directory, exact: bool = False) -> WorldScene:
    """Load a saved world. Checkpoints hold float32, so ``exact=True`` re-synthesises from the config."""
    d = Path(directory)
    meta = json.loads((d / "world.json").read_text())
    cfg = SceneConfig.from_json(meta["config"])
    if exact:
        return synth_scene(cfg)
    scene = scene_from_bytes((d / "scene.sp4d").read_bytes(), meta["time_range"])
    agents = {int(k): [Box3D.from_json(b) for b in v] for k, v in meta["agents"].items()}
    return WorldScene(gt_scene=scene, agents=agents,
                      lanes=[np.array(l["points"]) for l in meta["lanes"]],
                      lane_keys=[l["key"] for l in meta["lanes"]],
                      drivable_area=np.array(meta["drivable_area"]),
                      ego_traj=Trajectory.from_json(meta["trajectory"]),
                      m0=Pose.from_json(meta["m0"]), config=cfg)
