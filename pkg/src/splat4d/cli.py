"""Command-line entry point and the file-based pipeline behind it.

Output directory layout::

    OUT/config.json                      resolved configuration echo
    OUT/scene/                           oracle checkpoint, world.json, original frames, sparse depth
    OUT/novel/<maneuver>/                trajectory.json, conditions.jsonl, frames/ (world-model output)
    OUT/runs/<variant>/                  checkpoint.sp4d, loss.csv, train_config.json
    OUT/eval/<variant>_<maneuver>.json   EvalReport (+ .csv per-frame table)

Seeds: every seeded subsystem draws ``derive_seed(top_seed, name)``, the
first eight bytes (little endian) of ``sha256(f"{top_seed}:{name}")``.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import cdts, metrics, ntgm, raster, worldgen
from .gauss4d import init_learnable, load_checkpoint, save_checkpoint
from .geom import Trajectory
from .io import atomic_write_text, read_depth, read_ppm, write_depth, write_ppm

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_DIVERGED = 4


class ConfigError(ValueError):
    pass


def derive_seed(top: int, name: str) -> int:
    digest = hashlib.sha256(f"{int(top)}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _small(seed: int) -> int:
    # numpy generators accept any non-negative int; keep JSON-friendly 32-bit values
    return seed % (2 ** 32)


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

# a 2k-primitive scene converges in about 1.5k steps; the sparse primitive
# set needs faster opacity and slower scale rates than the dense defaults
DEFAULT_TRAIN = {"iterations": 1500, "lr": {"opacity": 0.05, "scale": 0.005}}
DEFAULT_VARIANTS = {
    "baseline": {"cdts_enabled": False},
    "cdts": {"cdts_enabled": True},
}


@dataclass
class InitConfig:
    n: int = 2000
    noise_pos: float = 0.3
    motion_init: str = "tracks"


@dataclass
class ExperimentConfig:
    scene: worldgen.SceneConfig = field(default_factory=worldgen.SceneConfig)
    maneuvers: list = field(default_factory=lambda: ["lane_change", "accel:1.5", "decel:2"])
    train_maneuver: str = "lane_change"
    degrade: dict = field(default_factory=lambda: {"blur_sigma": 0.5, "noise_sigma": 0.01})
    lidar_dropout: float = 0.98
    d_min: float = 2.0
    init: InitConfig = field(default_factory=InitConfig)
    train: dict = field(default_factory=lambda: json.loads(json.dumps(DEFAULT_TRAIN)))
    variants: dict = field(default_factory=lambda: json.loads(json.dumps(DEFAULT_VARIANTS)))
    output_dir: str | None = None
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.scene, dict):
            self.scene = worldgen.SceneConfig.from_json(self.scene)
        if isinstance(self.init, dict):
            self.init = InitConfig(**self.init)

    def validate(self) -> None:
        try:
            self.scene.validate()
            for m in self.maneuvers:
                ntgm.parse_maneuver(m)
            ntgm.parse_maneuver(self.train_maneuver)
            worldgen.DegradeSpec(**self.degrade)
            if not 0.0 <= self.lidar_dropout < 1.0:
                raise ValueError("lidar_dropout must be in [0, 1)")
            if self.init.motion_init not in ("zero", "tracks"):
                raise ValueError(f"unknown motion_init {self.init.motion_init!r}")
            for name in self.variants:
                self.train_config(name, 0)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def train_config(self, variant: str, seed: int) -> cdts.TrainConfig:
        if variant not in self.variants:
            raise ConfigError(f"unknown variant {variant!r}; have {sorted(self.variants)}")
        d = json.loads(json.dumps(self.train))
        over = self.variants[variant]
        for k, v in over.items():
            if k == "weights":
                d.setdefault("weights", {}).update(v)
            else:
                d[k] = v
        d["seed"] = seed
        return cdts.TrainConfig.from_json(d)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "ExperimentConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        d = dict(d)
        if isinstance(d.get("train"), dict):
            # a partial train block overrides the defaults key by key
            train = json.loads(json.dumps(DEFAULT_TRAIN))
            for k, v in d["train"].items():
                train[k] = {**train[k], **v} if isinstance(v, dict) and isinstance(train.get(k), dict) else v
            d["train"] = train
        return cls(**d)


def load_config(path: str | None) -> ExperimentConfig:
    """Read an experiment config; a bare scene config is accepted as well."""
    if path is None:
        return ExperimentConfig()
    try:
        d = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    if "kind" in d or "lanes" in d:
        d = {"scene": d}
    try:
        return ExperimentConfig.from_json(d)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def resolve_seeds(cfg: ExperimentConfig, seed: int | None) -> ExperimentConfig:
    """Apply a top-level ``--seed``: it replaces the config seed and re-derives the scene seed."""
    if seed is not None:
        cfg.seed = int(seed)
        cfg.scene.seed = _small(derive_seed(cfg.seed, "scene"))
    return cfg


def _echo(out: Path, cfg: ExperimentConfig) -> None:
    atomic_write_text(out / "config.json", json.dumps(cfg.to_json(), indent=2, sort_keys=True))


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True)


# --------------------------------------------------------------------------
# pipeline steps
# --------------------------------------------------------------------------

def cmd_synth(cfg: ExperimentConfig, out: Path) -> worldgen.WorldScene:
    """Oracle scene, original-trajectory frames and sparse LiDAR depth."""
    world = worldgen.synth_scene(cfg.scene)
    d = out / "scene"
    worldgen.save_world(d, world)
    cam = world.camera()
    traj = world.ego_start_traj()
    atomic_write_text(d / "trajectory_ori.json", _dump(traj.to_json()))
    atomic_write_text(d / "camera.json", _dump(cam.to_json()))
    frames = worldgen.oracle_render(world, traj, cam)
    depth = worldgen.lidar_depth(world, traj, cam, cfg.lidar_dropout, _small(derive_seed(cfg.seed, "lidar")),
                                 frames=frames)
    for k, (f, dep) in enumerate(zip(frames, depth)):
        write_ppm(d / "frames" / f"{k:04d}.ppm", f.image)
        write_depth(d / "depth" / f"{k:04d}.dpth", dep)
    return world


def _load_scene_dir(out: Path):
    d = out / "scene"
    if not (d / "world.json").exists():
        raise ConfigError(f"no scene in {d}; run synth first")
    world = worldgen.load_world(d)
    return world, world.camera()


def maneuver_tag(m: str) -> str:
    return m.replace(":", "_")


def cmd_propose(cfg: ExperimentConfig, out: Path, maneuver: str, world=None) -> Trajectory:
    """Novel trajectory, its structured conditions and the world-model frames that follow it."""
    if world is None:
        world, cam = _load_scene_dir(out)
    cam = world.camera()
    seed = _small(derive_seed(cfg.seed, f"propose:{maneuver}"))
    traj = ntgm.propose(world, maneuver, seed, cfg.d_min)
    cond = ntgm.build_conditions(traj, world, cam)
    d = out / "novel" / maneuver_tag(maneuver)
    atomic_write_text(d / "trajectory.json", _dump(traj.to_json()))
    ntgm.write_conditions(d / "conditions.jsonl", cond)
    deg = worldgen.DegradeSpec(seed=_small(derive_seed(cfg.seed, f"degrade:{maneuver}")), **cfg.degrade)
    frames = worldgen.oracle_render(world, traj, cam, deg)
    for k, f in enumerate(frames):
        write_ppm(d / "frames" / f"{k:04d}.ppm", f.image)
    return traj


def _read_stream(d: Path, traj: Trajectory, with_depth: bool) -> cdts.FrameStream:
    n = len(traj)
    images = [read_ppm(d / "frames" / f"{k:04d}.ppm") for k in range(n)]
    depths = [read_depth(d / "depth" / f"{k:04d}.dpth") for k in range(n)] if with_depth else None
    return cdts.FrameStream(np.asarray(traj.timestamps), list(traj.poses), images, depths)


def _read_traj(path: Path) -> Trajectory:
    return Trajectory.from_json(json.loads(path.read_text()))


def cmd_train(cfg: ExperimentConfig, out: Path, variant: str, world=None):
    """Train one variant. Only mixed variants open the novel-view files."""
    if world is None:
        world, _ = _load_scene_dir(out)
    cam = world.camera()
    # every variant shares one training seed, so variants see frames in the
    # same order and their differences come from the loss alone
    tc = cfg.train_config(variant, _small(derive_seed(cfg.seed, "train")))
    ori_traj = _read_traj(out / "scene" / "trajectory_ori.json")
    ori = _read_stream(out / "scene", ori_traj, with_depth=True)
    novel = None
    if tc.cdts_enabled and (tc.weights.novel > 0 or tc.weights.reg > 0):
        nd = out / "novel" / maneuver_tag(cfg.train_maneuver)
        if not (nd / "trajectory.json").exists():
            raise ConfigError(f"no novel data in {nd}; run propose first")
        ntraj = _read_traj(nd / "trajectory.json")
        novel = _read_stream(nd, ntraj, with_depth=False)
        if tc.novel_depth:
            novel.depths = [cdts.reproject_depth(dep, po, pn, cam)
                            for dep, po, pn in zip(ori.depths, ori.poses, novel.poses)]
    init = init_learnable(world, cfg.init.n, cfg.init.noise_pos, _small(derive_seed(cfg.seed, "init")),
                          cfg.init.motion_init)
    rd = out / "runs" / variant
    scene, log = cdts.train(init, cdts.TrainData(cam, ori, novel), tc,
                            checkpoint_dir=rd if tc.checkpoint_every else None)
    save_checkpoint(rd / "checkpoint.sp4d", scene, {"variant": variant, "steps": tc.iterations})
    cdts.write_log(rd / "loss.csv", log)
    atomic_write_text(rd / "train_config.json", _dump(tc.to_json()))
    return scene, log


def cmd_eval(cfg: ExperimentConfig, out: Path, variant: str, maneuvers: list, world=None,
             checkpoint: Path | None = None) -> list:
    """Score a checkpoint on each maneuver's novel views."""
    if world is None:
        world, _ = _load_scene_dir(out)
    cam = world.camera()
    scene = load_checkpoint(checkpoint or out / "runs" / variant / "checkpoint.sp4d")
    # novel views are judged for how much they look like the recorded footage
    recorded = _read_stream(out / "scene", _read_traj(out / "scene" / "trajectory_ori.json"), False).images
    reports = []
    for m in maneuvers:
        nd = out / "novel" / maneuver_tag(m)
        if not (nd / "trajectory.json").exists():
            raise ConfigError(f"no novel trajectory for {m}; run propose first")
        traj = _read_traj(nd / "trajectory.json")
        cond = ntgm.read_conditions(nd / "conditions.jsonl")
        renders = [raster.strip(r) for r in raster.render_video(scene, traj, cam)]
        ref = [f.image for f in worldgen.oracle_render(world, traj, cam)]
        rep = metrics.evaluate(renders, cond, ref, variant, m, ffd_frames=recorded)
        metrics.write_report(out / "eval", rep, f"{variant}_{maneuver_tag(m)}")
        reports.append(rep)
    return reports


def cmd_render(checkpoint: Path, trajectory: Path, cam_path: Path, out: Path) -> int:
    scene = load_checkpoint(checkpoint)
    traj = _read_traj(trajectory)
    from .geom import CameraModel
    cam = CameraModel.from_json(json.loads(Path(cam_path).read_text()))
    for k, r in enumerate(raster.render_video(scene, traj, cam)):
        write_ppm(out / f"{k:04d}.ppm", r.image)
        write_depth(out / f"{k:04d}.dpth", r.depth)
    return len(traj)


def run_experiment(cfg: ExperimentConfig, out: Path, log=print) -> list:
    """synth -> propose every maneuver -> train every variant -> evaluate."""
    out = Path(out)
    cfg.validate()
    _echo(out, cfg)
    cmd_synth(cfg, out)
    # continue from the saved float32 scene so stepwise runs reproduce these bytes
    world, _ = _load_scene_dir(out)
    maneuvers = list(dict.fromkeys(cfg.maneuvers + [cfg.train_maneuver]))
    for m in maneuvers:
        cmd_propose(cfg, out, m, world)
    log(f"scene and {len(maneuvers)} novel trajectories written to {out}")
    reports = []
    for v in cfg.variants:
        cmd_train(cfg, out, v, world)
        log(f"trained {v}")
        reports += cmd_eval(cfg, out, v, cfg.maneuvers, world)
    table = metrics.summary_table(reports)
    atomic_write_text(out / "eval" / "summary.txt", table + "\n")
    log(table)
    return reports


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="splat4d", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="experiment or scene config (JSON)")
        sp.add_argument("--seed", type=int, help="top-level seed (u64)")
        sp.add_argument("--out", required=out_required, help="output directory")
        sp.add_argument("--threads", type=int, default=0, help="render threads, 0 = auto")

    common(sub.add_parser("synth", help="build the oracle scene and original-trajectory data"))
    sp = sub.add_parser("propose", help="propose a novel trajectory and its conditions")
    common(sp)
    sp.add_argument("--maneuver", default="lane_change", help="lane_change | accel:F | decel:F")
    sp = sub.add_parser("train", help="train one variant")
    common(sp)
    sp.add_argument("--mode", default="baseline", help="baseline | cdts | any configured variant")
    sp = sub.add_parser("eval", help="evaluate trained checkpoints on novel views")
    common(sp)
    sp.add_argument("--mode", action="append", help="variant(s) to score; default all trained")
    sp.add_argument("--maneuver", action="append", help="maneuver(s); default from config")
    sp.add_argument("--checkpoint", help="score this checkpoint instead of runs/<mode>")
    sp = sub.add_parser("render", help="render a checkpoint along a trajectory")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--trajectory", required=True)
    sp.add_argument("--camera", required=True, help="camera JSON (scene/camera.json)")
    sp.add_argument("--out", required=True)
    sp.add_argument("--threads", type=int, default=0)
    common(sub.add_parser("experiment", help="run the full pipeline"))
    return p


def _config_for(args) -> tuple:
    cfg = resolve_seeds(load_config(getattr(args, "config", None)), getattr(args, "seed", None))
    out = Path(args.out if args.out else cfg.output_dir or "")
    if not str(out):
        raise ConfigError("no output directory given")
    cfg.output_dir = str(out)
    cfg.validate()
    return cfg, out


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        raster.set_threads(args.threads)
        if args.command == "render":
            n = cmd_render(Path(args.checkpoint), Path(args.trajectory), Path(args.camera), Path(args.out))
            print(f"wrote {n} frames to {args.out}")
            return EXIT_OK
        cfg, out = _config_for(args)
        if args.command == "synth":
            _echo(out, cfg)
            world = cmd_synth(cfg, out)
            print(f"scene with {len(world.gt_scene)} primitives and {len(world.timestamps)} frames in {out}")
        elif args.command == "propose":
            try:
                ntgm.parse_maneuver(args.maneuver)
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
            traj = cmd_propose(cfg, out, args.maneuver)
            print(f"{args.maneuver}: final lateral offset {traj.positions[-1, 1]:.3f} m")
        elif args.command == "train":
            _, log = cmd_train(cfg, out, args.mode)
            print(f"{args.mode}: loss {log[0]['total']:.4f} -> {log[-1]['total']:.4f}")
        elif args.command == "eval":
            modes = args.mode or [v for v in cfg.variants if (out / "runs" / v / "checkpoint.sp4d").exists()]
            ckpt = Path(args.checkpoint) if args.checkpoint else None
            reports = []
            for v in modes:
                reports += cmd_eval(cfg, out, v, args.maneuver or cfg.maneuvers, checkpoint=ckpt)
            print(metrics.summary_table(reports))
        elif args.command == "experiment":
            run_experiment(cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ntgm.InfeasibleTrajectory as exc:
        print(f"infeasible trajectory: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except cdts.TrainingDiverged as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
