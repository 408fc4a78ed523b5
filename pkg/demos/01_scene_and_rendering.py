"""Build a synthetic driving scene, render it from the ego camera and look at
what the rasterizer hands back.

    python demos/01_scene_and_rendering.py [out_dir]
"""
import sys
from pathlib import Path

import numpy as np

from splat4d import io, raster, worldgen

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/scene")
out.mkdir(parents=True, exist_ok=True)

# A two-lane straight road, three agents, 40 frames at 10 Hz.
world = worldgen.synth_scene(worldgen.SceneConfig(seed=7))
cam = world.camera()
traj = world.ego_start_traj()
print(f"{len(world.gt_scene)} primitives, {len(world.agents)} agents, {len(traj)} frames at {cam.width}x{cam.height}")

# Ground-truth renders of the recorded drive.
frames = worldgen.oracle_render(world, traj, cam)
for k in (0, len(frames) // 2, len(frames) - 1):
    io.write_ppm(out / f"oracle_{k:03d}.ppm", frames[k].image)

# Every render carries per-pixel depth and a per-agent weight map;
# the agent maps are what the detector later turns into boxes.
f0 = frames[0]
print("alpha coverage", float((f0.alpha > 0.5).mean()))
print("median depth (m)", float(np.median(f0.depth[f0.alpha > 0.5])))
for aid, w in sorted(f0.agent_weights.items()):
    if aid:
        print(f"agent {aid}: {int((w > 0.3).sum())} pixels above 0.3")

# Degraded training inputs: blur + noise, plus a sparse lidar depth map.
rng = np.random.default_rng(0)
noisy = worldgen.degrade_image(f0.image, worldgen.DegradeSpec(0.5, 0.01), rng)
io.write_ppm(out / "degraded_000.ppm", noisy)
lidar = worldgen.lidar_depth(world, traj, cam, dropout=0.98, seed=0)
print("lidar returns in frame 0:", int((lidar[0] > 0).sum()))

# Gradients: pull the image towards a flat grey and look at which
# parameter groups respond.
r0 = raster.render(world.gt_scene, traj.timestamps[0], traj.poses[0], cam)
target = np.full_like(r0.image, 0.5)
grads = raster.backward(r0, np.sign(r0.image - target) / target.size)
for name, g in grads.items():
    print(f"{name:16s} |grad|max {np.abs(g).max():.2e}")
print("frames written to", out)
