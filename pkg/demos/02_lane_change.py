"""Propose novel ego trajectories for a synthetic scene and inspect the
conditions (projected boxes and lanes) they induce.

    python demos/02_lane_change.py
"""
import numpy as np

from splat4d import ntgm, worldgen

world = worldgen.synth_scene(worldgen.SceneConfig(seed=7, agents=3))
cam = world.camera()
orig = world.ego_start_traj()
ctx = ntgm.SafetyContext.from_world(world, d_min=2.0)

# The lane change drifts left one random increment at a time and never
# steps outside the drivable area or within d_min of another car.
lc = ntgm.propose_lane_change(orig, ctx, max_offset_init=0.1, seed=3)
offset = lc.positions[:, 1] - orig.positions[:, 1]
print("lateral offset every 5th frame:", np.round(offset[::5], 2))
print("min clearance to agents:", min(ctx.clearance(p, k) for k, p in enumerate(lc.positions)))

# Speed changes rescale the along-track progress.
for m in ("accel:1.5", "decel:2"):
    tr = ntgm.propose(world, m, seed=0)
    print(f"{m:10s} distance covered {tr.positions[-1, 0]:.1f} m (original {orig.positions[-1, 0]:.1f} m)")

# An infeasible request reports the frame where it got stuck.
tight = ntgm.SafetyContext(ctx.drivable_area, ctx.agent_positions, d_min=50.0)
try:
    ntgm.propose_lane_change(orig, tight, seed=3)
except ntgm.InfeasibleTrajectory as e:
    print("d_min = 50 m:", e)

# Conditions: what a detector should find in each novel frame.
cond = ntgm.build_conditions(lc, world, cam)
for fr in cond[::10]:
    boxes = ", ".join(f"#{b.agent_id} u {b.umin:.0f}-{b.umax:.0f}" for b in fr.boxes2d)
    print(f"t={fr.t:.1f}s  {len(fr.lanes2d)} lane segments  boxes: {boxes or '-'}")
