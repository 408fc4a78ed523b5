"""Differentiable tile rasteriser for deformable Gaussian scenes.

Forward: deform -> project (EWA, ``Sigma' = J W Sigma W^T J^T``) -> per-tile
depth-ordered alpha compositing. Backward: hand-derived adjoints of the same
chain. Blending kernels are compiled with numba and parallel over 16x16
tiles; gradient partials are written per (tile, Gaussian) slot and reduced in
a fixed order, so results do not depend on the thread count.

Numerical safeguards
--------------------
* ``alpha <= 0.99`` and a 0.3 px^2 blur floor on the 2D covariance.
* Gaussians are evaluated exactly up to 3.5 sigma and vanish beyond it. The
  falloff is shifted so it reaches zero continuously at the cut
  (``(g - g_cut) / (1 - g_cut)``), which keeps the image a continuous function
  of every parameter.
* Blending stops once transmittance falls below 1e-4.
* The projection Jacobian is evaluated with the view-ray tangents clamped
  to 1.3x the half field of view, which keeps Gaussians just outside the
  frustum (ground under the camera) from smearing across the frame.
* Depth is the alpha-normalised expected depth, divided by
  ``max(alpha, 1e-3)`` so it fades continuously to 0 on empty pixels.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numba
import numpy as np

# the TBB layer is often built against a mismatched libtbb; workqueue is
# always available and deterministic enough for our fixed-order reductions
if "NUMBA_THREADING_LAYER" not in os.environ:
    numba.config.THREADING_LAYER = "workqueue"

from . import gauss4d
from .gauss4d import GaussianScene, covariance, covariance_vjp, deform, deform_vjp
from .geom import CameraModel, Pose

TILE = 16
ALPHA_MAX = 0.99
T_MIN = 1e-4
BLUR = 0.3
CULL_SIGMA = 3.5
Q_CUT = CULL_SIGMA ** 2
G_CUT = math.exp(-0.5 * Q_CUT)
EPS_ALPHA = 1e-3
FOV_GUARD = 1.3


@dataclass
class Splat2D:
    mean: np.ndarray
    cov2d: np.ndarray
    depth: float
    color: np.ndarray
    opacity: float
    index: int


@dataclass
class Projected:
    """Per-Gaussian screen-space quantities for one view (all N rows; ``valid`` marks the drawn ones)."""

    valid: np.ndarray
    p_cam: np.ndarray
    jac: np.ndarray
    cov3d: np.ndarray
    cov2d: np.ndarray
    conic: np.ndarray  # (N, 3): A, B, C of [[A, B], [B, C]]
    mean2d: np.ndarray
    depth: np.ndarray
    opacity: np.ndarray
    color: np.ndarray
    rect: np.ndarray  # (N, 4) inclusive pixel bounds j0, j1, i0, i1


@dataclass
class RenderOutput:
    image: np.ndarray
    depth: np.ndarray
    alpha: np.ndarray
    agent_weights: dict
    ctx: object = field(default=None, repr=False, compare=False)


# --------------------------------------------------------------------------
# projection
# --------------------------------------------------------------------------

def project(deformed, view: Pose, cam: CameraModel) -> Projected:
    w = view.rotation
    p = deformed.means @ w.T + view.t
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    valid = z > cam.near_clip
    zs = np.where(valid, z, 1.0)
    lim_x, lim_y = _tangent_limits(cam)
    rx = np.clip(x / zs, -lim_x, lim_x)
    ry = np.clip(y / zs, -lim_y, lim_y)
    n = len(p)
    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = cam.fx / zs
    jac[:, 0, 2] = -cam.fx * rx / zs
    jac[:, 1, 1] = cam.fy / zs
    jac[:, 1, 2] = -cam.fy * ry / zs
    cov3d = covariance(deformed.log_scales, deformed.quats)
    k = jac @ w
    cov2d = k @ cov3d @ np.swapaxes(k, 1, 2)
    cov2d[:, 0, 0] += BLUR
    cov2d[:, 1, 1] += BLUR
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], -1)
    mean2d = np.stack([cam.fx * x / zs + cam.cx, cam.fy * y / zs + cam.cy], -1)
    ru = CULL_SIGMA * np.sqrt(a)
    rv = CULL_SIGMA * np.sqrt(c)
    with np.errstate(invalid="ignore"):
        j0 = np.ceil(mean2d[:, 0] - ru - 0.5)
        j1 = np.floor(mean2d[:, 0] + ru - 0.5)
        i0 = np.ceil(mean2d[:, 1] - rv - 0.5)
        i1 = np.floor(mean2d[:, 1] + rv - 0.5)
    j0 = np.clip(np.nan_to_num(j0, nan=1e9), 0, cam.width)
    j1 = np.clip(np.nan_to_num(j1, nan=-1e9), -1, cam.width - 1)
    i0 = np.clip(np.nan_to_num(i0, nan=1e9), 0, cam.height)
    i1 = np.clip(np.nan_to_num(i1, nan=-1e9), -1, cam.height - 1)
    valid &= (j0 <= j1) & (i0 <= i1) & np.isfinite(det) & (det > 0)
    rect = np.stack([j0, j1, i0, i1], -1).astype(np.int64)
    return Projected(valid=valid, p_cam=p, jac=jac, cov3d=cov3d, cov2d=cov2d, conic=conic,
                     mean2d=mean2d, depth=z, opacity=deformed.opacity, color=deformed.colors,
                     rect=rect)


def _tangent_limits(cam: CameraModel):
    return (FOV_GUARD * max(cam.cx, cam.width - cam.cx) / cam.fx,
            FOV_GUARD * max(cam.cy, cam.height - cam.cy) / cam.fy)


def project_gaussian(g_deformed, cam_pose: Pose, cam: CameraModel, index: int = 0) -> Splat2D | None:
    """Screen-space splat of a single deformed Gaussian, or ``None`` when culled."""
    pr = project(g_deformed, cam.view(cam_pose), cam)
    if not pr.valid[index]:
        return None
    return Splat2D(mean=pr.mean2d[index], cov2d=pr.cov2d[index], depth=float(pr.depth[index]),
                   color=pr.color[index], opacity=float(pr.opacity[index]), index=index)


def depth_order(pr: Projected) -> np.ndarray:
    """Indices of drawn Gaussians, front to back; ties keep index order."""
    idx = np.flatnonzero(pr.valid)
    return idx[np.argsort(pr.depth[idx], kind="stable")]


def bin_tiles(pr: Projected, order: np.ndarray, width: int, height: int):
    """CSR tile lists. Each tile's list keeps the global depth order."""
    tiles_x = (width + TILE - 1) // TILE
    tiles_y = (height + TILE - 1) // TILE
    r = pr.rect[order]
    tx0, tx1 = r[:, 0] // TILE, r[:, 1] // TILE
    ty0, ty1 = r[:, 2] // TILE, r[:, 3] // TILE
    nx, ny = tx1 - tx0 + 1, ty1 - ty0 + 1
    counts = nx * ny
    total = int(counts.sum())
    rank = np.repeat(np.arange(len(order)), counts)
    local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    nxr = np.repeat(nx, counts)
    tile = (np.repeat(ty0, counts) + local // nxr) * tiles_x + np.repeat(tx0, counts) + local % nxr
    perm = np.lexsort((rank, tile))
    tile_ids = tile[perm]
    gauss = order[rank[perm]]
    starts = np.searchsorted(tile_ids, np.arange(tiles_x * tiles_y + 1))
    return starts.astype(np.int64), gauss.astype(np.int64), tiles_x


# --------------------------------------------------------------------------
# blending kernels
# --------------------------------------------------------------------------

@numba.njit(cache=True, inline="always")
def _alpha(opac, g):
    a = opac * (g - G_CUT) / (1.0 - G_CUT)
    return a if a < ALPHA_MAX else ALPHA_MAX


@numba.njit(parallel=True, cache=True)
def _forward_kernel(starts, gauss, mean2d, conic, opac, color, depth, agent, n_agents,
                    width, height, tiles_x):
    n_tiles = len(starts) - 1
    image = np.zeros((height, width, 3))
    alpha = np.zeros((height, width))
    dnum = np.zeros((height, width))
    aw = np.zeros((n_agents, height, width))
    for tile in numba.prange(n_tiles):
        ty = tile // tiles_x
        tx = tile - ty * tiles_x
        s, e = starts[tile], starts[tile + 1]
        for py in range(ty * TILE, min(height, ty * TILE + TILE)):
            for px in range(tx * TILE, min(width, tx * TILE + TILE)):
                u = px + 0.5
                v = py + 0.5
                t = 1.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                acc = 0.0
                dn = 0.0
                for k in range(s, e):
                    if t < T_MIN:
                        break
                    g = gauss[k]
                    dx = u - mean2d[g, 0]
                    dy = v - mean2d[g, 1]
                    q = conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy + conic[g, 2] * dy * dy
                    if q >= Q_CUT:
                        continue
                    a = _alpha(opac[g], math.exp(-0.5 * q))
                    wgt = a * t
                    c0 += wgt * color[g, 0]
                    c1 += wgt * color[g, 1]
                    c2 += wgt * color[g, 2]
                    acc += wgt
                    dn += wgt * depth[g]
                    aw[agent[g], py, px] += wgt
                    t *= 1.0 - a
                image[py, px, 0] = c0
                image[py, px, 1] = c1
                image[py, px, 2] = c2
                alpha[py, px] = acc
                dnum[py, px] = dn
    return image, alpha, dnum, aw


@numba.njit(parallel=True, cache=True)
def _backward_kernel(starts, gauss, mean2d, conic, opac, color, depth, width, height, tiles_x,
                     g_img, g_num, g_acc):
    """Per-slot partials: d mean(2), d conic A/B/C (3), d opacity, d color(3), d depth."""
    n_tiles = len(starts) - 1
    part = np.zeros((len(gauss), 10))
    for tile in numba.prange(n_tiles):
        ty = tile // tiles_x
        tx = tile - ty * tiles_x
        s, e = starts[tile], starts[tile + 1]
        n = e - s
        if n == 0:
            continue
        slot = np.empty(n, np.int64)
        al = np.empty(n)
        tt = np.empty(n)
        qq = np.empty(n)
        for py in range(ty * TILE, min(height, ty * TILE + TILE)):
            for px in range(tx * TILE, min(width, tx * TILE + TILE)):
                u = px + 0.5
                v = py + 0.5
                t = 1.0
                m = 0
                for k in range(s, e):
                    if t < T_MIN:
                        break
                    g = gauss[k]
                    dx = u - mean2d[g, 0]
                    dy = v - mean2d[g, 1]
                    q = conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy + conic[g, 2] * dy * dy
                    if q >= Q_CUT:
                        continue
                    a = _alpha(opac[g], math.exp(-0.5 * q))
                    slot[m] = k
                    al[m] = a
                    tt[m] = t
                    qq[m] = q
                    m += 1
                    t *= 1.0 - a
                gr = g_img[py, px, 0]
                gg = g_img[py, px, 1]
                gb = g_img[py, px, 2]
                gn = g_num[py, px]
                ga = g_acc[py, px]
                suffix = 0.0
                for i in range(m - 1, -1, -1):
                    k = slot[i]
                    g = gauss[k]
                    a = al[i]
                    t = tt[i]
                    wgt = a * t
                    gw = gr * color[g, 0] + gg * color[g, 1] + gb * color[g, 2] + gn * depth[g] + ga
                    d_a = t * gw - suffix / (1.0 - a)
                    suffix += gw * wgt
                    part[k, 6] += wgt * gr
                    part[k, 7] += wgt * gg
                    part[k, 8] += wgt * gb
                    part[k, 9] += wgt * gn
                    ex = math.exp(-0.5 * qq[i])
                    if opac[g] * (ex - G_CUT) / (1.0 - G_CUT) >= ALPHA_MAX:
                        continue
                    part[k, 5] += d_a * (ex - G_CUT) / (1.0 - G_CUT)
                    d_q = -d_a * opac[g] * ex / (2.0 * (1.0 - G_CUT))
                    dx = u - mean2d[g, 0]
                    dy = v - mean2d[g, 1]
                    part[k, 0] += -d_q * (2.0 * conic[g, 0] * dx + 2.0 * conic[g, 1] * dy)
                    part[k, 1] += -d_q * (2.0 * conic[g, 1] * dx + 2.0 * conic[g, 2] * dy)
                    part[k, 2] += d_q * dx * dx
                    part[k, 3] += d_q * 2.0 * dx * dy
                    part[k, 4] += d_q * dy * dy
    return part


def set_threads(n: int) -> None:
    """Set kernel threads; 0 means all available cores."""
    numba.set_num_threads(numba.config.NUMBA_NUM_THREADS if n == 0 else max(1, min(n, numba.config.NUMBA_NUM_THREADS)))


# --------------------------------------------------------------------------
# public forward / backward
# --------------------------------------------------------------------------

@dataclass
class _Ctx:
    scene: GaussianScene
    deformed: object
    view: Pose
    cam: CameraModel
    pr: Projected
    starts: np.ndarray
    gauss: np.ndarray
    tiles_x: int
    agent_index: np.ndarray
    dnum: np.ndarray


def _agent_index(scene: GaussianScene):
    ids, inv = np.unique(scene.agent_ids, return_inverse=True)
    return ids, inv.astype(np.int64)


def render(scene: GaussianScene, t: float, cam_pose: Pose, cam: CameraModel) -> RenderOutput:
    """Render ``scene`` at time ``t`` from ego pose ``cam_pose``; caches what backward needs."""
    d = deform(scene, t)
    view = cam.view(cam_pose)
    pr = project(d, view, cam)
    order = depth_order(pr)
    starts, gauss, tiles_x = bin_tiles(pr, order, cam.width, cam.height)
    ids, agent_index = _agent_index(scene)
    image, alpha, dnum, aw = _forward_kernel(
        starts, gauss, np.ascontiguousarray(pr.mean2d), np.ascontiguousarray(pr.conic),
        np.ascontiguousarray(pr.opacity), np.ascontiguousarray(pr.color),
        np.ascontiguousarray(pr.depth), agent_index, len(ids), cam.width, cam.height, tiles_x)
    depth = dnum / np.maximum(alpha, EPS_ALPHA)
    ctx = _Ctx(scene, d, view, cam, pr, starts, gauss, tiles_x, agent_index, dnum)
    return RenderOutput(image=image, depth=depth, alpha=alpha,
                        agent_weights={int(a): aw[i] for i, a in enumerate(ids)}, ctx=ctx)


def splat_forward(scene: GaussianScene, t: float, cam_pose: Pose, cam: CameraModel) -> RenderOutput:
    return render(scene, t, cam_pose, cam)


def backward(out: RenderOutput, g_image: np.ndarray, g_depth: np.ndarray | None = None,
             g_alpha: np.ndarray | None = None) -> dict:
    """Gradients of a scalar loss w.r.t. every scene parameter, keyed like ``scene.params()``."""
    ctx: _Ctx = out.ctx
    cam, pr = ctx.cam, ctx.pr
    h, w = cam.height, cam.width
    g_image = np.ascontiguousarray(g_image, dtype=np.float64)
    g_depth = np.zeros((h, w)) if g_depth is None else np.asarray(g_depth, dtype=np.float64)
    g_acc = np.zeros((h, w)) if g_alpha is None else np.array(g_alpha, dtype=np.float64)
    den = np.maximum(out.alpha, EPS_ALPHA)
    g_num = g_depth / den
    g_acc += np.where(out.alpha > EPS_ALPHA, -g_depth * ctx.dnum / (den * den), 0.0)
    part = _backward_kernel(ctx.starts, ctx.gauss, np.ascontiguousarray(pr.mean2d),
                            np.ascontiguousarray(pr.conic), np.ascontiguousarray(pr.opacity),
                            np.ascontiguousarray(pr.color), np.ascontiguousarray(pr.depth),
                            w, h, ctx.tiles_x, g_image, np.ascontiguousarray(g_num), g_acc)
    n = len(ctx.scene)
    red = np.stack([np.bincount(ctx.gauss, weights=part[:, j], minlength=n) for j in range(10)], -1)
    return _chain(ctx, red)


def _chain(ctx: _Ctx, red: np.ndarray) -> dict:
    pr, cam, d = ctx.pr, ctx.cam, ctx.deformed
    g_mu = red[:, 0:2]
    g_con = red[:, 2:5]
    g_op = red[:, 5]
    g_col = red[:, 6:9]
    g_z = red[:, 9].copy()
    a, b, c = pr.conic[:, 0], pr.conic[:, 1], pr.conic[:, 2]
    conic_m = np.stack([np.stack([a, b], -1), np.stack([b, c], -1)], -2)
    gm = np.stack([np.stack([g_con[:, 0], 0.5 * g_con[:, 1]], -1),
                   np.stack([0.5 * g_con[:, 1], g_con[:, 2]], -1)], -2)
    g_cov2 = -conic_m @ gm @ conic_m
    wv = ctx.view.rotation
    k = pr.jac @ wv
    g_cov3 = np.swapaxes(k, 1, 2) @ g_cov2 @ k
    g_k = 2.0 * g_cov2 @ k @ pr.cov3d
    g_j = g_k @ wv.T
    x, y = pr.p_cam[:, 0], pr.p_cam[:, 1]
    z = np.where(pr.valid, pr.p_cam[:, 2], 1.0)
    lim_x, lim_y = _tangent_limits(cam)
    free_x = np.abs(x / z) < lim_x
    free_y = np.abs(y / z) < lim_y
    rx = np.clip(x / z, -lim_x, lim_x)
    ry = np.clip(y / z, -lim_y, lim_y)
    # mean2d uses the exact projection, so its Jacobian is the unclamped one
    jm = pr.jac.copy()
    jm[:, 0, 2] = -cam.fx * x / z ** 2
    jm[:, 1, 2] = -cam.fy * y / z ** 2
    g_p = np.einsum("nij,ni->nj", jm, g_mu)
    # J02 = -fx * rx / z and J12 = -fy * ry / z with rx, ry clamped tangents
    g_rx = g_j[:, 0, 2] * (-cam.fx / z) * free_x
    g_ry = g_j[:, 1, 2] * (-cam.fy / z) * free_y
    g_p[:, 0] += g_rx / z
    g_p[:, 1] += g_ry / z
    g_p[:, 2] += (g_j[:, 0, 0] * (-cam.fx / z ** 2) + g_j[:, 0, 2] * (cam.fx * rx / z ** 2)
                  + g_j[:, 1, 1] * (-cam.fy / z ** 2) + g_j[:, 1, 2] * (cam.fy * ry / z ** 2)
                  - g_rx * x / z ** 2 - g_ry * y / z ** 2)
    g_p[:, 2] += g_z
    g_p[~pr.valid] = 0.0
    g_cov3[~pr.valid] = 0.0
    g_ls, g_q = covariance_vjp(d.log_scales, d.quats_raw, g_cov3)
    op = pr.opacity
    col = pr.color
    grads = {
        "means": g_p @ wv,
        "opacity_logits": g_op * op * (1.0 - op),
        "log_scales": g_ls,
        "quats_raw": g_q,
        "color_logits": g_col * col * (1.0 - col),
    }
    return deform_vjp(ctx.scene, d, grads)


def splat_backward(scene: GaussianScene, t: float, cam_pose: Pose, cam: CameraModel,
                   g_image: np.ndarray, g_depth: np.ndarray | None = None) -> dict:
    """Re-render and back-propagate ``dL/dimage`` and ``dL/ddepth``."""
    return backward(render(scene, t, cam_pose, cam), g_image, g_depth)


def render_video(scene: GaussianScene, traj, cam: CameraModel) -> list:
    for t in traj.timestamps:
        scene.check_time(float(t))
    return [render(scene, float(t), pose, cam) for t, pose in zip(traj.timestamps, traj.poses)]


def strip(out: RenderOutput) -> RenderOutput:
    """Drop the backward cache (keeps long frame lists light)."""
    return RenderOutput(out.image, out.depth, out.alpha, out.agent_weights)
