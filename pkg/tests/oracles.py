"""Slow, independent reference implementations used as test oracles.

Nothing here calls into the numba kernels, shapely or the metric code under
test; each function is a straightforward loop over the definition.
"""
from __future__ import annotations

import math

import numpy as np
import scipy.linalg

from splat4d.gauss4d import GaussianScene, deform
from splat4d.geom import CameraModel, Pose

# renderer constants restated by hand
ALPHA_MAX = 0.99
T_MIN = 1e-4
BLUR = 0.3
CULL = 3.5
G_CUT = math.exp(-0.5 * CULL * CULL)
FOV_GUARD = 1.3


# --------------------------------------------------------------------------
# random scenes
# --------------------------------------------------------------------------

def random_scene(rng, n=None, width=32, height=32, temporal=0.3, agents=3) -> tuple:
    """Small random scene in front of an identity-pose camera; returns (scene, cam, t)."""
    n = int(rng.integers(1, 21)) if n is None else n
    f = rng.uniform(30.0, 50.0)
    cam = CameraModel(f, f * rng.uniform(0.9, 1.1), width / 2.0, height / 2.0, width, height)
    # ego frame: x forward, y left, z up
    means = np.c_[rng.uniform(3.0, 9.0, n), rng.uniform(-2.0, 2.0, n), rng.uniform(-2.0, 2.0, n)]
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    sc = GaussianScene.create(means=means, opacity_logits=rng.normal(0.0, 1.0, n),
                              log_scales=np.log(rng.uniform(0.08, 0.6, (n, 3))), quats=q,
                              color_logits=rng.normal(size=(n, 3)),
                              agent_ids=rng.integers(0, agents + 1, n), degree=2, t0=0.5, time_range=(0.0, 1.0))
    for k in ("d_means", "d_opacity", "d_scales", "d_rot", "d_colors"):
        setattr(sc, k, rng.normal(0.0, temporal, getattr(sc, k).shape))
    return sc, cam, float(rng.uniform(0.0, 1.0))


# --------------------------------------------------------------------------
# sequential blender
# --------------------------------------------------------------------------

def _rotmat(q):
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def reference_render(scene: GaussianScene, t: float, cam_pose: Pose, cam: CameraModel):
    """Pixel-by-pixel front-to-back compositing over a global depth sort.

    Returns (image, alpha, depth, agent_weights) with the same conventions as
    the renderer: tapered 3.5-sigma falloff, alpha clamp, early stop at low
    transmittance, blur floor, clamped Jacobian tangents.
    """
    d = deform(scene, t)
    view = cam.view(cam_pose).matrix()
    rw, tw = view[:3, :3], view[:3, 3]
    lim_x = FOV_GUARD * max(cam.cx, cam.width - cam.cx) / cam.fx
    lim_y = FOV_GUARD * max(cam.cy, cam.height - cam.cy) / cam.fy
    splats = []
    for i in range(len(scene)):
        p = rw @ d.means[i] + tw
        if p[2] <= cam.near_clip:
            continue
        s = np.exp(np.clip(d.log_scales[i], math.log(1e-6), math.log(1e3)))
        r = _rotmat(d.quats_raw[i])
        sigma = r @ np.diag(s * s) @ r.T
        rx = min(max(p[0] / p[2], -lim_x), lim_x)
        ry = min(max(p[1] / p[2], -lim_y), lim_y)
        jac = np.array([[cam.fx / p[2], 0.0, -cam.fx * rx / p[2]],
                        [0.0, cam.fy / p[2], -cam.fy * ry / p[2]]])
        cov = jac @ rw @ sigma @ rw.T @ jac.T + BLUR * np.eye(2)
        mean = np.array([cam.fx * p[0] / p[2] + cam.cx, cam.fy * p[1] / p[2] + cam.cy])
        op = 1.0 / (1.0 + math.exp(-d.opacity_logits[i]))
        col = 1.0 / (1.0 + np.exp(-d.color_logits[i]))
        splats.append((p[2], i, mean, np.linalg.inv(cov), op, col, int(scene.agent_ids[i])))
    splats.sort(key=lambda s: (s[0], s[1]))
    h, w = cam.height, cam.width
    image = np.zeros((h, w, 3))
    alpha = np.zeros((h, w))
    depth = np.zeros((h, w))
    weights = {int(a): np.zeros((h, w)) for a in np.unique(scene.agent_ids)}
    for py in range(h):
        for px in range(w):
            trans = 1.0
            num = 0.0
            for z, _, mean, inv, op, col, aid in splats:
                if trans < T_MIN:
                    break
                dxy = np.array([px + 0.5, py + 0.5]) - mean
                q = float(dxy @ inv @ dxy)
                if q >= CULL * CULL:
                    continue
                a = min(op * (math.exp(-0.5 * q) - G_CUT) / (1.0 - G_CUT), ALPHA_MAX)
                image[py, px] += trans * a * col
                alpha[py, px] += trans * a
                num += trans * a * z
                weights[aid][py, px] += trans * a
                trans *= 1.0 - a
            depth[py, px] = num / max(alpha[py, px], 1e-3)
    return image, alpha, depth, weights


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------

def box_iou(a, b) -> float:
    """Area ratio computed from explicit corner lists."""
    ax = (a.umin, a.umax)
    ay = (a.vmin, a.vmax)
    bx = (b.umin, b.umax)
    by = (b.vmin, b.vmax)
    ix = max(0.0, min(ax[1], bx[1]) - max(ax[0], bx[0]))
    iy = max(0.0, min(ay[1], by[1]) - max(ay[0], by[0]))
    inter = ix * iy
    area_a = (ax[1] - ax[0]) * (ay[1] - ay[0])
    area_b = (bx[1] - bx[0]) * (by[1] - by[0])
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


def frame_nta(projected, detected, d_thresh=None):
    if len(projected) == 0:
        return None
    total = 0.0
    for p in projected:
        pc = ((p.umin + p.umax) / 2.0, (p.vmin + p.vmax) / 2.0)
        best = None
        for d in detected:
            dc = ((d.umin + d.umax) / 2.0, (d.vmin + d.vmax) / 2.0)
            dist = math.sqrt((dc[0] - pc[0]) ** 2 + (dc[1] - pc[1]) ** 2)
            key = (dist, -box_iou(p, d))
            if best is None or key < best[0]:
                best = (key, d)
        if best is None:
            continue
        limit = math.hypot(p.umax - p.umin, p.vmax - p.vmin) if d_thresh is None else d_thresh
        if best[0][0] < limit:
            total += box_iou(p, best[1])
    return total / len(projected)


def nta(frames_projected, frames_detected, d_thresh=None) -> float:
    vals = [v for p, d in zip(frames_projected, frames_detected) if (v := frame_nta(p, d, d_thresh)) is not None]
    return sum(vals) / len(vals) if vals else 1.0


def ntl(gt, det) -> float:
    counts = {}
    for g, d in zip(np.asarray(gt, bool).ravel().tolist(), np.asarray(det, bool).ravel().tolist()):
        counts[(g, d)] = counts.get((g, d), 0) + 1
    tp = counts.get((True, True), 0)
    fp = counts.get((False, True), 0)
    fn = counts.get((True, False), 0)
    tn = counts.get((False, False), 0)
    lane = 1.0 if tp + fp + fn == 0 else tp / (tp + fp + fn)
    bg = 1.0 if tn + fp + fn == 0 else tn / (tn + fp + fn)
    return 50.0 * (lane + bg)


def frechet(feat_a: np.ndarray, feat_b: np.ndarray) -> float:
    """Textbook FID formula with ``scipy.linalg.sqrtm`` of the covariance product."""
    mu_a, mu_b = feat_a.mean(0), feat_b.mean(0)
    ca = np.cov(feat_a, rowvar=False, bias=True)
    cb = np.cov(feat_b, rowvar=False, bias=True)
    covmean = scipy.linalg.sqrtm(ca @ cb)
    covmean = np.real(covmean)
    d2 = np.sum((mu_a - mu_b) ** 2) + np.trace(ca) + np.trace(cb) - 2.0 * np.trace(covmean)
    return math.sqrt(max(float(d2), 0.0))


def frechet_nuclear(feat_a: np.ndarray, feat_b: np.ndarray) -> float:
    """Same distance with the cross term as a nuclear norm of centred data.

    ``sqrtm`` is inaccurate for singular covariances (fewer frames than
    features), so image-set comparisons use this form instead.
    """
    xa = feat_a - feat_a.mean(0)
    xb = feat_b - feat_b.mean(0)
    cross = np.linalg.svd(xa @ xb.T, compute_uv=False).sum() / math.sqrt(len(xa) * len(xb))
    d2 = (np.sum((feat_a.mean(0) - feat_b.mean(0)) ** 2) + np.sum(xa ** 2) / len(xa)
          + np.sum(xb ** 2) / len(xb) - 2.0 * cross)
    return math.sqrt(max(float(d2), 0.0))


def lane_pixels(segments, size, stroke=3):
    """Distance-field rasterisation: every pixel centre tested against every segment."""
    h, w = size
    mask = np.zeros((h, w), bool)
    r2 = (stroke / 2.0) ** 2
    for i in range(h):
        for j in range(w):
            px, py = j + 0.5, i + 0.5
            for (x0, y0), (x1, y1) in segments:
                dx, dy = x1 - x0, y1 - y0
                den = dx * dx + dy * dy
                s = 0.0 if den == 0 else min(max(((px - x0) * dx + (py - y0) * dy) / den, 0.0), 1.0)
                if (px - x0 - s * dx) ** 2 + (py - y0 - s * dy) ** 2 <= r2:
                    mask[i, j] = True
                    break
    return mask


# --------------------------------------------------------------------------
# lane-change replay
# --------------------------------------------------------------------------

def _on_segment(p, a, b, eps=1e-12):
    cross = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
    if abs(cross) > eps * max(1.0, math.hypot(b[0] - a[0], b[1] - a[1])):
        return False
    return (min(a[0], b[0]) - eps <= p[0] <= max(a[0], b[0]) + eps
            and min(a[1], b[1]) - eps <= p[1] <= max(a[1], b[1]) + eps)


def point_in_polygon(p, poly) -> bool:
    """Even-odd ray casting; points on an edge count as inside."""
    n = len(poly)
    inside = False
    for k in range(n):
        a, b = poly[k], poly[(k + 1) % n]
        if _on_segment(p, a, b):
            return True
        if (a[1] > p[1]) != (b[1] > p[1]):
            x = a[0] + (p[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1])
            if x > p[0]:
                inside = not inside
    return inside


def safe(p, frame_agents, poly, d_min) -> bool:
    if poly is not None and not point_in_polygon((p[0], p[1]), [tuple(v) for v in poly]):
        return False
    return all(math.hypot(p[0] - a[0], p[1] - a[1]) >= d_min for a in frame_agents)


def replay_lane_change(positions, agents_per_frame, poly, d_min, max_offset_init, seed):
    """Lane-change proposal re-run step by step; returns the accepted points or the failing frame index."""
    rng = np.random.default_rng(seed)
    out = [np.zeros(3)]
    offset = 0.0
    for k in range(1, len(positions)):
        max_offset = max_offset_init
        accepted = False
        for _ in range(33):
            new_offset = offset + rng.uniform(0.0, max_offset)
            cand = np.asarray(positions[k], float) + np.array([0.0, new_offset, 0.0])
            if safe(cand, agents_per_frame[k], poly, d_min):
                out.append(cand)
                offset = new_offset
                accepted = True
                break
            max_offset /= 2.0
        if not accepted:
            return k
    return np.array(out)


def features_by_correlation(image, w1, w2):
    """Recompute the 64-d descriptor with per-channel ``scipy.signal.correlate`` calls."""
    from scipy.signal import correlate

    def layer(x, w):
        return np.stack([sum(correlate(x[..., c], w[f, c], mode="valid") for c in range(x.shape[2]))
                         for f in range(len(w))], -1)

    a1 = np.maximum(layer(np.asarray(image, float), w1), 0.0)
    h, w = a1.shape[0] // 2 * 2, a1.shape[1] // 2 * 2
    pooled = (a1[0:h:2, 0:w:2] + a1[1:h:2, 0:w:2] + a1[0:h:2, 1:w:2] + a1[1:h:2, 1:w:2]) / 4.0
    a2 = np.maximum(layer(pooled, w2), 0.0)
    return np.concatenate([a1.mean((0, 1)), a1.std((0, 1)), a2.mean((0, 1)), a2.std((0, 1))])


def frechet_eig(feat_a: np.ndarray, feat_b: np.ndarray) -> float:
    """Covariance cross term from the eigenvalues of ``S_a C_b S_a`` via ``scipy.linalg.eigh``.

    With fewer samples than feature dimensions both covariances are rank deficient; eigenvalues
    below a relative cutoff are round-off and are zeroed before the square root.
    """
    mu_a, mu_b = feat_a.mean(0), feat_b.mean(0)
    ca = np.cov(feat_a, rowvar=False, bias=True)
    cb = np.cov(feat_b, rowvar=False, bias=True)
    w, v = scipy.linalg.eigh(ca)
    w = np.where(w > 1e-12 * max(w.max(), 1e-300), w, 0.0)
    sa = (v * np.sqrt(w)) @ v.T
    m = scipy.linalg.eigvalsh(sa @ cb @ sa)
    cross = np.sqrt(np.where(m > 1e-12 * max(m.max(), 1e-300), m, 0.0)).sum()
    d2 = np.sum((mu_a - mu_b) ** 2) + np.trace(ca) + np.trace(cb) - 2.0 * cross
    return math.sqrt(max(float(d2), 0.0))
