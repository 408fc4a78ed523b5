"""Losses, cousin-pair batching and the training loop.

A cousin pair is an original-trajectory frame and a novel-trajectory frame
that share one timestamp. Baseline training renders only original frames;
mixed training renders both views of a pair every step and adds a novel-view
photometric term plus a cross-view perceptual regulariser.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.ndimage import correlate1d

from . import raster
from .gauss4d import LOG_SCALE_MAX, LOG_SCALE_MIN, LOGIT_MAX, PARAM_GROUPS, TEMPORAL, GaussianScene, save_checkpoint
from .geom import CameraModel, Pose
from .io import atomic_write_text

SSIM_C1 = 1e-4
SSIM_C2 = 9e-4
SSIM_SIGMA = 1.5
SSIM_RADIUS = 5


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class LossWeights:
    l1: float = 0.8
    depth: float = 0.1
    ssim: float = 0.2
    novel: float = 1.0
    reg: float = 1e-3

    def __post_init__(self):
        if min(self.l1, self.depth, self.ssim, self.novel, self.reg) < 0:
            raise ValueError("loss weights must be non-negative")


# --------------------------------------------------------------------------
# SSIM
# --------------------------------------------------------------------------

@lru_cache(maxsize=None)
def _gauss_taps() -> np.ndarray:
    x = np.arange(-SSIM_RADIUS, SSIM_RADIUS + 1, dtype=np.float64)
    w = np.exp(-0.5 * (x / SSIM_SIGMA) ** 2)
    return w / w.sum()


def _blur(x: np.ndarray) -> np.ndarray:
    # zero padding makes this its own adjoint (the kernel is symmetric)
    w = _gauss_taps()
    return correlate1d(correlate1d(x, w, axis=0, mode="constant"), w, axis=1, mode="constant")


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def ssim(a: np.ndarray, b: np.ndarray, return_grad: bool = False):
    """Mean SSIM over the interior where the 11x11 window fits, averaged over channels.

    With ``return_grad`` also returns ``dSSIM/da``.
    """
    a, b = _check_pair(a, b)
    if a.ndim == 2:
        out = ssim(a[..., None], b[..., None], return_grad)
        return (out[0], out[1][..., 0]) if return_grad else out
    h, w, nc = a.shape
    r = SSIM_RADIUS
    if h <= 2 * r or w <= 2 * r:
        raise ValueError("images must be larger than the 11x11 window")
    mask = np.zeros((h, w))
    mask[r:h - r, r:w - r] = 1.0
    n_valid = (h - 2 * r) * (w - 2 * r)
    total = 0.0
    grad = np.zeros_like(a) if return_grad else None
    for c in range(nc):
        x, y = a[..., c], b[..., c]
        mx, my = _blur(x), _blur(y)
        vx = _blur(x * x) - mx * mx
        vy = _blur(y * y) - my * my
        cxy = _blur(x * y) - mx * my
        a1 = 2 * mx * my + SSIM_C1
        a2 = 2 * cxy + SSIM_C2
        b1 = mx * mx + my * my + SSIM_C1
        b2 = vx + vy + SSIM_C2
        s = a1 * a2 / (b1 * b2)
        total += float((s * mask).sum()) / n_valid
        if return_grad:
            g = mask / (n_valid * nc)
            d_mx = 2 * my * (a2 - a1) / (b1 * b2) - 2 * mx * s * (1.0 / b1 - 1.0 / b2)
            d_exx = -s / b2
            d_exy = 2 * s / a2
            grad[..., c] = _blur(g * d_mx) + 2 * x * _blur(g * d_exx) + y * _blur(g * d_exy)
    value = total / nc
    return (value, grad) if return_grad else value


# --------------------------------------------------------------------------
# photometric losses
# --------------------------------------------------------------------------

def _l1(a, b):
    diff = a - b
    return float(np.abs(diff).mean()), np.sign(diff) / diff.size


def loss_ori(render, image, depth, w: LossWeights):
    """Original-view loss. Returns ``(value, dL/dimage, dL/ddepth)``.

    Depth L1 is averaged over pixels with a LiDAR return (``depth > 0``).
    """
    img, tgt = _check_pair(render.image, image)
    d_hat, d_tgt = _check_pair(render.depth, depth)
    l1, g_l1 = _l1(img, tgt)
    s, g_s = ssim(img, tgt, return_grad=True)
    value = w.l1 * l1 + w.ssim * (1.0 - s)
    g_img = w.l1 * g_l1 - w.ssim * g_s
    g_depth = np.zeros_like(d_hat)
    valid = d_tgt > 0
    n = int(valid.sum())
    if n and w.depth > 0:
        diff = np.where(valid, d_hat - d_tgt, 0.0)
        value += w.depth * float(np.abs(diff).sum()) / n
        g_depth = w.depth * np.sign(diff) / n
    return value, g_img, g_depth


def loss_novel(render, image, w: LossWeights):
    """Novel-view loss: image L1 and SSIM only; never reads ``render.depth``."""
    img, tgt = _check_pair(render.image, image)
    l1, g_l1 = _l1(img, tgt)
    s, g_s = ssim(img, tgt, return_grad=True)
    return w.l1 * l1 + w.ssim * (1.0 - s), w.l1 * g_l1 - w.ssim * g_s


def sparse_depth_l1(d_hat, d_tgt, weight: float):
    """Masked depth L1 (used only for the depth-on ablation of novel views)."""
    valid = d_tgt > 0
    n = int(valid.sum())
    if not n or weight == 0:
        return 0.0, np.zeros_like(d_hat)
    diff = np.where(valid, d_hat - d_tgt, 0.0)
    return weight * float(np.abs(diff).sum()) / n, weight * np.sign(diff) / n


# --------------------------------------------------------------------------
# perceptual features
# --------------------------------------------------------------------------

@lru_cache(maxsize=None)
def feature_bank() -> tuple:
    """The two frozen 5x5 filter banks, shape (16, 3, 5, 5) and (16, 16, 5, 5)."""
    with resources.files(__package__).joinpath("data/feature_bank.npz").open("rb") as fh:
        data = np.load(fh)
        w1, w2 = data["conv1"].copy(), data["conv2"].copy()
    w1.setflags(write=False)
    w2.setflags(write=False)
    return w1, w2


def _conv(x, w):
    # valid cross-correlation, x (H, W, C), w (F, C, k, k)
    k = w.shape[-1]
    p = sliding_window_view(x, (k, k), axis=(0, 1))
    h, wd = p.shape[:2]
    return p.reshape(h * wd, -1) @ w.reshape(len(w), -1).T, (h, wd)


def _conv_vjp(g, w, in_shape):
    k = w.shape[-1]
    h, wd = in_shape[0] - k + 1, in_shape[1] - k + 1
    gp = (g.reshape(h * wd, -1) @ w.reshape(len(w), -1)).reshape(h, wd, in_shape[2], k, k)
    gx = np.zeros(in_shape)
    for i in range(k):
        for j in range(k):
            gx[i:i + h, j:j + wd] += gp[..., i, j]
    return gx


def _stats(a):
    m = a.mean(axis=(0, 1))
    sd = np.sqrt(((a - m) ** 2).mean(axis=(0, 1)))
    return m, sd


def _stats_vjp(a, m, sd, g_m, g_sd):
    n = a.shape[0] * a.shape[1]
    safe = np.where(sd > 0, sd, 1.0)
    return (g_m / n) + (a - m) * np.where(sd > 0, g_sd / (n * safe), 0.0)


def _features(image):
    x = np.asarray(image, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] != 3:
        raise ValueError("expected an (H, W, 3) image")
    if x.shape[0] < 16 or x.shape[1] < 16:
        raise ValueError("perceptual features need at least 16x16 pixels")
    w1, w2 = feature_bank()
    z1, s1 = _conv(x, w1)
    a1 = np.maximum(z1, 0.0).reshape(*s1, -1)
    ph, pw = s1[0] // 2, s1[1] // 2
    pooled = a1[:2 * ph, :2 * pw].reshape(ph, 2, pw, 2, -1).mean(axis=(1, 3))
    z2, s2 = _conv(pooled, w2)
    a2 = np.maximum(z2, 0.0).reshape(*s2, -1)
    m1, sd1 = _stats(a1)
    m2, sd2 = _stats(a2)
    cache = (x.shape, z1.reshape(*s1, -1), a1, pooled, z2.reshape(*s2, -1), a2, m1, sd1, m2, sd2)
    return np.concatenate([m1, sd1, m2, sd2]), cache


def perceptual_features(image) -> np.ndarray:
    """64-d descriptor: per-channel mean and std of two fixed conv+ReLU layers."""
    return _features(image)[0]


def perceptual_features_vjp(image, g_feat) -> np.ndarray:
    """Pull a feature-space gradient back to the image."""
    _, cache = _features(image)
    return _features_backward(cache, np.asarray(g_feat, dtype=np.float64))


def _features_backward(cache, g):
    shape, z1, a1, pooled, z2, a2, m1, sd1, m2, sd2 = cache
    w1, w2 = feature_bank()
    ga2 = _stats_vjp(a2, m2, sd2, g[32:48], g[48:64])
    gz2 = ga2 * (z2 > 0)
    gpool = _conv_vjp(gz2, w2, pooled.shape)
    ga1 = _stats_vjp(a1, m1, sd1, g[0:16], g[16:32])
    ph, pw = pooled.shape[:2]
    ga1[:2 * ph, :2 * pw] += np.repeat(np.repeat(gpool, 2, axis=0), 2, axis=1) / 4.0
    gz1 = ga1 * (z1 > 0)
    return _conv_vjp(gz1, w1, shape)


def loss_reg(image_a, image_b, return_grad: bool = False):
    """L1 distance between the perceptual features of two renders."""
    fa, ca = _features(image_a)
    fb, cb = _features(image_b)
    diff = fa - fb
    value = float(np.abs(diff).sum())
    if not return_grad:
        return value
    s = np.sign(diff)
    return value, _features_backward(ca, s), _features_backward(cb, -s)


# --------------------------------------------------------------------------
# cousin pairs
# --------------------------------------------------------------------------

@dataclass
class CousinBatch:
    t: float
    ori_image: np.ndarray
    ori_depth: np.ndarray
    ori_pose: Pose
    novel_image: np.ndarray
    novel_pose: Pose
    novel_depth: np.ndarray | None = None


def combine(l_ori: float, l_novel: float, l_reg: float, w: LossWeights) -> float:
    return l_ori + w.novel * l_novel + w.reg * l_reg


def total_loss(batch: CousinBatch, renders: tuple, w: LossWeights, novel_depth_weight: float = 0.0):
    """Weighted sum over one cousin pair.

    ``renders`` is ``(render_ori, render_novel)``. Returns ``(total, parts,
    grads)`` where ``grads`` maps ``"ori"``/``"novel"`` to ``(dL/dimage,
    dL/ddepth)``. ``novel_depth_weight > 0`` adds a depth term on the novel
    view (an ablation, off by default).
    """
    r_o, r_n = renders
    lo, gi_o, gd_o = loss_ori(r_o, batch.ori_image, batch.ori_depth, w)
    ln, gi_n = loss_novel(r_n, batch.novel_image, w)
    gd_n = np.zeros_like(r_n.depth)
    if novel_depth_weight > 0 and batch.novel_depth is not None:
        ld, gd_n = sparse_depth_l1(r_n.depth, batch.novel_depth, novel_depth_weight)
        ln += ld
    lr, gr_o, gr_n = loss_reg(r_o.image, r_n.image, return_grad=True)
    total = combine(lo, ln, lr, w)
    grads = {
        "ori": (gi_o + w.reg * gr_o, gd_o),
        "novel": (w.novel * gi_n + w.reg * gr_n, w.novel * gd_n),
    }
    return total, {"loss_ori": lo, "loss_novel": ln, "loss_reg": lr}, grads


@dataclass
class FrameStream:
    timestamps: np.ndarray
    poses: list
    images: list
    depths: list | None = None

    def __len__(self) -> int:
        return len(self.timestamps)


def batch_stack(ori: FrameStream, novel: FrameStream) -> list:
    """Pair frames by timestamp, ascending in time."""
    to = np.asarray(ori.timestamps, dtype=np.float64)
    tn = np.asarray(novel.timestamps, dtype=np.float64)
    if len(to) != len(tn) or not np.array_equal(np.sort(to), np.sort(tn)):
        raise ValueError("original and novel streams cover different timestamps")
    jn = {float(t): j for j, t in enumerate(tn)}
    out = []
    for i in np.argsort(to, kind="stable"):
        j = jn[float(to[i])]
        out.append(CousinBatch(
            t=float(to[i]), ori_image=ori.images[i], ori_depth=ori.depths[i], ori_pose=ori.poses[i],
            novel_image=novel.images[j], novel_pose=novel.poses[j],
            novel_depth=None if novel.depths is None else novel.depths[j]))
    return out


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Per-epoch shuffle, reproducible from ``(seed, epoch)``."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def reproject_depth(depth: np.ndarray, src_pose: Pose, dst_pose: Pose, cam: CameraModel) -> np.ndarray:
    """Carry sparse depth samples into another view with a nearest-pixel z-buffer.

    Surfaces hidden from the source view have no samples, so the result is
    incomplete wherever the target view sees around occluders.
    """
    v, u = np.nonzero(depth > 0)
    out = np.zeros_like(depth)
    if len(u) == 0:
        return out
    z = depth[v, u]
    rays = np.stack([(u + 0.5 - cam.cx) / cam.fx, (v + 0.5 - cam.cy) / cam.fy, np.ones_like(z)], -1) * z[:, None]
    src_view = cam.view(src_pose)
    dst_view = cam.view(dst_pose)
    r_inv = src_view.rotation.T
    world = (rays - src_view.t) @ r_inv.T
    pc = dst_view.apply(world)
    ok = pc[:, 2] > cam.near_clip
    pc = pc[ok]
    uu = np.floor(cam.fx * pc[:, 0] / pc[:, 2] + cam.cx).astype(np.int64)
    vv = np.floor(cam.fy * pc[:, 1] / pc[:, 2] + cam.cy).astype(np.int64)
    inb = (uu >= 0) & (uu < cam.width) & (vv >= 0) & (vv < cam.height)
    uu, vv, zz = uu[inb], vv[inb], pc[inb, 2]
    # write far to near so the nearest sample wins
    order = np.argsort(-zz, kind="stable")
    out[vv[order], uu[order]] = zz[order]
    return out


# --------------------------------------------------------------------------
# optimiser
# --------------------------------------------------------------------------

DEFAULT_LR = {
    "position": 1.6e-4,
    "rotation": 1e-3,
    "scale": 1e-3,
    "opacity": 1e-3,
    "color": 2.5e-3,
    "temporal": 1e-3,
}
POSITION_LR_FINAL = 1.6e-6


@dataclass
class TrainConfig:
    iterations: int = 1000
    lr: dict = field(default_factory=lambda: dict(DEFAULT_LR))
    position_lr_final: float = POSITION_LR_FINAL
    # multiplies both position rates; None = 1.1 x camera-centre radius of the training views
    spatial_scale: float | None = None
    seed: int = 0
    cdts_enabled: bool = False
    weights: LossWeights = field(default_factory=LossWeights)
    novel_depth: bool = False
    freeze_temporal: bool = False
    log_every: int = 1
    checkpoint_every: int = 0

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        lr = dict(DEFAULT_LR)
        lr.update(self.lr)
        self.lr = lr
        if self.iterations <= 0:
            raise ValueError("iterations must be positive")
        if min(self.lr.values()) <= 0 or self.position_lr_final <= 0 or (
                self.spatial_scale is not None and self.spatial_scale <= 0):
            raise ValueError("learning rates must be positive")
        if set(self.lr) != set(DEFAULT_LR):
            raise ValueError(f"unknown parameter groups {sorted(set(self.lr) - set(DEFAULT_LR))}")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})

    def position_lr(self, step: int, extent: float = 1.0) -> float:
        """Log-linear decay from the initial to the final position rate."""
        frac = min(max(step / max(self.iterations - 1, 1), 0.0), 1.0)
        lo, hi = math.log(self.lr["position"]), math.log(self.position_lr_final)
        scale = extent if self.spatial_scale is None else self.spatial_scale
        return scale * math.exp(lo + frac * (hi - lo))


def camera_extent(poses) -> float:
    """1.1 x the largest distance of a camera centre from the centroid (at least 1)."""
    c = np.stack([p.t for p in poses])
    r = float(np.max(np.linalg.norm(c - c.mean(axis=0), axis=1))) if len(c) > 1 else 0.0
    return max(1.1 * r, 1.0)


class Adam:
    def __init__(self, params: dict, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-15):
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict, lrs: dict) -> None:
        """In-place update of every array in ``params`` that has a rate in ``lrs``."""
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, lr in lrs.items():
            g = grads[k]
            m = self.m[k]
            v = self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _param_rates(cfg: TrainConfig, step: int, extent: float) -> dict:
    rates = {}
    for group, keys in PARAM_GROUPS.items():
        if group == "temporal" and cfg.freeze_temporal:
            continue
        lr = cfg.position_lr(step, extent) if group == "position" else cfg.lr[group]
        for k in keys:
            rates[k] = lr
    return rates


def _project_constraints(scene: GaussianScene) -> None:
    scene.quats /= np.linalg.norm(scene.quats, axis=1, keepdims=True)
    np.clip(scene.log_scales, LOG_SCALE_MIN, LOG_SCALE_MAX, out=scene.log_scales)
    np.clip(scene.opacity_logits, -LOGIT_MAX, LOGIT_MAX, out=scene.opacity_logits)


def _add(acc: dict, g: dict) -> dict:
    return {k: acc[k] + g[k] for k in acc}


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

@dataclass
class TrainData:
    cam: CameraModel
    ori: FrameStream
    novel: FrameStream | None = None


LOG_FIELDS = ("step", "loss_ori", "loss_novel", "loss_reg", "total")


def train(scene: GaussianScene, data: TrainData, cfg: TrainConfig, checkpoint_dir=None):
    """Optimise ``scene`` in place-free fashion; returns ``(trained_scene, log)``.

    Baseline mode renders one original frame per step. Mixed mode renders
    both views of one cousin pair. Frames are visited in a per-epoch shuffle.
    """
    scene = scene.copy()
    cam = data.cam
    mixed = cfg.cdts_enabled
    w = cfg.weights
    use_novel = mixed and (w.novel > 0 or w.reg > 0)
    if use_novel:
        if data.novel is None:
            raise ValueError("mixed training needs a novel-view stream")
        batches = batch_stack(data.ori, data.novel)
    else:
        o = data.ori
        order0 = np.argsort(np.asarray(o.timestamps), kind="stable")
        batches = [CousinBatch(float(o.timestamps[i]), o.images[i], o.depths[i], o.poses[i], None, None)
                   for i in order0]
    params = scene.params()
    opt = Adam(params)
    extent = camera_extent(data.ori.poses)
    log = []
    n = len(batches)
    order = None
    for step in range(cfg.iterations):
        if step % n == 0:
            order = epoch_order(n, cfg.seed, step // n)
        b = batches[order[step % n]]
        r_o = raster.render(scene, b.t, b.ori_pose, cam)
        if use_novel:
            r_n = raster.render(scene, b.t, b.novel_pose, cam)
            total, parts, g = total_loss(b, (r_o, r_n), w, w.depth if cfg.novel_depth else 0.0)
            grads = _add(raster.backward(r_o, *g["ori"]), raster.backward(r_n, *g["novel"]))
        else:
            lo, gi, gd = loss_ori(r_o, b.ori_image, b.ori_depth, w)
            total, parts = lo, {"loss_ori": lo, "loss_novel": 0.0, "loss_reg": 0.0}
            grads = raster.backward(r_o, gi, gd)
        if not math.isfinite(total) or not all(np.all(np.isfinite(v)) for v in grads.values()):
            raise TrainingDiverged(f"non-finite loss or gradient at step {step}")
        opt.step(params, grads, _param_rates(cfg, step, extent))
        _project_constraints(scene)
        if cfg.log_every and (step % cfg.log_every == 0 or step == cfg.iterations - 1):
            log.append({"step": step, **parts, "total": total})
        if checkpoint_dir is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(Path(checkpoint_dir) / f"step_{step + 1:06d}.sp4d", scene,
                            {"step": step + 1, "mode": "cdts" if mixed else "baseline"})
    return scene, log


def log_csv(log: list) -> str:
    buf = io.StringIO()
    wr = csv.DictWriter(buf, fieldnames=LOG_FIELDS, lineterminator="\n")
    wr.writeheader()
    for row in log:
        wr.writerow({k: (row[k] if k == "step" else repr(float(row[k]))) for k in LOG_FIELDS})
    return buf.getvalue()


def write_log(path, log: list) -> None:
    atomic_write_text(path, log_csv(log))
