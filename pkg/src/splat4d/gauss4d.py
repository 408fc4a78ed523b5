"""Deformable Gaussian scene: canonical primitives plus polynomial temporal offsets.

Every primitive carries canonical parameters ``(x, gamma, s, r, c)`` and, per
attribute, polynomial coefficients over the basis ``tau, tau**2, ..., tau**D``
with ``tau = t - t0``. The basis vanishes at ``t0`` so the canonical frame is
reproduced exactly there.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .geom import axis_angle_to_quat, quat_mul, quat_to_rotmat

LOG_SCALE_MIN = float(np.log(1e-6))
LOG_SCALE_MAX = float(np.log(1e3))
LOGIT_MAX = 20.0

# trainable arrays in checkpoint/declaration order
CANONICAL = ("means", "opacity_logits", "log_scales", "quats", "color_logits")
TEMPORAL = ("d_means", "d_opacity", "d_scales", "d_rot", "d_colors")
PARAM_GROUPS = {
    "position": ("means",),
    "opacity": ("opacity_logits",),
    "scale": ("log_scales",),
    "rotation": ("quats",),
    "color": ("color_logits",),
    "temporal": TEMPORAL,
}


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass
class GaussianScene:
    """Structure-of-arrays Gaussian scene.

    Temporal coefficient arrays have shape ``(N, D, k)`` (``(N, D)`` for
    opacity) where row ``j`` multiplies ``tau**(j + 1)``. ``d_rot`` holds
    axis-angle increments.
    """

    means: np.ndarray
    opacity_logits: np.ndarray
    log_scales: np.ndarray
    quats: np.ndarray
    color_logits: np.ndarray
    agent_ids: np.ndarray
    d_means: np.ndarray
    d_opacity: np.ndarray
    d_scales: np.ndarray
    d_rot: np.ndarray
    d_colors: np.ndarray
    t0: float = 0.0
    time_range: tuple = (0.0, 0.0)

    def __post_init__(self):
        n = len(self.means)
        if n == 0:
            raise ValueError("a Gaussian scene needs at least one primitive")
        lo, hi = self.time_range
        if not lo <= self.t0 <= hi:
            raise ValueError(f"canonical time {self.t0} outside {self.time_range}")
        self.agent_ids = np.asarray(self.agent_ids, dtype=np.int64)

    @classmethod
    def create(cls, means, opacity_logits, log_scales, quats, color_logits, agent_ids=None,
               degree: int = 2, t0: float = 0.0, time_range=(0.0, 0.0)) -> "GaussianScene":
        means = np.asarray(means, dtype=np.float64).reshape(-1, 3)
        n = len(means)
        f = lambda a, shape: np.broadcast_to(np.asarray(a, dtype=np.float64), shape).copy()
        return cls(
            means=means.copy(),
            opacity_logits=f(opacity_logits, (n,)),
            log_scales=f(log_scales, (n, 3)),
            quats=f(quats, (n, 4)),
            color_logits=f(color_logits, (n, 3)),
            agent_ids=np.zeros(n, np.int64) if agent_ids is None else np.asarray(agent_ids, np.int64).copy(),
            d_means=np.zeros((n, degree, 3)),
            d_opacity=np.zeros((n, degree)),
            d_scales=np.zeros((n, degree, 3)),
            d_rot=np.zeros((n, degree, 3)),
            d_colors=np.zeros((n, degree, 3)),
            t0=float(t0),
            time_range=(float(time_range[0]), float(time_range[1])),
        )

    def __len__(self) -> int:
        return len(self.means)

    @property
    def degree(self) -> int:
        return self.d_means.shape[1]

    def params(self) -> dict:
        return {k: getattr(self, k) for k in CANONICAL + TEMPORAL}

    def copy(self) -> "GaussianScene":
        return replace(self, **{k: v.copy() for k, v in self.params().items()},
                       agent_ids=self.agent_ids.copy())

    def subset(self, idx) -> "GaussianScene":
        return replace(self, **{k: v[idx].copy() for k, v in self.params().items()},
                       agent_ids=self.agent_ids[idx].copy())

    def check_time(self, t: float) -> None:
        lo, hi = self.time_range
        if not (lo - 1e-9 <= t <= hi + 1e-9):
            raise ValueError(f"time {t} outside scene range [{lo}, {hi}]")


@dataclass
class Deformed:
    """Deformed parameters at one time, plus intermediates the backward pass reuses."""

    t: float
    means: np.ndarray        # x'
    opacity_logits: np.ndarray  # gamma'
    log_scales: np.ndarray   # s' before clamping
    quats_raw: np.ndarray    # q(delta r) * r, not renormalised
    color_logits: np.ndarray  # c'
    rot_vec: np.ndarray = field(repr=False, default=None)

    @property
    def opacity(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(np.clip(self.log_scales, LOG_SCALE_MIN, LOG_SCALE_MAX))

    @property
    def quats(self) -> np.ndarray:
        return self.quats_raw / np.linalg.norm(self.quats_raw, axis=-1, keepdims=True)

    @property
    def colors(self) -> np.ndarray:
        return sigmoid(self.color_logits)


def time_basis(t: float, t0: float, degree: int) -> np.ndarray:
    tau = float(t) - float(t0)
    return np.array([tau ** (k + 1) for k in range(degree)])


def deform(scene: GaussianScene, t: float) -> Deformed:
    scene.check_time(t)
    b = time_basis(t, scene.t0, scene.degree)
    rot_vec = np.einsum("k,nkj->nj", b, scene.d_rot)
    if np.any(b):
        q = quat_mul(axis_angle_to_quat(rot_vec), scene.quats)
    else:
        q = scene.quats.copy()
    return Deformed(
        t=float(t),
        means=scene.means + np.einsum("k,nkj->nj", b, scene.d_means),
        opacity_logits=scene.opacity_logits + scene.d_opacity @ b,
        log_scales=scene.log_scales + np.einsum("k,nkj->nj", b, scene.d_scales),
        quats_raw=q,
        color_logits=scene.color_logits + np.einsum("k,nkj->nj", b, scene.d_colors),
        rot_vec=rot_vec,
    )


def _left_mul_matrix(a: np.ndarray) -> np.ndarray:
    """L(a) with quat_mul(a, b) == L(a) @ b; batched over rows of ``a``."""
    w, x, y, z = np.moveaxis(a, -1, 0)
    return np.stack([
        np.stack([w, -x, -y, -z], -1),
        np.stack([x, w, -z, y], -1),
        np.stack([y, z, w, -x], -1),
        np.stack([z, -y, x, w], -1),
    ], -2)


def _right_mul_matrix(b: np.ndarray) -> np.ndarray:
    """R(b) with quat_mul(a, b) == R(b) @ a."""
    w, x, y, z = np.moveaxis(b, -1, 0)
    return np.stack([
        np.stack([w, -x, -y, -z], -1),
        np.stack([x, w, z, -y], -1),
        np.stack([y, -z, w, x], -1),
        np.stack([z, y, -x, w], -1),
    ], -2)


def axis_angle_to_quat_vjp(v: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Pull a quaternion cotangent ``g`` (N, 4) back to rotation vectors ``v`` (N, 3)."""
    theta = np.linalg.norm(v, axis=-1)
    f = 0.5 * np.sinc(theta / (2.0 * np.pi))  # sin(theta/2)/theta
    small = theta < 1e-3
    ts = np.where(small, 1.0, theta)
    # f'(theta)/theta, series near zero
    fp_over_t = np.where(
        small,
        -1.0 / 24.0 + theta ** 2 / 960.0,
        (0.5 * ts * np.cos(0.5 * ts) - np.sin(0.5 * ts)) / ts ** 3,
    )
    gw, gv = g[:, 0], g[:, 1:]
    return (-0.5 * f * gw)[:, None] * v + f[:, None] * gv + (fp_over_t * np.sum(gv * v, -1))[:, None] * v


def deform_vjp(scene: GaussianScene, d: Deformed, grads: dict) -> dict:
    """Chain cotangents on deformed parameters back to scene parameters.

    ``grads`` holds arrays keyed ``means``, ``opacity_logits``, ``log_scales``,
    ``quats_raw`` and ``color_logits``; the result is keyed like
    :meth:`GaussianScene.params`.
    """
    b = time_basis(d.t, scene.t0, scene.degree)
    gx, go, gs, gq, gc = (grads[k] for k in ("means", "opacity_logits", "log_scales",
                                               "quats_raw", "color_logits"))
    out = {
        "means": gx.copy(),
        "opacity_logits": go.copy(),
        "log_scales": gs.copy(),
        "color_logits": gc.copy(),
        "d_means": b[None, :, None] * gx[:, None, :],
        "d_opacity": b[None, :] * go[:, None],
        "d_scales": b[None, :, None] * gs[:, None, :],
        "d_colors": b[None, :, None] * gc[:, None, :],
    }
    if np.any(b):
        qd = axis_angle_to_quat(d.rot_vec)
        out["quats"] = np.einsum("nij,ni->nj", _left_mul_matrix(qd), gq)
        g_qd = np.einsum("nij,ni->nj", _right_mul_matrix(scene.quats), gq)
        g_v = axis_angle_to_quat_vjp(d.rot_vec, g_qd)
    else:
        out["quats"] = gq.copy()
        g_v = np.zeros_like(d.rot_vec)
    out["d_rot"] = b[None, :, None] * g_v[:, None, :]
    return out


def covariance(log_scale: np.ndarray, quat: np.ndarray) -> np.ndarray:
    """``R S S^T R^T`` with ``S = diag(exp(log_scale))``; batched over leading axes."""
    r = quat_to_rotmat(quat)
    s2 = np.exp(2.0 * np.clip(np.asarray(log_scale, dtype=np.float64), LOG_SCALE_MIN, LOG_SCALE_MAX))
    return np.einsum("...ij,...j,...kj->...ik", r, s2, r)


def rotmat_vjp(q: np.ndarray, g: np.ndarray) -> np.ndarray:
    """d<G, R(q)>/dq for unit quaternions q (N, 4) and cotangents G (N, 3, 3)."""
    w, x, y, z = np.moveaxis(q, -1, 0)
    g00, g01, g02 = g[:, 0, 0], g[:, 0, 1], g[:, 0, 2]
    g10, g11, g12 = g[:, 1, 0], g[:, 1, 1], g[:, 1, 2]
    g20, g21, g22 = g[:, 2, 0], g[:, 2, 1], g[:, 2, 2]
    dw = 2 * (-z * g01 + y * g02 + z * g10 - x * g12 - y * g20 + x * g21)
    dx = 2 * (y * g01 + z * g02 + y * g10 - 2 * x * g11 - w * g12 + z * g20 + w * g21 - 2 * x * g22)
    dy = 2 * (-2 * y * g00 + x * g01 + w * g02 + x * g10 + z * g12 - w * g20 + z * g21 - 2 * y * g22)
    dz = 2 * (-2 * z * g00 - w * g01 + x * g02 + w * g10 - 2 * z * g11 + y * g12 + x * g20 + y * g21)
    return np.stack([dw, dx, dy, dz], -1)


def covariance_vjp(log_scale: np.ndarray, quat_raw: np.ndarray, g_cov: np.ndarray):
    """Cotangents of log-scales and raw (unnormalised) quaternions given dL/dSigma.

    ``g_cov`` is assumed symmetric. Clamped log-scales receive zero gradient.
    """
    norm = np.linalg.norm(quat_raw, axis=-1, keepdims=True)
    qn = quat_raw / norm
    r = quat_to_rotmat(qn)
    ls = np.clip(log_scale, LOG_SCALE_MIN, LOG_SCALE_MAX)
    s2 = np.exp(2.0 * ls)
    # Sigma = sum_k s2_k r_k r_k^T with r_k the k-th column
    rgr = np.einsum("nik,nij,njk->nk", r, g_cov, r)
    g_ls = 2.0 * s2 * rgr
    g_ls = np.where((log_scale > LOG_SCALE_MIN) & (log_scale < LOG_SCALE_MAX), g_ls, 0.0)
    g_r = 2.0 * np.einsum("nij,njk,nk->nik", g_cov, r, s2)
    g_qn = rotmat_vjp(qn, g_r)
    g_q = (g_qn - qn * np.sum(qn * g_qn, -1, keepdims=True)) / norm
    return g_ls, g_q


# --------------------------------------------------------------------------
# initialisation
# --------------------------------------------------------------------------

def init_learnable(world, n: int, noise_pos: float, seed: int, motion_init: str = "zero") -> GaussianScene:
    """Subsample a learnable scene from the oracle scene of ``world``.

    Positions get isotropic Gaussian noise, colours go to mid-grey, opacities
    to 0.5 and temporal coefficients to zero. ``motion_init="tracks"`` instead
    seeds agent position offsets from the agent box tracks, the way tracked
    boxes seed dynamic objects in driving reconstructions.
    """
    gt = world.gt_scene if hasattr(world, "gt_scene") else world
    if n <= 0:
        raise ValueError("need at least one primitive")
    if n > len(gt):
        raise ValueError(f"requested {n} primitives from a scene of {len(gt)}")
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(len(gt), size=n, replace=False))
    sub = gt.subset(idx)
    sub.means = sub.means + rng.normal(0.0, noise_pos, size=sub.means.shape) if noise_pos > 0 else sub.means
    sub.color_logits = np.zeros_like(sub.color_logits)
    sub.opacity_logits = np.zeros_like(sub.opacity_logits)
    for k in TEMPORAL:
        setattr(sub, k, np.zeros_like(getattr(sub, k)))
    if motion_init == "tracks":
        for aid, coeffs in fit_track_polynomials(world, sub.degree, sub.t0).items():
            sub.d_means[sub.agent_ids == aid] = coeffs
    elif motion_init != "zero":
        raise ValueError(f"unknown motion init {motion_init!r}")
    return sub


def fit_track_polynomials(world, degree: int, t0: float) -> dict:
    """Least-squares polynomial (zero at ``t0``) through each agent's box-centre track."""
    ts = np.asarray(world.ego_traj.timestamps)
    basis = np.stack([(ts - t0) ** (k + 1) for k in range(degree)], -1)
    out = {}
    for aid, boxes in world.agents.items():
        centers = np.stack([b.center for b in boxes])
        i0 = int(np.argmin(np.abs(ts - t0)))
        rhs = centers - centers[i0]
        coef, *_ = np.linalg.lstsq(basis, rhs, rcond=None)
        out[aid] = coef
    return out


# --------------------------------------------------------------------------
# checkpoint
# --------------------------------------------------------------------------

MAGIC = b"SP4D"
VERSION = 1
_HEADER = struct.Struct("<4sIQId")


def _packed_fields(scene: GaussianScene) -> np.ndarray:
    n = len(scene)
    cols = [scene.means, scene.opacity_logits[:, None], scene.log_scales, scene.quats,
            scene.color_logits, scene.agent_ids[:, None].astype(np.float64)]
    for k in TEMPORAL:
        a = getattr(scene, k)
        cols.append(np.moveaxis(a, 1, -1).reshape(n, -1) if a.ndim == 3 else a)
    return np.concatenate(cols, axis=1)


def record_width(degree: int) -> int:
    return 3 + 1 + 3 + 4 + 3 + 1 + degree * (3 + 1 + 3 + 3 + 3)


def checkpoint_bytes(scene: GaussianScene) -> bytes:
    body = _packed_fields(scene).astype("<f4")
    return _HEADER.pack(MAGIC, VERSION, len(scene), scene.degree, float(scene.t0)) + body.tobytes()


def scene_from_bytes(data: bytes, time_range=None) -> GaussianScene:
    magic, version, count, degree, t0 = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise ValueError("not a SP4D checkpoint")
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    width = record_width(degree)
    rec = np.frombuffer(data, dtype="<f4", offset=_HEADER.size, count=count * width)
    rec = rec.reshape(count, width).astype(np.float64)
    cursor = 0

    def take(k):
        nonlocal cursor
        out = rec[:, cursor:cursor + k]
        cursor += k
        return out

    means, op, ls, q, col, aid = take(3), take(1)[:, 0], take(3), take(4), take(3), take(1)[:, 0]
    tmp = {}
    for k in TEMPORAL:
        if k == "d_opacity":
            tmp[k] = take(degree).copy()
        else:
            tmp[k] = np.moveaxis(take(3 * degree).reshape(count, 3, degree), -1, 1).copy()
    tr = (t0, t0) if time_range is None else tuple(time_range)
    return GaussianScene(means=means.copy(), opacity_logits=op.copy(), log_scales=ls.copy(),
                         quats=q.copy(), color_logits=col.copy(), agent_ids=np.rint(aid).astype(np.int64),
                         t0=t0, time_range=tr, **tmp)


def save_checkpoint(path, scene: GaussianScene, provenance: dict | None = None) -> None:
    from .io import atomic_write_bytes, atomic_write_text

    path = Path(path)
    atomic_write_bytes(path, checkpoint_bytes(scene))
    sidecar = {"time_range": list(scene.time_range), "provenance": provenance or {}}
    atomic_write_text(path.with_suffix(path.suffix + ".json"), json.dumps(sidecar, indent=2, sort_keys=True))


def load_checkpoint(path) -> GaussianScene:
    path = Path(path)
    side = path.with_suffix(path.suffix + ".json")
    tr = json.loads(side.read_text())["time_range"] if side.exists() else None
    return scene_from_bytes(path.read_bytes(), tr)
