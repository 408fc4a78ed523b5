"""Novel-view evaluation: agent IoU, lane IoU, feature-Frechet distance, PSNR.

Detections are read off the renderer itself: agent boxes from the per-agent
blend-weight maps and lanes from near-white pixels.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .cdts import perceptual_features
from .geom import Box2D
from .io import atomic_write_text

PSNR_CAP = 99.0
LANE_THRESHOLD = 0.75


def detect_agent_boxes(render, tau: float = 0.3) -> list:
    """Tight pixel box around each agent's weight map above ``tau``."""
    boxes = []
    for aid in sorted(render.agent_weights):
        if aid == 0:
            continue
        v, u = np.nonzero(render.agent_weights[aid] >= tau)
        if len(u) == 0:
            continue
        boxes.append(Box2D(float(u.min()), float(v.min()), float(u.max() + 1), float(v.max() + 1), int(aid)))
    return boxes


def iou(a: Box2D, b: Box2D) -> float:
    iw = min(a.umax, b.umax) - max(a.umin, b.umin)
    ih = min(a.vmax, b.vmax) - max(a.vmin, b.vmin)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def frame_nta(projected: list, detected: list, d_thresh: float | None = None) -> float | None:
    """Mean gated IoU over projected boxes; ``None`` when nothing is projected.

    Each projected box is matched to the detection with the nearest centre.
    The match scores its IoU if the centres are closer than ``d_thresh``
    (default: the projected box diagonal) and 0 otherwise.
    """
    if not projected:
        return None
    scores = []
    for p in projected:
        if not detected:
            scores.append(0.0)
            continue
        pc = p.center
        dist = [float(np.hypot(*(d.center - pc))) for d in detected]
        # ties resolve to the box with the larger IoU so the result ignores list order
        best = min(range(len(detected)), key=lambda i: (dist[i], -iou(p, detected[i])))
        thresh = p.diagonal if d_thresh is None else d_thresh
        scores.append(iou(p, detected[best]) if dist[best] < thresh else 0.0)
    return float(np.mean(scores))


def nta_iou(projected, detected, d_thresh: float | None = None) -> float:
    """Frame-averaged agent IoU.

    Accepts either one frame (two lists of boxes) or per-frame lists of lists.
    Frames without projected boxes are left out of the average.
    """
    if projected and isinstance(projected[0], Box2D) or detected and isinstance(detected[0], Box2D):
        projected, detected = [projected], [detected]
    if len(projected) != len(detected):
        raise ValueError("projected and detected frame counts differ")
    vals = [v for p, d in zip(projected, detected) if (v := frame_nta(p, d, d_thresh)) is not None]
    return float(np.mean(vals)) if vals else 1.0


def rasterize_lanes(lanes2d, size: tuple, stroke: int = 3) -> np.ndarray:
    """Binary mask of pixels whose centre lies within ``stroke / 2`` of any segment.

    Endpoints are first snapped to the centre of the pixel containing them, as a
    Bresenham walk would, so a horizontal stroke of width 3 is exactly 3 rows tall.
    """
    h, w = size
    mask = np.zeros((h, w), dtype=bool)
    r = stroke / 2.0
    for (u0, v0), (u1, v1) in lanes2d:
        u0, v0, u1, v1 = (math.floor(x) + 0.5 for x in (u0, v0, u1, v1))
        lo_u = max(int(math.floor(min(u0, u1) - r)), 0)
        hi_u = min(int(math.ceil(max(u0, u1) + r)), w)
        lo_v = max(int(math.floor(min(v0, v1) - r)), 0)
        hi_v = min(int(math.ceil(max(v0, v1) + r)), h)
        if lo_u >= hi_u or lo_v >= hi_v:
            continue
        uu, vv = np.meshgrid(np.arange(lo_u, hi_u) + 0.5, np.arange(lo_v, hi_v) + 0.5)
        du, dv = u1 - u0, v1 - v0
        den = du * du + dv * dv
        s = np.zeros_like(uu) if den == 0 else np.clip(((uu - u0) * du + (vv - v0) * dv) / den, 0.0, 1.0)
        d2 = (uu - u0 - s * du) ** 2 + (vv - v0 - s * dv) ** 2
        mask[lo_v:hi_v, lo_u:hi_u] |= d2 <= r * r
    return mask


def detect_lane_mask(image: np.ndarray) -> np.ndarray:
    return np.asarray(image).min(axis=-1) >= LANE_THRESHOLD


def _class_iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.count_nonzero(a | b)
    return 1.0 if union == 0 else np.count_nonzero(a & b) / union


def ntl_iou(gt_mask: np.ndarray, det_mask: np.ndarray) -> float:
    """Two-class mean IoU (lane, background) in percent."""
    gt = np.asarray(gt_mask, dtype=bool)
    det = np.asarray(det_mask, dtype=bool)
    if gt.shape != det.shape:
        raise ValueError(f"mask shapes differ: {gt.shape} vs {det.shape}")
    return 100.0 * 0.5 * (_class_iou(gt, det) + _class_iou(~gt, ~det))


def _sqrt_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    # eigenvalues under the numerical-rank tolerance are round-off; square roots
    # would blow them up to ~1e-8 each, so they are clamped to zero with the negatives
    tol = max(float(w.max(initial=0.0)), 0.0) * len(w) * np.finfo(np.float64).eps
    return (v * np.sqrt(np.where(w > tol, w, 0.0))) @ v.T


def frechet_from_stats(mu_a, cov_a, mu_b, cov_b) -> float:
    """Frechet distance between two Gaussians.

    ``Tr((C_a C_b)^(1/2))`` is taken as the trace of the symmetric matrix
    ``(C_a^(1/2) C_b C_a^(1/2))^(1/2)``, which has the same eigenvalues.
    """
    sa = _sqrt_psd(cov_a)
    cross = _sqrt_psd(sa @ cov_b @ sa)
    d2 = float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(cross))
    return math.sqrt(max(d2, 0.0))


def feature_stats(frames) -> tuple:
    feats = np.stack([perceptual_features(f) for f in frames])
    return feats.mean(axis=0), np.cov(feats, rowvar=False, bias=True)


def frechet_from_features(fa: np.ndarray, fb: np.ndarray) -> float:
    """Frechet distance between the Gaussians fitted to two feature sets.

    The covariance term ``Tr(C_a + C_b - 2 (C_a C_b)^(1/2))`` is evaluated as
    the orthogonal Procrustes residual ``min_U ||A - U B||_F^2`` with
    ``C_a = A^T A`` and ``C_b = B^T B`` built from centred, zero-padded
    features. It needs no square roots of rank-deficient covariances (fewer
    frames than features) and does not cancel, so equal sets give 0.
    """
    fa = np.asarray(fa, dtype=np.float64)
    fb = np.asarray(fb, dtype=np.float64)
    m = max(len(fa), len(fb))
    a = np.zeros((m, fa.shape[1]))
    b = np.zeros((m, fb.shape[1]))
    a[:len(fa)] = (fa - fa.mean(axis=0)) / math.sqrt(len(fa))
    b[:len(fb)] = (fb - fb.mean(axis=0)) / math.sqrt(len(fb))
    w, _, vt = np.linalg.svd(a @ b.T)
    resid = a - (w @ vt) @ b
    d2 = float(np.sum((fa.mean(axis=0) - fb.mean(axis=0)) ** 2)) + float(np.sum(resid * resid))
    return math.sqrt(d2)


def feature_frechet(set_a, set_b) -> float:
    if len(set_a) < 2 or len(set_b) < 2:
        raise ValueError("each frame set needs at least two frames")
    fa = np.stack([perceptual_features(f) for f in set_a])
    fb = np.stack([perceptual_features(f) for f in set_b])
    return frechet_from_features(fa, fb)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    return PSNR_CAP if mse < 1e-10 else 10.0 * math.log10(1.0 / mse)


# --------------------------------------------------------------------------
# report
# --------------------------------------------------------------------------

@dataclass
class EvalReport:
    method: str
    maneuver: str
    nta_iou: float
    ntl_iou: float
    ffd: float
    psnr: float | None = None
    per_frame: list = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 <= self.nta_iou <= 1.0:
            raise ValueError("nta_iou outside [0, 1]")
        if not 0.0 <= self.ntl_iou <= 100.0:
            raise ValueError("ntl_iou outside [0, 100]")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "EvalReport":
        return cls(**d)


PER_FRAME_FIELDS = ("frame", "t", "nta_iou", "ntl_iou", "psnr", "n_projected", "n_detected")


def evaluate(renders: list, conditions: list, reference_frames: list | None, method: str, maneuver: str,
             d_thresh: float | None = None, ffd_frames: list | None = None) -> EvalReport:
    """Score novel-view renders against projected conditions and (optionally) reference frames.

    PSNR compares each render with its reference frame. The Frechet distance
    compares the render set with ``ffd_frames`` (the recorded original-trajectory
    images in the pipeline), falling back to the reference frames.
    """
    if len(renders) != len(conditions):
        raise ValueError("one condition frame per render is required")
    rows, nta_vals, ntl_vals, psnr_vals = [], [], [], []
    for k, (r, c) in enumerate(zip(renders, conditions)):
        det = detect_agent_boxes(r)
        nta = frame_nta(c.boxes2d, det, d_thresh)
        h, w = r.image.shape[:2]
        ntl = ntl_iou(rasterize_lanes(c.lanes2d, (h, w)), detect_lane_mask(r.image))
        p = psnr(r.image, reference_frames[k]) if reference_frames is not None else None
        if nta is not None:
            nta_vals.append(nta)
        ntl_vals.append(ntl)
        if p is not None:
            psnr_vals.append(p)
        rows.append({"frame": k, "t": float(c.t), "nta_iou": nta, "ntl_iou": ntl, "psnr": p,
                     "n_projected": len(c.boxes2d), "n_detected": len(det)})
    ffd_ref = ffd_frames if ffd_frames is not None else reference_frames
    ffd = feature_frechet([r.image for r in renders], ffd_ref) if ffd_ref is not None else 0.0
    return EvalReport(method=method, maneuver=maneuver,
                      nta_iou=float(np.mean(nta_vals)) if nta_vals else 1.0,
                      ntl_iou=float(np.mean(ntl_vals)),
                      ffd=ffd,
                      psnr=float(np.mean(psnr_vals)) if psnr_vals else None,
                      per_frame=rows)


def report_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    wr = csv.DictWriter(buf, fieldnames=PER_FRAME_FIELDS, lineterminator="\n")
    wr.writeheader()
    for row in report.per_frame:
        wr.writerow({k: ("" if row[k] is None else row[k]) for k in PER_FRAME_FIELDS})
    return buf.getvalue()


def write_report(directory, report: EvalReport, stem: str) -> None:
    from pathlib import Path
    d = Path(directory)
    atomic_write_text(d / f"{stem}.json", json.dumps(report.to_json(), indent=2, sort_keys=True))
    atomic_write_text(d / f"{stem}.csv", report_csv(report))


def summary_table(reports: list) -> str:
    """Plain-text table: one row per (method, maneuver)."""
    head = f"{'method':<10} {'maneuver':<12} {'NTA-IoU':>8} {'NTL-IoU':>8} {'FFD':>9} {'PSNR':>7}"
    lines = [head, "-" * len(head)]
    for r in reports:
        ps = "" if r.psnr is None else f"{r.psnr:7.2f}"
        lines.append(f"{r.method:<10} {r.maneuver:<12} {r.nta_iou:8.3f} {r.ntl_iou:8.2f} {r.ffd:9.3f} {ps:>7}")
    return "\n".join(lines)
