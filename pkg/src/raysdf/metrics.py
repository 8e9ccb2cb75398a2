"""Evaluation suite: pairwise pose accuracies and point-based surface
metrics (Chamfer, Hausdorff, normal consistency, F-score).

Estimated poses are only defined up to a global similarity, so rotation
accuracy uses relative rotations and translation accuracy aligns the
camera centers with a closed-form Umeyama fit first.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateBundleError, InputDomainError
from .mesh import Mesh


@dataclass(frozen=True)
class MetricsReport:
    rotation_accuracy_at_15: float
    translation_accuracy_at_0_1: float
    cd: float
    hd: float
    nc: float
    f_score: float
    rotation_errors_deg: np.ndarray = field(default_factory=lambda: np.empty(0))
    translation_errors: np.ndarray = field(default_factory=lambda: np.empty(0))

    def __post_init__(self):
        for name in ("rotation_accuracy_at_15", "translation_accuracy_at_0_1", "nc", "f_score"):
            v = getattr(self, name)
            if np.isfinite(v) and not 0.0 <= v <= 1.0 + 1e-12:
                raise InputDomainError(f"{name}={v} outside [0,1]")
        if np.isfinite(self.cd) and np.isfinite(self.hd) and self.cd > self.hd + 1e-12:
            raise InputDomainError("cd must not exceed hd")


def rotation_error_deg(Ra: np.ndarray, Rb: np.ndarray) -> float:
    """Geodesic angle between two rotations in degrees."""
    cosang = (np.trace(Ra @ Rb.T) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0))))


def rotation_accuracy(est_cameras, gt_cameras, threshold_deg: float = 15.0,
                      relative: bool = True):
    """Fraction of camera pairs whose relative rotation error is under
    the threshold; falls back to absolute per-camera errors when
    ``relative`` is False (then a global gauge is NOT removed)."""
    if len(est_cameras) != len(gt_cameras):
        raise InputDomainError("camera count mismatch")
    if len(est_cameras) < 2:
        raise InputDomainError("need at least 2 cameras")
    errors = []
    if relative:
        n = len(est_cameras)
        for i in range(n):
            for j in range(i + 1, n):
                Re = est_cameras[j].rotation @ est_cameras[i].rotation.T
                Rg = gt_cameras[j].rotation @ gt_cameras[i].rotation.T
                errors.append(rotation_error_deg(Re, Rg))
    else:
        for e, g in zip(est_cameras, gt_cameras):
            errors.append(rotation_error_deg(e.rotation, g.rotation))
    errors = np.asarray(errors)
    return float(np.mean(errors < threshold_deg)), errors


def umeyama_align(src: np.ndarray, dst: np.ndarray):
    """Least-squares similarity (scale, rotation, translation) with
    dst ~ scale * R @ src + t; det-corrected rotation."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or len(src) < 3:
        raise InputDomainError("need >= 3 matched points of equal shape")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    xs = src - mu_s
    xd = dst - mu_d
    cov = xd.T @ xs / len(src)
    U, S, Vt = np.linalg.svd(cov)
    if S[1] <= 1e-12 * max(S[0], 1.0):
        raise DegenerateBundleError("point configuration is (nearly) collinear")
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U) * np.linalg.det(Vt))])
    R = U @ D @ Vt
    var_s = (xs**2).sum() / len(src)
    scale = float(np.trace(np.diag(S) @ D) / var_s)
    t = mu_d - scale * R @ mu_s
    return scale, R, t


def translation_accuracy(est_cameras, gt_cameras, threshold: float = 0.1):
    """Fraction of cameras whose center, after similarity alignment to
    the GT centers, is within the threshold. With 2 cameras only, scale
    is fixed by the GT baseline instead (flagged via the third return)."""
    if len(est_cameras) != len(gt_cameras):
        raise InputDomainError("camera count mismatch")
    if len(est_cameras) < 2:
        raise InputDomainError("need at least 2 cameras")
    est = np.stack([c.center for c in est_cameras])
    gt = np.stack([c.center for c in gt_cameras])
    fallback = len(est) < 3
    if fallback:
        base_est = np.linalg.norm(est[1] - est[0])
        if base_est < 1e-12:
            errors = np.full(len(est), np.inf)
            return 0.0, errors, True
        s = np.linalg.norm(gt[1] - gt[0]) / base_est
        d = gt[1] - gt[0]
        e = s * (est[1] - est[0])
        # rotate est baseline onto gt baseline, then match midpoints
        axis = np.cross(e, d)
        na = np.linalg.norm(axis)
        if na < 1e-12:
            R = np.eye(3) if e @ d > 0 else -np.eye(3) + 2 * np.outer(d, d) / (d @ d)
        else:
            axis /= na
            ang = np.arctan2(na, e @ d)
            K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
            R = np.eye(3) + np.sin(ang) * K + (1 - np.cos(ang)) * (K @ K)
        aligned = (s * est - s * est.mean(0)) @ R.T + gt.mean(0)
    else:
        try:
            s, R, t = umeyama_align(est, gt)
            aligned = est @ (s * R).T + t
        except DegenerateBundleError:
            aligned = est
    errors = np.linalg.norm(aligned - gt, axis=1)
    return float(np.mean(errors < threshold)), errors, fallback


def sample_surface(m: Mesh, n: int = 10000, rng=None):
    """Area-weighted uniform samples on a mesh; returns (points, normals)."""
    if len(m.triangles) == 0:
        raise InputDomainError("empty mesh")
    rng = rng or np.random.default_rng(0)
    areas = m.triangle_areas()
    total = areas.sum()
    if total <= 0:
        raise InputDomainError("mesh has zero total area")
    tri = rng.choice(len(areas), size=n, p=areas / total)
    u = rng.random(n)
    v = rng.random(n)
    flip = u + v > 1
    u[flip] = 1 - u[flip]
    v[flip] = 1 - v[flip]
    t = m.triangles[tri]
    a, b, c = m.vertices[t[:, 0]], m.vertices[t[:, 1]], m.vertices[t[:, 2]]
    pts = a + u[:, None] * (b - a) + v[:, None] * (c - a)
    w = 1 - u - v
    nrm = (
        w[:, None] * m.normals[t[:, 0]]
        + u[:, None] * m.normals[t[:, 1]]
        + v[:, None] * m.normals[t[:, 2]]
    )
    nn = np.linalg.norm(nrm, axis=1, keepdims=True)
    nrm = np.where(nn > 1e-300, nrm / np.maximum(nn, 1e-300), [0.0, 0.0, 1.0])
    return pts, nrm


@dataclass(frozen=True)
class SurfaceMetrics:
    cd: float
    hd: float
    nc: float
    f_score: float
    precision: float
    recall: float


def surface_metrics(
    pred: Mesh,
    gt: Mesh,
    n: int = 10000,
    f_tau: float | None = None,
    rng=None,
    pred_samples=None,
    gt_samples=None,
) -> SurfaceMetrics:
    """Point-based surface metrics between two meshes.

    F-score threshold defaults to 5% of the GT bounding-box diagonal.
    Pre-drawn (points, normals) sample pairs may be passed to pin sample
    sets across calls.
    """
    rng = rng or np.random.default_rng(0)
    p_pts, p_nrm = pred_samples if pred_samples is not None else sample_surface(pred, n, rng)
    g_pts, g_nrm = gt_samples if gt_samples is not None else sample_surface(gt, n, rng)
    if f_tau is None:
        bbox = gt.vertices.max(axis=0) - gt.vertices.min(axis=0)
        f_tau = 0.05 * float(np.linalg.norm(bbox))
    tree_g = cKDTree(g_pts)
    tree_p = cKDTree(p_pts)
    d_pg, idx_pg = tree_g.query(p_pts)
    d_gp, idx_gp = tree_p.query(g_pts)
    cd = 0.5 * (d_pg.mean() + d_gp.mean())
    hd = max(d_pg.max(), d_gp.max())
    nc = 0.5 * (
        np.abs(np.sum(p_nrm * g_nrm[idx_pg], axis=1)).mean()
        + np.abs(np.sum(g_nrm * p_nrm[idx_gp], axis=1)).mean()
    )
    precision = float(np.mean(d_pg < f_tau))
    recall = float(np.mean(d_gp < f_tau))
    f = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return SurfaceMetrics(
        cd=float(cd), hd=float(hd), nc=float(nc), f_score=float(f),
        precision=precision, recall=recall,
    )
