"""Ray-bundle camera parameterization.

A camera is over-parameterized as a bundle of 7-vectors, one per sampled
pixel: a unit direction ``v``, a moment ``m = p x v`` (for any point ``p``
on the ray), and a depth ``d`` measured along ``v`` from the ray's
canonical base point ``v x m`` (the line's closest point to the origin).
The endpoint ``v x m + d * v`` is the point where the ray meets the
surface, which is what couples pose estimation to SDF learning.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateBundleError, DegenerateRayError, InputDomainError

# Below this, |v_raw| is considered unnormalizable.
DIRECTION_EPS = 1e-8
# Short-circuit tolerance making canonicalization bit-exact idempotent.
_CANON_TOL = 1e-12
# Smallest/largest singular value ratio below which the center solve is
# declared degenerate.
_BUNDLE_SV_RATIO = 1e-8


@dataclass(frozen=True)
class Ray:
    """One canonical ray: unit direction, orthogonal moment, depth."""

    v: np.ndarray
    m: np.ndarray
    d: float

    def endpoint(self) -> np.ndarray:
        return ray_endpoint(self)


@dataclass(frozen=True)
class RawRay:
    """Unconstrained 7 coefficients, e.g. straight out of diffusion."""

    coeffs: np.ndarray


@dataclass(frozen=True)
class RayBundle:
    """All rays of one image plus the pixels they were shot through."""

    rays: tuple
    pixels: np.ndarray  # (M, 2)
    image_index: int = 0

    def __post_init__(self):
        if len(self.rays) != len(self.pixels):
            raise InputDomainError(
                f"{len(self.rays)} rays vs {len(self.pixels)} pixels"
            )
        if len(self.rays) < 6:
            raise InputDomainError("a bundle needs at least 6 rays")

    def __len__(self) -> int:
        return len(self.rays)


@dataclass(frozen=True)
class Camera:
    """Pinhole camera: intrinsics, camera-to-world rotation, center."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: float
    height: float
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        c = np.asarray(self.center, dtype=np.float64)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "center", c)
        if self.fx <= 0 or self.fy <= 0:
            raise InputDomainError("focal lengths must be positive")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9:
            raise InputDomainError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise InputDomainError("rotation determinant is not +1")

    def unproject_directions(self, pixels: np.ndarray) -> np.ndarray:
        """Unit camera-frame directions for (M, 2) pixel coordinates."""
        px = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
        d = np.stack(
            [
                (px[:, 0] - self.cx) / self.fx,
                (px[:, 1] - self.cy) / self.fy,
                np.ones(len(px)),
            ],
            axis=1,
        )
        return d / np.linalg.norm(d, axis=1, keepdims=True)


def canonicalize(raw) -> Ray:
    """Project an unconstrained 7-vector onto a valid ray.

    The direction is normalized and the moment is orthogonalized against
    it; both are divided by |v_raw| so the represented line is unchanged
    under positive rescaling of (v, m). Depth passes through. Already
    valid rays are returned unchanged, which makes the map bit-exactly
    idempotent.
    """
    coeffs = raw.coeffs if isinstance(raw, RawRay) else np.asarray(raw, dtype=np.float64)
    v_raw = np.asarray(coeffs[:3], dtype=np.float64)
    m_raw = np.asarray(coeffs[3:6], dtype=np.float64)
    d = float(coeffs[6])
    n = np.linalg.norm(v_raw)
    if n <= DIRECTION_EPS:
        raise DegenerateRayError(f"direction norm {n:.3e} too small")
    if abs(n - 1.0) <= _CANON_TOL and abs(v_raw @ m_raw) <= _CANON_TOL:
        return Ray(v=v_raw, m=m_raw, d=d)
    v = v_raw / n
    m = (m_raw - (m_raw @ v) * v) / n
    return Ray(v=v, m=m, d=d)


def canonicalize_rows(flat: np.ndarray) -> np.ndarray:
    """Row-wise :func:`canonicalize` on an (M, 7) array.

    Degenerate rows (direction norm below threshold) are left at a unit
    +z direction with zero moment rather than raising; the returned mask
    marks them so callers can flag instead of crash mid-sampling.
    """
    flat = np.asarray(flat, dtype=np.float64)
    v_raw = flat[:, :3]
    m_raw = flat[:, 3:6]
    n = np.linalg.norm(v_raw, axis=1)
    degenerate = n <= DIRECTION_EPS
    n_safe = np.where(degenerate, 1.0, n)
    v = v_raw / n_safe[:, None]
    m = (m_raw - np.sum(m_raw * v, axis=1, keepdims=True) * v) / n_safe[:, None]
    already = (np.abs(n - 1.0) <= _CANON_TOL) & (
        np.abs(np.sum(v_raw * m_raw, axis=1)) <= _CANON_TOL
    )
    out = np.concatenate([v, m, flat[:, 6:7]], axis=1)
    out[already] = flat[already]
    out[degenerate, :3] = (0.0, 0.0, 1.0)
    out[degenerate, 3:6] = 0.0
    return out, degenerate


def _cross_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise cross product; np.cross has high per-call overhead for
    small batches, which matters in the per-camera hot path."""
    a = np.broadcast_to(a, b.shape)
    return np.stack(
        [
            a[:, 1] * b[:, 2] - a[:, 2] * b[:, 1],
            a[:, 2] * b[:, 0] - a[:, 0] * b[:, 2],
            a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0],
        ],
        axis=1,
    )


def ray_endpoint(ray: Ray) -> np.ndarray:
    """Surface point of a canonical ray: ``v x m + d * v``."""
    return np.cross(ray.v, ray.m) + ray.d * ray.v


def endpoints_from_rows(flat: np.ndarray) -> np.ndarray:
    """Endpoints for canonical (M, 7) rows, vectorized."""
    v = flat[:, :3]
    m = flat[:, 3:6]
    return np.cross(v, m) + flat[:, 6:7] * v


def camera_to_ray_bundle(
    camera: Camera,
    pixels: np.ndarray,
    depths=None,
    image_index: int = 0,
) -> RayBundle:
    """Shoot rays through pixels of a posed camera.

    ``depths``, when given, are ranges t along each ray measured from the
    camera center; the stored depth is ``t + (c . v)`` so that the
    endpoint ``v x m + d * v`` lands exactly at ``c + t * v``.
    """
    px = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    if (
        (px[:, 0] < 0).any()
        or (px[:, 0] > camera.width).any()
        or (px[:, 1] < 0).any()
        or (px[:, 1] > camera.height).any()
    ):
        raise InputDomainError("pixel outside image bounds")
    if depths is not None:
        depths = np.asarray(depths, dtype=np.float64)
        if depths.shape != (len(px),):
            raise InputDomainError("depths length must match pixels")
        if not np.all(np.isfinite(depths)) or (depths <= 0).any():
            raise InputDomainError("ranges must be finite and positive")

    d_cam = camera.unproject_directions(px)
    v = d_cam @ camera.rotation.T
    c = camera.center
    m = _cross_rows(c[None, :], v)
    if depths is None:
        d = np.zeros(len(px))
    else:
        d = depths + v @ c
    rows, degenerate = canonicalize_rows(np.concatenate([v, m, d[:, None]], axis=1))
    if degenerate.any():
        raise DegenerateRayError("camera produced a zero-length ray direction")
    rays = tuple(Ray(v=row[:3], m=row[3:6], d=float(row[6])) for row in rows)
    return RayBundle(rays=rays, pixels=px, image_index=image_index)


def bundle_to_flat(bundle: RayBundle) -> np.ndarray:
    """(M, 7) array with row k = (v_k, m_k, d_k)."""
    out = np.empty((len(bundle), 7))
    for k, r in enumerate(bundle.rays):
        out[k, :3] = r.v
        out[k, 3:6] = r.m
        out[k, 6] = r.d
    return out


def flat_to_bundle(flat: np.ndarray, pixels: np.ndarray, image_index: int = 0) -> RayBundle:
    """Inverse of :func:`bundle_to_flat`; canonicalizes every row."""
    flat = np.asarray(flat, dtype=np.float64)
    pixels = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    if flat.ndim != 2 or flat.shape[1] != 7 or len(flat) != len(pixels):
        raise InputDomainError(f"bad shapes: rays {flat.shape}, pixels {pixels.shape}")
    rays = tuple(canonicalize(row) for row in flat)
    return RayBundle(rays=rays, pixels=pixels, image_index=image_index)


def recover_camera(bundle: RayBundle, template: Camera) -> Camera:
    """Least-squares camera from a canonical bundle.

    The center is the point closest to all ray lines (3x3 normal
    equations); the rotation is the orthogonal Procrustes fit mapping
    the pixels' canonical unprojected directions onto the bundle's
    directions. Intrinsics and image size come from ``template``.
    """
    flat = bundle_to_flat(bundle)
    v = flat[:, :3]
    m = flat[:, 3:6]

    # center: argmin sum |(I - v v^T)(c - p0)|^2, p0 = v x m
    p0 = _cross_rows(v, m)
    proj = np.eye(3)[None] - v[:, :, None] * v[:, None, :]
    A = proj.sum(axis=0)
    b = np.einsum("kij,kj->i", proj, p0)
    svals = np.linalg.svd(A, compute_uv=False)
    if svals[-1] <= _BUNDLE_SV_RATIO * svals[0]:
        raise DegenerateBundleError("rays are (nearly) parallel; center is unconstrained")
    center = np.linalg.solve(A, b)

    # rotation: argmin over SO(3) of sum |R d_cam - v|^2
    d_cam = template.unproject_directions(bundle.pixels)
    H = v.T @ d_cam
    U, S, Vt = np.linalg.svd(H)
    if S[1] <= _BUNDLE_SV_RATIO * max(S[0], 1.0):
        raise DegenerateBundleError("direction covariance rank < 2")
    D = np.diag([1.0, 1.0, np.linalg.det(U @ Vt)])
    R = U @ D @ Vt
    return Camera(
        fx=template.fx,
        fy=template.fy,
        cx=template.cx,
        cy=template.cy,
        width=template.width,
        height=template.height,
        rotation=R,
        center=center,
    )
