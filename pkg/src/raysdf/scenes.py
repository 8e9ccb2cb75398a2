"""Synthetic analytic-SDF scenes: shapes, camera rigs, traced ray bundles.

Stands in for real object datasets at desk scale. Shapes live inside the
unit ball, cameras sit on a shell of radius ~2 looking at the origin, and
ground-truth depths come from sphere tracing the exact SDF, so every
stored ray endpoint lies on the surface by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputDomainError
from .rays import Camera, RayBundle, camera_to_ray_bundle

DEFAULT_IMAGE_SIZE = 32.0
DEFAULT_FEATURE_DIM = 16
TRACE_TOL = 1e-7
TRACE_MAX_STEPS = 512
_GRID_SIZES = (16, 20, 24, 32, 48, 64, 96, 128)


@dataclass(frozen=True)
class AnalyticShape:
    """Exact SDF shape: sphere, box, torus, or a min-union of two."""

    kind: str
    params: dict

    def __post_init__(self):
        if self.kind not in ("sphere", "box", "torus", "union"):
            raise InputDomainError(f"unknown shape kind {self.kind!r}")

    def sdf(self, x: np.ndarray) -> np.ndarray:
        """Signed distance for (..., 3) points; negative inside."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        p = np.atleast_2d(x)
        k, prm = self.kind, self.params
        if k == "sphere":
            d = np.linalg.norm(p - prm["center"], axis=1) - prm["radius"]
        elif k == "box":
            q = np.abs(p - prm["center"]) - np.asarray(prm["half_extents"])
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
            inside = np.minimum(q.max(axis=1), 0.0)
            d = outside + inside
        elif k == "torus":
            q = p - prm["center"]
            ring = np.hypot(np.hypot(q[:, 0], q[:, 1]) - prm["major_radius"], q[:, 2])
            d = ring - prm["minor_radius"]
        else:  # union
            a = AnalyticShape(**prm["first"]).sdf(p)
            b = AnalyticShape(**prm["second"]).sdf(p)
            d = np.minimum(a, b)
        return d[0] if single else d

    def normal(self, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
        """Outward normal via central differences of the exact SDF."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        p = np.atleast_2d(x)
        g = np.empty_like(p)
        for i in range(3):
            e = np.zeros(3)
            e[i] = h
            g[:, i] = self.sdf(p + e) - self.sdf(p - e)
        g /= np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-300)
        return g[0] if single else g

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": _jsonable(self.params)}

    @staticmethod
    def from_dict(d: dict) -> "AnalyticShape":
        return AnalyticShape(kind=d["kind"], params=d["params"])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def analytic_sdf(shape: AnalyticShape, x: np.ndarray) -> np.ndarray:
    return shape.sdf(x)


def sphere_trace(
    shape: AnalyticShape,
    origins: np.ndarray,
    dirs: np.ndarray,
    max_t: float = 6.0,
    tol: float = TRACE_TOL,
):
    """March rays by the SDF value until |SDF| < tol.

    Returns (t, hit) arrays; t is undefined where hit is False. Accepts
    single rays or (B, 3) batches.
    """
    o = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    v = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    single = np.asarray(origins).ndim == 1
    t = np.zeros(len(o))
    hit = np.zeros(len(o), dtype=bool)
    active = np.ones(len(o), dtype=bool)
    for _ in range(TRACE_MAX_STEPS):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        d = shape.sdf(o[idx] + t[idx, None] * v[idx])
        newly_hit = np.abs(d) < tol
        hit[idx[newly_hit]] = True
        active[idx[newly_hit]] = False
        t[idx] += np.where(newly_hit, 0.0, d)
        overshoot = t > max_t
        active &= ~overshoot
    if single:
        return t[0], hit[0]
    return t, hit


def _look_at(center: np.ndarray, up: np.ndarray) -> np.ndarray:
    """Camera-to-world rotation with +z pointing from center to origin."""
    z = -center / np.linalg.norm(center)
    x = np.cross(up, z)
    nx = np.linalg.norm(x)
    if nx < 1e-8:
        raise InputDomainError("up vector parallel to view direction")
    x /= nx
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=1)


def sample_camera_rig(
    n_views: int,
    rng: np.random.Generator,
    radius_range=(1.8, 2.2),
    min_separation_deg: float = 15.0,
    image_size: float = DEFAULT_IMAGE_SIZE,
) -> list:
    """Cameras on a spherical shell, look-at origin, jittered up vector.

    Pairwise angular separation between camera centers is enforced by
    rejection sampling (<=1000 attempts per camera).
    """
    if not 2 <= n_views <= 6:
        raise ConfigError(f"n_views must be in [2, 6], got {n_views}")
    min_cos = np.cos(np.radians(min_separation_deg))
    centers = []
    for _ in range(n_views):
        for _attempt in range(1000):
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            if all(d @ c / np.linalg.norm(c) < min_cos for c in centers):
                r = rng.uniform(*radius_range)
                centers.append(d * r)
                break
        else:
            raise ConfigError("could not place cameras with the required separation")
    cams = []
    for c in centers:
        # up-vector jitter: rotate world-up by < 15 deg around a random axis
        angle = rng.uniform(0.0, np.radians(15.0))
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        K = np.array(
            [[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]]
        )
        Rj = np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)
        up = Rj @ np.array([0.0, 0.0, 1.0])
        if abs(up @ (c / np.linalg.norm(c))) > 0.99:
            up = Rj @ np.array([0.0, 1.0, 0.0])
        cams.append(
            Camera(
                fx=image_size,
                fy=image_size,
                cx=image_size / 2,
                cy=image_size / 2,
                width=image_size,
                height=image_size,
                rotation=_look_at(c, up),
                center=c,
            )
        )
    return cams


def _pixel_grid(g: int, image_size: float) -> np.ndarray:
    u = (np.arange(g) + 0.5) * image_size / g
    uu, ww = np.meshgrid(u, u, indexing="xy")
    return np.stack([uu.ravel(), ww.ravel()], axis=1)


def trace_bundle(
    shape: AnalyticShape,
    camera: Camera,
    rays_per_image: int,
    image_index: int = 0,
):
    """Ground-truth bundle of the first ``rays_per_image`` hit pixels.

    Miss rays carry no surface endpoint and are excluded; the pixel grid
    is densified until enough hits are collected.
    """
    for g in _GRID_SIZES:
        px = _pixel_grid(g, camera.width)
        d_cam = camera.unproject_directions(px)
        v = d_cam @ camera.rotation.T
        o = np.broadcast_to(camera.center, v.shape)
        t, hit = sphere_trace(shape, o, v)
        if hit.sum() >= rays_per_image:
            keep = np.flatnonzero(hit)[:rays_per_image]
            return camera_to_ray_bundle(camera, px[keep], t[keep], image_index), t[keep]
    raise ConfigError(
        f"shape too small on screen: {int(hit.sum())} hits at grid {g}"
    )


def make_features(
    shape: AnalyticShape,
    camera: Camera,
    pixels: np.ndarray,
    feature_dim: int = DEFAULT_FEATURE_DIM,
) -> np.ndarray:
    """Deterministic per-ray features replacing learned image embeddings.

    Concatenates normalized pixel coords, the hit-point surface normal in
    the camera frame (zeros on miss), inverse range (0 on miss), and a
    4-frequency positional encoding of the pixel; padded or truncated to
    ``feature_dim``.
    """
    px = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    M = len(px)
    d_cam = camera.unproject_directions(px)
    v = d_cam @ camera.rotation.T
    o = np.broadcast_to(camera.center, v.shape)
    t, hit = sphere_trace(shape, o, v)
    normal_cam = np.zeros((M, 3))
    inv_range = np.zeros(M)
    if hit.any():
        pts = o[hit] + t[hit, None] * v[hit]
        normal_cam[hit] = shape.normal(pts) @ camera.rotation
        inv_range[hit] = 1.0 / t[hit]
    norm_px = px / np.array([camera.width, camera.height])
    enc = []
    for f in range(4):
        w = (2.0**f) * np.pi
        enc.extend([np.sin(w * norm_px), np.cos(w * norm_px)])
    enc = np.concatenate(enc, axis=1)  # (M, 16)
    feats = np.concatenate([norm_px, normal_cam, inv_range[:, None], enc], axis=1)
    if feats.shape[1] < feature_dim:
        feats = np.pad(feats, ((0, 0), (0, feature_dim - feats.shape[1])))
    return feats[:, :feature_dim]


@dataclass(frozen=True)
class Scene:
    """One synthetic scene: shape, cameras, GT bundles, ray features."""

    shape: AnalyticShape
    cameras: list
    bundles: list
    features: np.ndarray  # (N, M, F)

    def __post_init__(self):
        if not 2 <= len(self.cameras) <= 6:
            raise InputDomainError("scenes use 2-6 views")


DEFAULT_SHAPE_MIX = {"sphere": 1.0, "box": 1.0, "torus": 1.0, "union": 1.0}


def sample_shape(rng: np.random.Generator, mix: dict = None) -> AnalyticShape:
    """Random shape from the (weighted) mix.

    Parameter ranges keep every shape inside the [-1,1]^3 volume with the
    farthest surface point at most ~1.2 from the origin, so ray depths and
    moment norms stay clear of the 1.5 sampling clip.
    """
    mix = dict(DEFAULT_SHAPE_MIX if mix is None else mix)
    kinds = [k for k in ("sphere", "box", "torus", "union") if mix.get(k, 0) > 0]
    if not kinds:
        raise ConfigError("shape mix has no positive weights")
    w = np.array([float(mix[k]) for k in kinds])
    kind = kinds[int(rng.choice(len(kinds), p=w / w.sum()))]
    center = rng.uniform(-0.1, 0.1, size=3)
    if kind == "sphere":
        return AnalyticShape("sphere", {"center": center, "radius": float(rng.uniform(0.45, 0.85))})
    if kind == "box":
        h = rng.uniform(0.3, 0.55, size=3)
        return AnalyticShape("box", {"center": center, "half_extents": h})
    if kind == "torus":
        R = float(rng.uniform(0.4, 0.6))
        r = float(rng.uniform(0.15, min(0.3, 0.88 - R)))
        return AnalyticShape("torus", {"center": center, "major_radius": R, "minor_radius": r})
    off = rng.uniform(0.15, 0.3, size=3) * rng.choice([-1.0, 1.0], size=3)
    first = {"kind": "sphere", "params": {"center": center + off, "radius": float(rng.uniform(0.3, 0.5))}}
    second = {"kind": "box", "params": {"center": center - off, "half_extents": rng.uniform(0.2, 0.4, size=3)}}
    return AnalyticShape("union", {"first": first, "second": second})


def generate_scene(
    rng: np.random.Generator,
    n_views: int,
    rays_per_image: int,
    feature_dim: int = DEFAULT_FEATURE_DIM,
    radius_range=(1.8, 2.2),
    shape_mix: dict = None,
) -> Scene:
    shape = sample_shape(rng, shape_mix)
    cams = sample_camera_rig(n_views, rng, radius_range)
    bundles = []
    feats = np.empty((n_views, rays_per_image, feature_dim))
    for i, cam in enumerate(cams):
        bundle, _ = trace_bundle(shape, cam, rays_per_image, image_index=i)
        bundles.append(bundle)
        feats[i] = make_features(shape, cam, bundle.pixels, feature_dim)
    return Scene(shape=shape, cameras=cams, bundles=bundles, features=feats)
