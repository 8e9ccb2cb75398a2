"""Isosurface extraction and OBJ serialization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from skimage import measure

from .errors import EmptySurfaceError, InputDomainError, ObjParseError

_DEGENERATE_AREA = 1e-12


@dataclass(frozen=True)
class Mesh:
    vertices: np.ndarray  # (V, 3)
    triangles: np.ndarray  # (T, 3) int indices
    normals: np.ndarray  # (V, 3) unit

    def __post_init__(self):
        t = self.triangles
        if t.size and (t.min() < 0 or t.max() >= len(self.vertices)):
            raise InputDomainError("triangle index out of range")

    def triangle_areas(self) -> np.ndarray:
        v = self.vertices
        t = self.triangles
        e1 = v[t[:, 1]] - v[t[:, 0]]
        e2 = v[t[:, 2]] - v[t[:, 0]]
        return 0.5 * np.linalg.norm(np.cross(e1, e2), axis=1)


def marching_cubes(
    sdf_fn,
    resolution: int = 64,
    bounds=(-1.0, 1.0),
    iso: float = 0.0,
) -> Mesh:
    """Extract the iso-surface of a scalar field given as a query function.

    ``sdf_fn`` takes (B, 3) points and returns (B,) values. Vertices are
    placed by linear interpolation along sign-changing grid edges; vertex
    normals are the normalized central-difference gradient of the field.
    """
    if resolution < 8:
        raise InputDomainError("resolution must be >= 8")
    lo, hi = bounds
    axis = np.linspace(lo, hi, resolution)
    gx, gy, gz = np.meshgrid(axis, axis, axis, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    vol = np.asarray(sdf_fn(pts), dtype=np.float64).reshape(resolution, resolution, resolution)
    if not ((vol > iso).any() and (vol < iso).any()):
        raise EmptySurfaceError("field has no sign change at the iso level")
    spacing = (hi - lo) / (resolution - 1)
    verts, faces, _, _ = measure.marching_cubes(vol, level=iso, spacing=(spacing,) * 3)
    verts = verts + lo

    # drop numerically degenerate triangles and re-index
    e1 = verts[faces[:, 1]] - verts[faces[:, 0]]
    e2 = verts[faces[:, 2]] - verts[faces[:, 0]]
    areas = 0.5 * np.linalg.norm(np.cross(e1, e2), axis=1)
    faces = faces[areas > _DEGENERATE_AREA]
    used = np.unique(faces)
    remap = np.full(len(verts), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    verts = verts[used]
    faces = remap[faces]

    h = 0.5 * spacing
    grad = np.empty_like(verts)
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        grad[:, i] = sdf_fn(verts + e) - sdf_fn(verts - e)
    norms = np.linalg.norm(grad, axis=1, keepdims=True)
    grad = np.where(norms > 1e-300, grad / np.maximum(norms, 1e-300), [0.0, 0.0, 1.0])
    return Mesh(vertices=verts, triangles=faces.astype(np.int64), normals=grad)


def save_obj(mesh: Mesh, path) -> None:
    """Wavefront OBJ with v/vn/f records, 1-based indices."""
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for n in mesh.normals:
            fh.write(f"vn {n[0]:.9g} {n[1]:.9g} {n[2]:.9g}\n")
        for t in mesh.triangles:
            fh.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")


def load_obj(path) -> Mesh:
    verts, normals, faces = [], [], []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            try:
                if tag == "v":
                    verts.append([float(x) for x in parts[1:4]])
                elif tag == "vn":
                    normals.append([float(x) for x in parts[1:4]])
                elif tag == "f":
                    idx = [int(p.split("/")[0]) - 1 for p in parts[1:4]]
                    faces.append(idx)
            except (ValueError, IndexError) as exc:
                raise ObjParseError(line_no, str(exc)) from exc
            if tag == "f" and (min(faces[-1]) < 0 or max(faces[-1]) >= len(verts)):
                raise ObjParseError(line_no, f"vertex index out of range: {parts[1:4]}")
    verts = np.asarray(verts, dtype=np.float64).reshape(-1, 3)
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if len(normals) == len(verts):
        norms = np.asarray(normals, dtype=np.float64)
    else:
        norms = _accumulate_normals(verts, faces)
    return Mesh(vertices=verts, triangles=faces, normals=norms)


def _accumulate_normals(verts: np.ndarray, faces: np.ndarray) -> np.ndarray:
    acc = np.zeros_like(verts)
    e1 = verts[faces[:, 1]] - verts[faces[:, 0]]
    e2 = verts[faces[:, 2]] - verts[faces[:, 0]]
    fn = np.cross(e1, e2)
    for i in range(3):
        np.add.at(acc, faces[:, i], fn)
    norms = np.linalg.norm(acc, axis=1, keepdims=True)
    return np.where(norms > 1e-300, acc / np.maximum(norms, 1e-300), [0.0, 0.0, 1.0])
