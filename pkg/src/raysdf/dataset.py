"""Dataset serialization: a manifest plus per-scene records on disk.

Layout::

    <root>/manifest.yaml          config echo, seeds, scene list, checksums
    <root>/scene_0000/shape.json
    <root>/scene_0000/cameras.json
    <root>/scene_0000/pixels.arr    (N, M, 2)
    <root>/scene_0000/bundles.arr   (N, M, 7) canonical ray rows
    <root>/scene_0000/features.arr  (N, M, F)

Array files use the :mod:`raysdf.arrayio` container; the manifest stores
a sha256 per array file so corruption is detected at load time.  Saving
a loaded dataset reproduces the files byte for byte.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from . import scenes as _scenes
from .arrayio import load_array, save_array
from .errors import ConfigError, InputDomainError
from .rays import Camera, bundle_to_flat, flat_to_bundle
from .scenes import AnalyticShape, Scene

_ARRAY_FILES = ("pixels.arr", "bundles.arr", "features.arr")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _camera_dict(cam: Camera) -> dict:
    return {
        "rotation": [float(x) for x in np.asarray(cam.rotation).reshape(9)],
        "center": [float(x) for x in cam.center],
        "intrinsics": [float(cam.fx), float(cam.fy), float(cam.cx), float(cam.cy)],
        "width": float(cam.width),
        "height": float(cam.height),
    }


def _camera_from_dict(d: dict) -> Camera:
    fx, fy, cx, cy = d["intrinsics"]
    return Camera(
        fx=fx,
        fy=fy,
        cx=cx,
        cy=cy,
        width=d["width"],
        height=d["height"],
        rotation=np.array(d["rotation"], dtype=np.float64).reshape(3, 3),
        center=np.array(d["center"], dtype=np.float64),
    )


def save_scene(scene: Scene, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "shape.json").write_text(
        json.dumps(scene.shape.to_dict(), sort_keys=True, indent=1) + "\n"
    )
    (directory / "cameras.json").write_text(
        json.dumps([_camera_dict(c) for c in scene.cameras], indent=1) + "\n"
    )
    pixels = np.stack([b.pixels for b in scene.bundles])
    rows = np.stack([bundle_to_flat(b) for b in scene.bundles])
    save_array(directory / "pixels.arr", pixels)
    save_array(directory / "bundles.arr", rows)
    save_array(directory / "features.arr", scene.features)


def load_scene(directory) -> Scene:
    directory = Path(directory)
    shape = AnalyticShape.from_dict(json.loads((directory / "shape.json").read_text()))
    cameras = [
        _camera_from_dict(d)
        for d in json.loads((directory / "cameras.json").read_text())
    ]
    pixels = load_array(directory / "pixels.arr")
    rows = load_array(directory / "bundles.arr")
    features = load_array(directory / "features.arr")
    bundles = [
        flat_to_bundle(rows[i], pixels[i], image_index=i) for i in range(len(cameras))
    ]
    return Scene(shape=shape, cameras=cameras, bundles=bundles, features=features)


@dataclass
class DatasetOnDisk:
    """Handle over a serialized dataset directory."""

    root: Path
    manifest: dict

    @property
    def scene_names(self):
        return list(self.manifest["scenes"])

    def __len__(self) -> int:
        return len(self.manifest["scenes"])

    def load_scene(self, name_or_index) -> Scene:
        name = (
            self.manifest["scenes"][name_or_index]
            if isinstance(name_or_index, int)
            else name_or_index
        )
        return load_scene(self.root / name)


def build_dataset(
    out_dir,
    n_scenes: int,
    rng_seed: int,
    n_views=None,
    rays_per_image: int = 256,
    feature_dim: int = 16,
    shape_mix=None,
    config_echo: dict | None = None,
) -> DatasetOnDisk:
    """Generate and serialize ``n_scenes`` scenes.

    ``n_views`` may be an int or None (uniformly 2-6 per scene). Each
    scene derives its own rng from ``[rng_seed, index]``, so the dataset
    is a pure function of (config, seed) and individual scenes can be
    regenerated independently.
    """
    if n_scenes < 1:
        raise ConfigError("n_scenes must be positive")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = []
    for i in range(n_scenes):
        rng = np.random.default_rng([rng_seed, i])
        nv = int(n_views) if n_views else int(rng.integers(2, 7))
        scene = _scenes.generate_scene(
            rng, nv, rays_per_image, feature_dim=feature_dim, shape_mix=shape_mix
        )
        _audit_scene(scene)
        name = f"scene_{i:04d}"
        save_scene(scene, out_dir / name)
        names.append(name)
    manifest = {
        "config": dict(config_echo or {}),
        "seed": int(rng_seed),
        "n_scenes": int(n_scenes),
        "rays_per_image": int(rays_per_image),
        "feature_dim": int(feature_dim),
        "scenes": names,
        "checksums": {},
    }
    for name in names:
        for fname in _ARRAY_FILES:
            manifest["checksums"][f"{name}/{fname}"] = _sha256(out_dir / name / fname)
    (out_dir / "manifest.yaml").write_text(
        yaml.safe_dump(manifest, sort_keys=True, default_flow_style=False)
    )
    return DatasetOnDisk(root=out_dir, manifest=manifest)


def _audit_scene(scene: Scene, tol: float = 1e-5) -> None:
    for b in scene.bundles:
        rows = bundle_to_flat(b)
        v, m = rows[:, :3], rows[:, 3:6]
        if np.abs(np.linalg.norm(v, axis=1) - 1.0).max() > 1e-9:
            raise InputDomainError("stored bundle has non-unit directions")
        if np.abs(np.einsum("ij,ij->i", v, m)).max() > 1e-9:
            raise InputDomainError("stored bundle violates the moment constraint")
        pts = np.cross(v, m) + rows[:, 6:7] * v
        if np.abs(scene.shape.sdf(pts)).max() > tol:
            raise InputDomainError("stored bundle endpoint off the surface")


def open_dataset(root) -> DatasetOnDisk:
    """Open an existing dataset, verifying array checksums."""
    root = Path(root)
    manifest_path = root / "manifest.yaml"
    if not manifest_path.exists():
        raise InputDomainError(f"{root}: no manifest.yaml")
    manifest = yaml.safe_load(manifest_path.read_text())
    for rel, digest in manifest.get("checksums", {}).items():
        path = root / rel
        if not path.exists():
            raise InputDomainError(f"{root}: missing array file {rel}")
        if _sha256(path) != digest:
            raise InputDomainError(f"{root}: checksum mismatch for {rel}")
    return DatasetOnDisk(root=root, manifest=manifest)
