"""Ray representation, canonicalization, and camera recovery."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from raysdf.errors import DegenerateBundleError, DegenerateRayError, InputDomainError
from raysdf.rays import (
    Camera,
    RawRay,
    bundle_to_flat,
    camera_to_ray_bundle,
    canonicalize,
    canonicalize_rows,
    endpoints_from_rows,
    flat_to_bundle,
    ray_endpoint,
    recover_camera,
)


def random_camera(rng, radius=2.0):
    z = rng.normal(size=3)
    z /= np.linalg.norm(z)
    x = np.cross(rng.normal(size=3), z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return Camera(
        fx=32.0, fy=32.0, cx=16.0, cy=16.0, width=32.0, height=32.0,
        rotation=R, center=-radius * R[2],
    )


def grid_pixels(n=16, size=32.0):
    u = (np.arange(n) + 0.5) * size / n
    uu, vv = np.meshgrid(u, u)
    return np.stack([uu.ravel(), vv.ravel()], axis=1)


class TestCanonicalize:
    def test_normalizes_direction_and_projects_moment(self):
        ray = canonicalize(RawRay(np.array([0.0, 0.0, 2.0, 1.0, 0.0, 3.0, 4.0])))
        assert np.allclose(ray.v, [0, 0, 1])
        # moment loses its component along v and shares the 1/|v| scale
        assert np.allclose(ray.m, [0.5, 0.0, 0.0])
        assert ray.d == pytest.approx(4.0)

    def test_constraints_hold(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            ray = canonicalize(RawRay(rng.normal(size=7)))
            assert abs(np.linalg.norm(ray.v) - 1.0) < 1e-9
            assert abs(ray.v @ ray.m) < 1e-9

    def test_idempotent_bit_exact(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            first = canonicalize(RawRay(rng.normal(size=7)))
            again = canonicalize(np.r_[first.v, first.m, first.d])
            assert np.array_equal(first.v, again.v)
            assert np.array_equal(first.m, again.m)
            assert first.d == again.d

    def test_zero_direction_raises(self):
        with pytest.raises(DegenerateRayError):
            canonicalize(RawRay(np.r_[np.zeros(3), np.ones(3), 1.0]))

    def test_rows_flag_degenerates_instead_of_raising(self):
        rows = np.zeros((3, 7))
        rows[0] = [0, 0, 1, 1, 0, 0, 2.0]
        canon, degen = canonicalize_rows(rows)
        assert list(degen) == [False, True, True]
        assert np.isfinite(canon).all()

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_scale_invariance(self, seed):
        rng = np.random.default_rng(seed)
        v, m = rng.normal(size=3), rng.normal(size=3)
        s = float(rng.uniform(0.5, 10.0))
        a = canonicalize(np.r_[v, m, 1.0])
        b = canonicalize(np.r_[s * v, s * m, 1.0])
        assert np.allclose(a.v, b.v, atol=1e-12)
        assert np.allclose(a.m, b.m, atol=1e-12)


class TestEndpoints:
    def test_endpoint_formula(self):
        ray = canonicalize(np.array([0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 3.0]))
        # base point v x m = (-1, 0, 0); endpoint = base + d v
        assert np.allclose(ray_endpoint(ray), [-1.0, 0.0, 3.0])

    def test_rows_match_single(self):
        rng = np.random.default_rng(5)
        rows, _ = canonicalize_rows(rng.normal(size=(20, 7)))
        pts = endpoints_from_rows(rows)
        for i, row in enumerate(rows):
            ray = canonicalize(row)
            assert np.allclose(pts[i], ray_endpoint(ray), atol=1e-12)


class TestCameraBundle:
    def test_all_rays_pass_through_center(self):
        rng = np.random.default_rng(0)
        cam = random_camera(rng)
        depths = rng.uniform(1.0, 3.0, size=256)
        bundle = camera_to_ray_bundle(cam, grid_pixels(), depths)
        flat = bundle_to_flat(bundle)
        # moment of a line through c: m = c x v for every ray
        expected = np.cross(np.broadcast_to(cam.center, (256, 3)), flat[:, :3])
        assert np.allclose(flat[:, 3:6], expected, atol=1e-9)

    def test_depth_offset_matches_endpoint(self):
        rng = np.random.default_rng(1)
        cam = random_camera(rng)
        depths = rng.uniform(1.0, 3.0, size=256)
        bundle = camera_to_ray_bundle(cam, grid_pixels(), depths)
        pts = endpoints_from_rows(bundle_to_flat(bundle))
        v = bundle_to_flat(bundle)[:, :3]
        assert np.allclose(pts, cam.center + depths[:, None] * v, atol=1e-9)

    def test_pixel_bounds_checked(self):
        rng = np.random.default_rng(2)
        cam = random_camera(rng)
        with pytest.raises(InputDomainError):
            camera_to_ray_bundle(cam, np.array([[40.0, 1.0]]), np.array([1.0]))

    def test_bundle_needs_six_rays(self):
        rng = np.random.default_rng(2)
        cam = random_camera(rng)
        px = grid_pixels()[:5]
        with pytest.raises(InputDomainError):
            camera_to_ray_bundle(cam, px, np.ones(5))

    def test_flat_round_trip(self):
        rng = np.random.default_rng(4)
        cam = random_camera(rng)
        bundle = camera_to_ray_bundle(cam, grid_pixels(), rng.uniform(1, 3, 256))
        again = flat_to_bundle(bundle_to_flat(bundle), bundle.pixels)
        assert np.array_equal(bundle_to_flat(bundle), bundle_to_flat(again))


class TestRecoverCamera:
    def test_round_trip_exact(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            cam = random_camera(rng, radius=float(rng.uniform(1.8, 2.2)))
            bundle = camera_to_ray_bundle(cam, grid_pixels(), rng.uniform(1, 3, 256))
            rec = recover_camera(bundle, cam)
            assert np.allclose(rec.center, cam.center, atol=1e-10)
            # stable small-angle metric: 2 asin(|dR|_F / (2 sqrt 2))
            fro = np.linalg.norm(rec.rotation - cam.rotation)
            angle = np.degrees(2 * np.arcsin(min(1.0, fro / (2 * np.sqrt(2)))))
            assert angle < 1e-6

    def test_parallel_rays_degenerate(self):
        rng = np.random.default_rng(8)
        cam = random_camera(rng)
        v = np.array([0.0, 0.0, 1.0])
        rows = np.zeros((8, 7))
        for i in range(8):
            p = rng.normal(size=3)
            rows[i, :3] = v
            rows[i, 3:6] = np.cross(p, v)
            rows[i, 6] = 1.0
        canon, _ = canonicalize_rows(rows)
        bundle = flat_to_bundle(canon, grid_pixels()[:8])
        with pytest.raises(DegenerateBundleError):
            recover_camera(bundle, cam)

    def test_noise_robustness_is_least_squares(self):
        rng = np.random.default_rng(9)
        cam = random_camera(rng)
        bundle = camera_to_ray_bundle(cam, grid_pixels(), rng.uniform(1, 3, 256))
        flat = bundle_to_flat(bundle)
        flat[:, :6] += rng.normal(0, 1e-4, size=(256, 6))
        noisy, _ = canonicalize_rows(flat)
        rec = recover_camera(flat_to_bundle(noisy, bundle.pixels), cam)
        assert np.linalg.norm(rec.center - cam.center) < 1e-2
        assert np.linalg.norm(rec.rotation - cam.rotation) < 1e-2


class TestCameraValidation:
    def test_rejects_non_rotation(self):
        with pytest.raises(InputDomainError):
            Camera(fx=32, fy=32, cx=16, cy=16, width=32, height=32,
                   rotation=np.eye(3) * 2.0, center=np.zeros(3))

    def test_rejects_reflection(self):
        R = np.diag([1.0, 1.0, -1.0])
        with pytest.raises(InputDomainError):
            Camera(fx=32, fy=32, cx=16, cy=16, width=32, height=32,
                   rotation=R, center=np.zeros(3))
