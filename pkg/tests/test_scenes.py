"""Tests for analytic shapes, sphere tracing, camera rigs, and scene synthesis."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from raysdf.errors import ConfigError, InputDomainError
from raysdf.scenes import (
    AnalyticShape,
    DEFAULT_SHAPE_MIX,
    generate_scene,
    make_features,
    sample_camera_rig,
    sample_shape,
    sphere_trace,
    trace_bundle,
)


def sphere(center=(0.0, 0.0, 0.0), radius=0.6):
    return AnalyticShape("sphere", {"center": np.asarray(center, float), "radius": radius})


class TestAnalyticShapes:
    def test_sphere_sdf_is_exact_distance(self):
        s = sphere(center=(0.1, -0.2, 0.05), radius=0.5)
        rng = np.random.default_rng(0)
        x = rng.uniform(-1, 1, size=(500, 3))
        expected = np.linalg.norm(x - np.array([0.1, -0.2, 0.05]), axis=1) - 0.5
        np.testing.assert_allclose(s.sdf(x), expected, atol=1e-12)

    def test_box_sdf_known_points(self):
        b = AnalyticShape("box", {"center": np.zeros(3), "half_extents": np.array([0.5, 0.4, 0.3])})
        # on a face, outside along one axis, at the center
        assert abs(b.sdf(np.array([0.5, 0.0, 0.0]))) < 1e-12
        assert abs(b.sdf(np.array([0.8, 0.0, 0.0])) - 0.3) < 1e-12
        # inside: negative of the distance to the nearest face
        assert abs(b.sdf(np.zeros(3)) + 0.3) < 1e-12
        # outside a corner: Euclidean distance to the corner
        p = np.array([0.6, 0.5, 0.4])
        assert abs(b.sdf(p) - np.linalg.norm(p - [0.5, 0.4, 0.3])) < 1e-12

    def test_torus_sdf_known_points(self):
        t = AnalyticShape(
            "torus", {"center": np.zeros(3), "major_radius": 0.5, "minor_radius": 0.2}
        )
        # on the outer equator
        assert abs(t.sdf(np.array([0.7, 0.0, 0.0]))) < 1e-12
        # at the tube center: -minor_radius
        assert abs(t.sdf(np.array([0.5, 0.0, 0.0])) + 0.2) < 1e-12
        # at the world center: major - minor
        assert abs(t.sdf(np.zeros(3)) - 0.3) < 1e-12

    def test_union_sdf_is_min(self):
        a = {"kind": "sphere", "params": {"center": np.array([0.3, 0, 0]), "radius": 0.3}}
        b = {"kind": "box", "params": {"center": np.array([-0.3, 0, 0]), "half_extents": np.full(3, 0.25)}}
        u = AnalyticShape("union", {"first": a, "second": b})
        sa = AnalyticShape(**a).sdf
        sb = AnalyticShape(**b).sdf
        x = np.random.default_rng(1).uniform(-1, 1, size=(200, 3))
        np.testing.assert_allclose(u.sdf(x), np.minimum(sa(x), sb(x)), atol=1e-12)

    def test_normal_matches_analytic_sphere(self):
        s = sphere(radius=0.7)
        rng = np.random.default_rng(2)
        x = rng.normal(size=(100, 3))
        x = 0.9 * x / np.linalg.norm(x, axis=1, keepdims=True)
        n = s.normal(x)
        np.testing.assert_allclose(np.linalg.norm(n, axis=1), 1.0, atol=1e-6)
        np.testing.assert_allclose(n, x / np.linalg.norm(x, axis=1, keepdims=True), atol=1e-5)

    def test_round_trip_dict(self):
        s = sample_shape(np.random.default_rng(3))
        s2 = AnalyticShape.from_dict(s.to_dict())
        x = np.random.default_rng(4).uniform(-1, 1, size=(64, 3))
        np.testing.assert_array_equal(s.sdf(x), s2.sdf(x))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_sampled_shapes_stay_clear_of_the_sampling_clip(self, seed):
        # the farthest surface point of any generated shape is ~1.2 from the
        # origin, which keeps clean ray coordinates below the 1.5 clip
        shape = sample_shape(np.random.default_rng(seed))
        rng = np.random.default_rng(seed + 1)
        d = rng.normal(size=(256, 3))
        d = 1.3 * d / np.linalg.norm(d, axis=1, keepdims=True)
        assert (shape.sdf(d) > 0).all()
        # and the shape is inside the reconstruction volume [-1,1]^3
        corners = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], float)
        assert (shape.sdf(corners) > 0).all()


class TestSphereTrace:
    def test_hits_sphere_at_analytic_distance(self):
        s = sphere(radius=0.5)
        o = np.array([0.0, 0.0, -2.0])
        v = np.array([0.0, 0.0, 1.0])
        t, hit = sphere_trace(s, o, v)
        assert hit
        assert abs(t - 1.5) < 1e-4

    def test_miss_reports_no_hit(self):
        s = sphere(radius=0.3)
        t, hit = sphere_trace(s, np.array([0.0, 2.0, -2.0]), np.array([0.0, 0.0, 1.0]))
        assert not hit

    def test_batched_matches_single(self):
        s = sphere(radius=0.5)
        o = np.array([[0, 0, -2.0], [0, 2.0, -2.0]])
        v = np.array([[0, 0, 1.0], [0, 0, 1.0]])
        t, hit = sphere_trace(s, o, v)
        assert hit.tolist() == [True, False]
        assert abs(t[0] - 1.5) < 1e-4


class TestCameraRig:
    def test_rig_geometry(self):
        cams = sample_camera_rig(4, np.random.default_rng(0))
        assert len(cams) == 4
        for c in cams:
            r = np.linalg.norm(c.center)
            assert 1.8 <= r <= 2.2
            # rotation is orthonormal and looks at the origin
            np.testing.assert_allclose(c.rotation.T @ c.rotation, np.eye(3), atol=1e-12)
            z = c.rotation[:, 2]
            np.testing.assert_allclose(z, -c.center / r, atol=1e-12)

    def test_min_separation_enforced(self):
        cams = sample_camera_rig(6, np.random.default_rng(1), min_separation_deg=15.0)
        for i in range(6):
            for j in range(i + 1, 6):
                a = cams[i].center / np.linalg.norm(cams[i].center)
                b = cams[j].center / np.linalg.norm(cams[j].center)
                assert np.degrees(np.arccos(np.clip(a @ b, -1, 1))) >= 15.0 - 1e-9

    @pytest.mark.parametrize("n", [1, 7])
    def test_view_count_bounds(self, n):
        with pytest.raises(ConfigError):
            sample_camera_rig(n, np.random.default_rng(0))


class TestTraceBundle:
    def test_endpoints_lie_on_surface(self):
        shape = sample_shape(np.random.default_rng(5))
        cam = sample_camera_rig(2, np.random.default_rng(6))[0]
        bundle, t = trace_bundle(shape, cam, 64)
        assert len(bundle) == 64
        for ray in bundle.rays:
            assert abs(shape.sdf(ray.endpoint())) < 1e-5

    def test_pixels_inside_image(self):
        shape = sphere(radius=0.6)
        cam = sample_camera_rig(2, np.random.default_rng(7))[0]
        bundle, _ = trace_bundle(shape, cam, 32)
        assert (bundle.pixels >= 0).all()
        assert (bundle.pixels[:, 0] <= cam.width).all()
        assert (bundle.pixels[:, 1] <= cam.height).all()


class TestFeatures:
    def test_shape_and_padding(self):
        shape = sphere()
        cam = sample_camera_rig(2, np.random.default_rng(8))[0]
        bundle, _ = trace_bundle(shape, cam, 16)
        f16 = make_features(shape, cam, bundle.pixels, feature_dim=16)
        f24 = make_features(shape, cam, bundle.pixels, feature_dim=24)
        assert f16.shape == (16, 16)
        assert f24.shape == (16, 24)
        np.testing.assert_array_equal(f16, f24[:, :16])
        assert (f24[:, 22:] == 0).all()

    def test_miss_rays_have_zero_geometry_features(self):
        shape = sphere(radius=0.2)
        cam = sample_camera_rig(2, np.random.default_rng(9))[0]
        corner = np.array([[0.01, 0.01]])  # image corner ray misses a small sphere
        f = make_features(shape, cam, corner, feature_dim=16)
        assert (f[0, 2:6] == 0).all()  # normal slots + inverse range


class TestSampleShape:
    def test_mix_restricts_kinds(self):
        rng = np.random.default_rng(10)
        for _ in range(20):
            assert sample_shape(rng, {"torus": 1.0}).kind == "torus"

    def test_empty_mix_rejected(self):
        with pytest.raises(ConfigError):
            sample_shape(np.random.default_rng(0), {"sphere": 0.0})

    def test_default_mix_covers_all_kinds(self):
        rng = np.random.default_rng(11)
        kinds = {sample_shape(rng).kind for _ in range(200)}
        assert kinds == set(DEFAULT_SHAPE_MIX)


class TestGenerateScene:
    def test_scene_invariants(self):
        scene = generate_scene(np.random.default_rng(12), n_views=3, rays_per_image=32)
        assert len(scene.cameras) == 3
        assert len(scene.bundles) == 3
        assert scene.features.shape == (3, 32, 16)
        for i, b in enumerate(scene.bundles):
            assert b.image_index == i
            for ray in b.rays:
                assert abs(scene.shape.sdf(ray.endpoint())) < 1e-5

    def test_deterministic_given_seed(self):
        a = generate_scene(np.random.default_rng(99), n_views=2, rays_per_image=16)
        b = generate_scene(np.random.default_rng(99), n_views=2, rays_per_image=16)
        np.testing.assert_array_equal(a.features, b.features)
        np.testing.assert_array_equal(a.cameras[0].rotation, b.cameras[0].rotation)
