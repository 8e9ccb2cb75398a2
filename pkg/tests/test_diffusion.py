"""Tests for the ray-bundle diffusion model: schedule, noising, denoiser
network symmetries, reverse sampling, and training."""

import numpy as np
import pytest

from raysdf.diffusion import (
    Conditioning,
    DenoiserNet,
    OracleDenoiser,
    condition,
    diffusion_loss,
    forward_noise,
    make_schedule,
    reverse_step,
    sample_scene_rays,
    time_embedding,
    train_denoiser,
)
from raysdf.errors import InputDomainError
from raysdf.rays import canonicalize_rows


class TestSchedule:
    def test_alpha_bar_is_cumulative_product(self):
        s = make_schedule(T=10, beta_start=1e-3, beta_end=0.1)
        assert s.T == 10
        assert s.alpha_bar(0) == 1.0
        prod = 1.0
        for t in range(1, 11):
            prod *= 1.0 - s.beta(t)
            assert abs(s.alpha_bar(t) - prod) < 1e-15
        assert s.beta(1) == 1e-3
        assert s.beta(10) == 0.1

    def test_terminal_noise_level_is_tiny(self):
        # the short schedule must still destroy the signal by t=T
        s = make_schedule(T=100, beta_start=1e-4, beta_end=0.2)
        assert s.alpha_bar(100) < 1e-4

    @pytest.mark.parametrize("kwargs", [
        {"T": 0}, {"beta_start": 0.0}, {"beta_start": 0.3, "beta_end": 0.2},
        {"beta_end": 1.0},
    ])
    def test_invalid_schedules_rejected(self, kwargs):
        with pytest.raises(InputDomainError):
            make_schedule(**{"T": 10, "beta_start": 1e-4, "beta_end": 0.02, **kwargs})

    def test_time_bounds_checked(self):
        s = make_schedule(T=5)
        with pytest.raises(InputDomainError):
            s.alpha_bar(6)
        with pytest.raises(InputDomainError):
            s.beta(0)


class TestForwardNoise:
    def test_closed_form_values(self):
        s = make_schedule(T=4, beta_start=0.1, beta_end=0.4)
        R0 = np.ones((3, 7))
        eps = np.full((3, 7), 2.0)
        ab = s.alpha_bar(2)
        np.testing.assert_allclose(
            forward_noise(R0, 2, eps, s),
            np.sqrt(ab) + 2 * np.sqrt(1 - ab),
            atol=1e-15,
        )

    def test_t_zero_is_identity(self):
        s = make_schedule(T=4)
        R0 = np.random.default_rng(0).normal(size=(5, 7))
        np.testing.assert_array_equal(forward_noise(R0, 0, np.zeros_like(R0), s), R0)

    def test_shape_mismatch_rejected(self):
        s = make_schedule(T=4)
        with pytest.raises(InputDomainError):
            forward_noise(np.zeros((2, 7)), 1, np.zeros((3, 7)), s)


class TestTimeEmbedding:
    def test_shape_and_determinism(self):
        e = time_embedding(3, 10)
        assert e.shape == (8,)
        np.testing.assert_array_equal(e, time_embedding(3, 10))
        assert not np.array_equal(e, time_embedding(4, 10))


class TestConditioning:
    def test_disable_sdf_zeroes_the_sdf_slot(self):
        rng = np.random.default_rng(1)
        Rt = rng.normal(size=(6, 7))
        feats = rng.normal(size=(6, 4))
        c = condition(None, Rt, feats, disable_sdf=True)
        assert (c.sdf_values == 0).all()
        np.testing.assert_array_equal(c.features, feats)

    def test_degenerate_rows_flagged(self):
        Rt = np.zeros((2, 7))
        Rt[1] = np.random.default_rng(2).normal(size=7)
        c = condition(None, Rt, np.zeros((2, 3)), disable_sdf=True)
        assert c.degenerate.tolist() == [True, False]

    def test_feature_alignment_checked(self):
        with pytest.raises(InputDomainError):
            condition(None, np.zeros((2, 7)), np.zeros((3, 4)), disable_sdf=True)


class TestDenoiserNet:
    def _inputs(self, n_images=2, M=5, F=6, seed=3):
        rng = np.random.default_rng(seed)
        K = n_images * M
        Rt = rng.normal(size=(K, 7))
        cond = Conditioning(rng.normal(size=K), rng.normal(size=(K, F)), np.zeros(K, bool))
        return Rt, cond

    def _net(self, F=6, seed=4):
        net = DenoiserNet(feature_dim=F, hidden=16, rng=np.random.default_rng(seed))
        # break the zero-init of the output layer so symmetries are non-trivial
        for W in net.head.weights:
            W += np.random.default_rng(seed + 1).normal(0, 0.2, W.shape)
        return net

    def test_untrained_net_predicts_zero_noise(self):
        net = DenoiserNet(feature_dim=6, hidden=16, rng=np.random.default_rng(5))
        Rt, cond = self._inputs()
        eps_hat, _ = net.forward(Rt, 3, 10, cond, n_images=2)
        assert (eps_hat == 0).all()

    def test_permutation_equivariance_within_image(self):
        net = self._net()
        Rt, cond = self._inputs()
        eps, _ = net.forward(Rt, 3, 10, cond, n_images=2)
        perm = np.concatenate([np.random.default_rng(6).permutation(5), 5 + np.arange(5)])
        cond_p = Conditioning(cond.sdf_values[perm], cond.features[perm], cond.degenerate[perm])
        eps_p, _ = net.forward(Rt[perm], 3, 10, cond_p, n_images=2)
        np.testing.assert_allclose(eps_p, eps[perm], atol=1e-12)

    def test_exchangeability_over_images(self):
        net = self._net()
        Rt, cond = self._inputs(n_images=3, M=4)
        eps, _ = net.forward(Rt, 2, 10, cond, n_images=3)
        # swap image blocks 0 and 2
        perm = np.concatenate([8 + np.arange(4), 4 + np.arange(4), np.arange(4)])
        cond_p = Conditioning(cond.sdf_values[perm], cond.features[perm], cond.degenerate[perm])
        eps_p, _ = net.forward(Rt[perm], 2, 10, cond_p, n_images=3)
        np.testing.assert_allclose(eps_p, eps[perm], atol=1e-12)

    def test_image_grouping_changes_output(self):
        # the per-image pooled context must actually depend on the grouping
        net = self._net()
        Rt, cond = self._inputs(n_images=2, M=5)
        a, _ = net.forward(Rt, 3, 10, cond, n_images=2)
        b, _ = net.forward(Rt, 3, 10, cond, n_images=1)
        assert np.abs(a - b).max() > 1e-8

    def test_ray_count_must_split_evenly(self):
        net = self._net()
        Rt, cond = self._inputs(n_images=1, M=7)
        with pytest.raises(InputDomainError):
            net.forward(Rt, 3, 10, cond, n_images=3)

    def test_custom_head_widths(self):
        net = DenoiserNet(feature_dim=6, hidden=16, head_hidden=[32, 32],
                          rng=np.random.default_rng(7))
        Rt, cond = self._inputs()
        eps_hat, _ = net.forward(Rt, 3, 10, cond, n_images=2)
        assert eps_hat.shape == Rt.shape
        assert [w.shape[0] for w in net.head.weights] == [48, 32, 32]


class TestReverseStep:
    def test_oracle_deterministic_reverse_recovers_clean_rays(self):
        s = make_schedule(T=50, beta_start=1e-4, beta_end=0.2)
        rng = np.random.default_rng(8)
        R0 = rng.uniform(-1, 1, size=(10, 7))
        oracle = OracleDenoiser(R0, s)
        Rt = rng.normal(size=(10, 7))
        for t in range(50, 0, -1):
            eps_hat, _ = oracle.forward(Rt, t, 50, None)
            Rt = reverse_step(Rt, eps_hat, t, s, deterministic=True)
        np.testing.assert_allclose(Rt, R0, atol=1e-9)

    def test_oracle_stochastic_reverse_recovers_clean_rays(self):
        s = make_schedule(T=50, beta_start=1e-4, beta_end=0.2)
        rng = np.random.default_rng(9)
        R0 = rng.uniform(-1, 1, size=(10, 7))
        oracle = OracleDenoiser(R0, s)
        Rt = rng.normal(size=(10, 7))
        for t in range(50, 0, -1):
            eps_hat, _ = oracle.forward(Rt, t, 50, None)
            Rt = reverse_step(Rt, eps_hat, t, s, rng, deterministic=False)
        np.testing.assert_allclose(Rt, R0, atol=1e-9)

    def test_clean_estimate_clipping_is_noop_on_manifold(self):
        # valid ray coordinates lie in [-1, 1]; a clip at 1.5 must not change
        # the oracle's trajectory
        s = make_schedule(T=20, beta_start=1e-4, beta_end=0.2)
        rng = np.random.default_rng(10)
        R0 = rng.uniform(-1, 1, size=(4, 7))
        oracle = OracleDenoiser(R0, s)
        Rt = rng.normal(size=(4, 7))
        eps_hat, _ = oracle.forward(Rt, 20, 20, None)
        a = reverse_step(Rt, eps_hat, 20, s, deterministic=True)
        b = reverse_step(Rt, eps_hat, 20, s, deterministic=True, clip_x0=1.5)
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_clipping_bounds_wild_estimates(self):
        s = make_schedule(T=20, beta_start=1e-4, beta_end=0.2)
        Rt = np.full((2, 7), 3.0)
        eps_hat = np.zeros((2, 7))  # implies x0_hat = Rt / sqrt(abar) >> 1
        out = reverse_step(Rt, eps_hat, 20, s, deterministic=True, clip_x0=1.5)
        ab_prev = s.alpha_bar(19)
        implied_x0 = (out - np.sqrt(1 - ab_prev) * (Rt - np.sqrt(s.alpha_bar(20)) * 1.5)
                      / np.sqrt(1 - s.alpha_bar(20))) / np.sqrt(ab_prev)
        np.testing.assert_allclose(implied_x0, 1.5, atol=1e-12)

    def test_time_bounds_checked(self):
        s = make_schedule(T=5)
        with pytest.raises(InputDomainError):
            reverse_step(np.zeros((1, 7)), np.zeros((1, 7)), 6, s)


class TestSampling:
    def test_oracle_sampling_returns_canonical_rows(self):
        from raysdf.scenes import generate_scene

        scene = generate_scene(np.random.default_rng(11), n_views=2, rays_per_image=8)
        from raysdf.rays import bundle_to_flat

        R0 = np.concatenate([bundle_to_flat(b) for b in scene.bundles])
        s = make_schedule(T=50, beta_start=1e-4, beta_end=0.2)
        oracle = OracleDenoiser(R0, s)
        rows = sample_scene_rays(
            oracle, None, scene.features.reshape(16, -1), s,
            np.random.default_rng(12), deterministic=True, disable_sdf=True,
            n_images=2,
        )
        canon, degen = canonicalize_rows(R0)
        assert not degen.any()
        np.testing.assert_allclose(rows, canon, atol=1e-6)

    def test_step_callback_fires_every_step(self):
        s = make_schedule(T=7, beta_start=1e-4, beta_end=0.2)
        R0 = np.random.default_rng(13).uniform(-1, 1, size=(4, 7))
        seen = []
        sample_scene_rays(
            OracleDenoiser(R0, s), None, np.zeros((4, 3)), s,
            np.random.default_rng(14), disable_sdf=True,
            step_callback=lambda t, pts, degen: seen.append((t, pts.shape)),
        )
        assert [t for t, _ in seen] == list(range(6, -1, -1))
        assert all(shape == (4, 3) for _, shape in seen)


class TestLossAndTraining:
    def test_loss_value_and_gradient(self):
        rng = np.random.default_rng(15)
        a = rng.normal(size=(3, 7))
        b = rng.normal(size=(3, 7))
        loss, grad = diffusion_loss(a, b)
        assert abs(loss - np.mean((a - b) ** 2)) < 1e-12
        np.testing.assert_allclose(grad, 2 * (a - b) / a.size, atol=1e-15)

    def test_training_reduces_loss_on_tiny_problem(self):
        rng = np.random.default_rng(16)
        R0 = rng.uniform(-1, 1, size=(8, 7))
        feats = rng.normal(size=(8, 5))
        s = make_schedule(T=10, beta_start=1e-4, beta_end=0.2)
        net, losses = train_denoiser(
            [(R0, feats, None, 2)], s, np.random.default_rng(17),
            steps=400, lr=3e-3, hidden=16, disable_sdf=True,
        )
        # untrained net starts at E|eps|^2 = 1
        assert np.median(losses[:20]) > 0.5
        assert np.median(losses[-50:]) < 0.5 * np.median(losses[:50])
