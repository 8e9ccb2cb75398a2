"""DDPM over flattened ray bundles, conditioned on the scene's SDF.

The forward process noises the raw 7-vectors of every ray in a scene;
the denoiser predicts the added noise per ray from the noisy ray, a
sinusoidal time embedding, the SDF value at the (canonicalized) ray's
current endpoint, and the per-ray image feature. A mean-pooled context
over all rays of the scene lets information flow across rays and images.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateBundleError, InputDomainError
from .nn import Mlp
from .rays import canonicalize_rows, endpoints_from_rows, flat_to_bundle

TIME_EMBED_DIM = 8


@dataclass(frozen=True)
class DiffusionSchedule:
    """Variance schedule; index t runs 1..T, alpha_bar(0) = 1."""

    betas: np.ndarray  # (T,) for t = 1..T
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    def alpha_bar(self, t: int) -> float:
        """Cumulative product, with the t=0 convention of exactly 1."""
        if not 0 <= t <= self.T:
            raise InputDomainError(f"t={t} outside [0, {self.T}]")
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def beta(self, t: int) -> float:
        if not 1 <= t <= self.T:
            raise InputDomainError(f"t={t} outside [1, {self.T}]")
        return float(self.betas[t - 1])


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> DiffusionSchedule:
    """Linear beta schedule inclusive of both endpoints."""
    if T < 1:
        raise InputDomainError("T must be >= 1")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise InputDomainError("need 0 < beta_start <= beta_end < 1")
    betas = np.linspace(beta_start, beta_end, T)
    alphas = 1.0 - betas
    return DiffusionSchedule(betas=betas, alphas=alphas, alpha_bars=np.cumprod(alphas))


def forward_noise(R0: np.ndarray, t: int, eps: np.ndarray, schedule: DiffusionSchedule) -> np.ndarray:
    """Closed-form marginal: sqrt(abar_t) R0 + sqrt(1 - abar_t) eps."""
    R0 = np.asarray(R0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != R0.shape:
        raise InputDomainError("eps shape must match R0")
    ab = schedule.alpha_bar(t)
    return np.sqrt(ab) * R0 + np.sqrt(1.0 - ab) * eps


def time_embedding(t: int, T: int, dim: int = TIME_EMBED_DIM) -> np.ndarray:
    """Sinusoidal embedding of the normalized timestep."""
    half = dim // 2
    freqs = np.exp(np.linspace(0.0, np.log(1000.0), half))
    x = t / T
    return np.concatenate([np.sin(freqs * x), np.cos(freqs * x)])


@dataclass
class Conditioning:
    """Per-ray conditioning: SDF at current endpoints + image features."""

    sdf_values: np.ndarray  # (K,)
    features: np.ndarray  # (K, F)
    degenerate: np.ndarray  # (K,) bool


def condition(tp, Rt: np.ndarray, features: np.ndarray, disable_sdf: bool = False) -> Conditioning:
    """Canonicalize noisy rows, trace endpoints, query the SDF there.

    Degenerate rows (unnormalizable direction) are flagged and queried at
    the origin. With ``disable_sdf`` the SDF slot is hard zero (the
    'w/o SDF' ablation).
    """
    Rt = np.asarray(Rt, dtype=np.float64)
    features = np.asarray(features, dtype=np.float64)
    if len(features) != len(Rt):
        raise InputDomainError("features must align with rays")
    canon, degenerate = canonicalize_rows(Rt)
    pts = endpoints_from_rows(canon)
    pts[degenerate] = 0.0
    if disable_sdf or tp is None:
        s = np.zeros(len(Rt))
    else:
        s, _ = tp.query(np.clip(pts, -1.0, 1.0))
    return Conditioning(sdf_values=np.asarray(s), features=features, degenerate=degenerate)


class DenoiserNet:
    """Per-ray trunk -> pooled context -> per-ray head.

    Each ray's head input concatenates its own trunk state, the mean
    trunk state of the rays from the same image, and the mean over the
    whole scene.  The per-image pool lets a ray distinguish its own
    image's running pose estimate from the other images', which is what
    makes cross-view registration representable; the scene pool carries
    the shared-surface signal.
    """

    def __init__(self, feature_dim: int = 16, hidden: int = 128, rng=None,
                 head_hidden=None):
        rng = rng or np.random.default_rng(0)
        self.feature_dim = int(feature_dim)
        self.hidden = int(hidden)
        self.head_hidden = list(head_hidden) if head_hidden else [hidden]
        in_width = 7 + TIME_EMBED_DIM + 1 + feature_dim
        self.trunk = Mlp([in_width, hidden, hidden], rng=rng)
        self.head = Mlp([3 * hidden] + self.head_hidden + [7], rng=rng)
        # zero-init the output layer: the untrained net predicts zero
        # noise, making the initial training loss E|eps|^2 = 1
        self.head.weights[-1][:] = 0.0

    @property
    def params(self):
        return self.trunk.params + self.head.params

    def set_params(self, params):
        n = len(self.trunk.params)
        self.trunk.set_params(params[:n])
        self.head.set_params(params[n:])

    def forward(self, Rt: np.ndarray, t: int, T: int, cond: Conditioning,
                n_images: int = 1):
        """Noise prediction for (K, 7) noisy rays; returns (eps_hat, cache).

        Rays must be stacked image-contiguously, ``K = n_images * M``.
        """
        Rt = np.asarray(Rt, dtype=np.float64)
        K = len(Rt)
        if K % n_images:
            raise InputDomainError("rays must split evenly across images")
        M = K // n_images
        emb = np.broadcast_to(time_embedding(t, T), (K, TIME_EMBED_DIM))
        inp = np.concatenate(
            [Rt, emb, cond.sdf_values[:, None], cond.features], axis=1
        )
        h, trunk_cache = self.trunk.forward(inp)
        H = self.hidden
        img_ctx = h.reshape(n_images, M, H).mean(axis=1)  # (N, H)
        img_ctx_rows = np.repeat(img_ctx, M, axis=0)
        scene_ctx = h.mean(axis=0)
        head_in = np.concatenate(
            [h, img_ctx_rows, np.broadcast_to(scene_ctx, h.shape)], axis=1
        )
        eps_hat, head_cache = self.head.forward(head_in)
        return eps_hat, (trunk_cache, head_cache, n_images, M)

    def backward(self, cache, grad_eps: np.ndarray):
        """Parameter gradients (aligned with ``params``)."""
        trunk_cache, head_cache, n_images, M = cache
        K = n_images * M
        head_grads, g_head_in = self.head.backward(head_cache, grad_eps)
        H = self.hidden
        g_img = g_head_in[:, H:2 * H].reshape(n_images, M, H).sum(axis=1) / M
        g_h = (
            g_head_in[:, :H]
            + np.repeat(g_img, M, axis=0)
            + g_head_in[:, 2 * H:].sum(axis=0) / K
        )
        trunk_grads, _ = self.trunk.backward(trunk_cache, g_h)
        return trunk_grads + head_grads


class OracleDenoiser:
    """Exact noise 'prediction' from known clean rays; test instrument."""

    def __init__(self, R0: np.ndarray, schedule: DiffusionSchedule):
        self.R0 = np.asarray(R0, dtype=np.float64)
        self.schedule = schedule

    def forward(self, Rt, t, T, cond, n_images: int = 1):
        ab = self.schedule.alpha_bar(t)
        eps = (Rt - np.sqrt(ab) * self.R0) / np.sqrt(1.0 - ab)
        return eps, None


def diffusion_loss(eps_hat: np.ndarray, eps: np.ndarray):
    """Mean squared error over all entries; returns (loss, grad)."""
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps_hat.shape != eps.shape:
        raise InputDomainError("shape mismatch")
    diff = eps_hat - eps
    loss = float(np.mean(diff**2))
    return loss, 2.0 * diff / diff.size


def reverse_step(
    Rt: np.ndarray,
    eps_hat: np.ndarray,
    t: int,
    schedule: DiffusionSchedule,
    rng=None,
    deterministic: bool = False,
    clip_x0: float = None,
) -> np.ndarray:
    """One reverse-process step from t to t-1.

    Stochastic mode is the DDPM ancestral update (no noise at t=1);
    deterministic mode is the zero-variance DDIM update. ``clip_x0``
    clamps the implied clean-signal estimate to [-clip_x0, clip_x0]
    before stepping; clean ray coordinates are bounded by the scene
    volume (|coord| <= ~1.2), so a clip at 1.5 never binds on-manifold
    and only suppresses the trajectory blow-up a learned predictor's
    high-noise errors cause.
    """
    if not 1 <= t <= schedule.T:
        raise InputDomainError(f"t={t} outside [1, {schedule.T}]")
    Rt = np.asarray(Rt, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    ab_t = schedule.alpha_bar(t)
    ab_prev = schedule.alpha_bar(t - 1)
    if clip_x0 is not None:
        x0_hat = (Rt - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
        x0_hat = np.clip(x0_hat, -clip_x0, clip_x0)
        eps_hat = (Rt - np.sqrt(ab_t) * x0_hat) / np.sqrt(1.0 - ab_t)
    if deterministic:
        x0_hat = (Rt - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
        return np.sqrt(ab_prev) * x0_hat + np.sqrt(1.0 - ab_prev) * eps_hat
    beta_t = schedule.beta(t)
    alpha_t = 1.0 - beta_t
    mean = (Rt - beta_t / np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(alpha_t)
    if t == 1:
        return mean
    rng = rng or np.random.default_rng(0)
    beta_tilde = beta_t * (1.0 - ab_prev) / (1.0 - ab_t)
    return mean + np.sqrt(beta_tilde) * rng.standard_normal(Rt.shape)


def sample_scene_rays(
    net,
    tp,
    features: np.ndarray,
    schedule: DiffusionSchedule,
    rng,
    deterministic: bool = True,
    disable_sdf: bool = False,
    step_callback=None,
    n_images: int = 1,
    clip_x0: float = 1.5,
) -> np.ndarray:
    """Reverse-diffuse all rays of one scene jointly.

    ``features`` is (K, F) over the scene's rays (all images stacked,
    image-contiguously). ``step_callback(t, endpoints, degenerate_mask)``
    fires after each reverse step, enabling interleaved surface
    refinement. Returns the final canonical (K, 7) rows.
    """
    K = len(features)
    Rt = rng.standard_normal((K, 7))
    for t in range(schedule.T, 0, -1):
        cond = condition(tp, Rt, features, disable_sdf=disable_sdf)
        eps_hat, _ = net.forward(Rt, t, schedule.T, cond, n_images=n_images)
        Rt = reverse_step(
            Rt, eps_hat, t, schedule, rng,
            deterministic=deterministic, clip_x0=clip_x0,
        )
        if step_callback is not None:
            canon, degen = canonicalize_rows(Rt)
            step_callback(t - 1, endpoints_from_rows(canon), degen)
    canon, degenerate = canonicalize_rows(Rt)
    if degenerate.mean() > 0.5:
        raise DegenerateBundleError("more than half of the sampled rays are degenerate")
    return canon


def sample_bundles(
    net,
    tp,
    features: np.ndarray,
    pixels: np.ndarray,
    schedule: DiffusionSchedule,
    rng,
    deterministic: bool = True,
    disable_sdf: bool = False,
    step_callback=None,
    clip_x0: float = 1.5,
) -> list:
    """Sample one bundle per image; (N, M, F) features, (N, M, 2) pixels."""
    N, M, F = features.shape
    rows = sample_scene_rays(
        net,
        tp,
        features.reshape(N * M, F),
        schedule,
        rng,
        deterministic=deterministic,
        disable_sdf=disable_sdf,
        step_callback=step_callback,
        n_images=N,
        clip_x0=clip_x0,
    )
    return [
        flat_to_bundle(rows[i * M : (i + 1) * M], pixels[i], image_index=i)
        for i in range(N)
    ]


def train_denoiser(
    dataset,
    schedule: DiffusionSchedule,
    rng,
    steps: int = 20000,
    lr: float = 1e-3,
    hidden: int = 128,
    disable_sdf: bool = False,
    coarse_frac: float = 0.625,
    fine_lr_scale: float = 0.1,
    net: "DenoiserNet" = None,
    head_hidden=None,
):
    """L2 noise-prediction training over a scene dataset.

    ``dataset`` is a sequence of (R0 rows (K,7), features (K,F),
    triplane, n_images) entries with rays stacked image-contiguously.
    One scene per step; the learning rate drops by ``fine_lr_scale``
    after the coarse fraction of steps. Returns (net, per-step losses).
    """
    from .errors import DivergenceError
    from .nn import AdamState, adam_step

    first_feats = dataset[0][1]
    if net is None:
        net = DenoiserNet(
            feature_dim=first_feats.shape[1], hidden=hidden, rng=rng,
            head_hidden=head_hidden,
        )
    state = AdamState.for_params(net.params, lr=lr)
    losses = np.empty(steps)
    boundary = int(coarse_frac * steps)
    for step in range(steps):
        R0, feats, tp, n_images = dataset[int(rng.integers(len(dataset)))]
        t = int(rng.integers(1, schedule.T + 1))
        eps = rng.standard_normal(R0.shape)
        Rt = forward_noise(R0, t, eps, schedule)
        cond = condition(tp, Rt, feats, disable_sdf=disable_sdf)
        eps_hat, cache = net.forward(Rt, t, schedule.T, cond, n_images=n_images)
        loss, grad = diffusion_loss(eps_hat, eps)
        if not np.isfinite(loss):
            raise DivergenceError(step)
        losses[step] = loss
        grads = net.backward(cache, grad)
        adam_step(state, net.params, grads, lr=lr if step < boundary else lr * fine_lr_scale)
    return net, losses
