"""Triplane signed distance field.

A point in [-1,1]^3 is decoded by bilinearly sampling three axis-aligned
feature planes at its coordinate pairs ((y,z), (x,z), (x,y)), then
passing the concatenated features plus a positional encoding of the
point through a shared MLP. The explicit backward pass exposes exact
gradients w.r.t. plane entries, decoder parameters, and the query point
itself, so the on-surface loss can push both the field and ray endpoints.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError, InputDomainError
from .nn import AdamState, Mlp, adam_step

# Index pairs (row coord, col coord) for the three planes.
_PLANE_COORDS = ((1, 2), (0, 2), (0, 1))


def positional_encoding(x: np.ndarray, bands: int = 4):
    """Sin/cos features of each coordinate; returns (enc, d_enc/dx)."""
    x = np.atleast_2d(x)
    if bands == 0:
        empty = np.empty((len(x), 0))
        return empty, empty
    parts, dparts = [], []
    for f in range(bands):
        w = (2.0**f) * np.pi
        parts.append(np.sin(w * x))
        parts.append(np.cos(w * x))
        dparts.append(w * np.cos(w * x))
        dparts.append(-w * np.sin(w * x))
    return np.concatenate(parts, axis=1), np.concatenate(dparts, axis=1)


def _cell_coords(c: np.ndarray, n: int):
    """Map [-1,1] to grid cells with a left-cell convention on grid lines.

    Returns (i0, frac, dscale) where dscale is d(grid coord)/d(c), zeroed
    where the input was clamped outside [-1,1].
    """
    u = (np.clip(c, -1.0, 1.0) + 1.0) * 0.5 * (n - 1)
    i0 = np.clip(np.ceil(u).astype(np.int64) - 1, 0, n - 2)
    frac = u - i0
    dscale = np.where(np.abs(c) <= 1.0, 0.5 * (n - 1), 0.0)
    return i0, frac, dscale


class TriplaneSDF:
    """Three feature planes + shared MLP decoder over [-1,1]^3."""

    def __init__(
        self,
        resolution: int = 32,
        channels: int = 16,
        decoder_hidden=(64, 64),
        posenc_bands: int = 4,
        rng=None,
        plane_scale: float = 0.05,
    ):
        rng = rng or np.random.default_rng(0)
        self.resolution = int(resolution)
        self.channels = int(channels)
        self.posenc_bands = int(posenc_bands)
        self.planes = rng.normal(
            0.0, plane_scale, size=(3, resolution, resolution, channels)
        )
        in_width = 3 * channels + 6 * posenc_bands
        self.decoder = Mlp([in_width] + list(decoder_hidden) + [1], rng=rng)

    @property
    def params(self):
        return [self.planes] + self.decoder.params

    def set_params(self, params):
        if params[0].shape != self.planes.shape:
            raise InputDomainError("plane shape mismatch")
        self.planes = np.asarray(params[0], dtype=np.float64)
        self.decoder.set_params(params[1:])

    def query(self, x: np.ndarray):
        """SDF values for (B, 3) points (or one point); returns (s, cache)."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        X0 = np.atleast_2d(x)
        in_volume = np.abs(X0) <= 1.0  # clamped coords get zero point-gradient
        X = np.clip(X0, -1.0, 1.0)
        n = self.resolution
        feats = []
        samp = []
        for p, (ca, cb) in enumerate(_PLANE_COORDS):
            ia, fa, da = _cell_coords(X[:, ca], n)
            ib, fb, db = _cell_coords(X[:, cb], n)
            P = self.planes[p]
            f00 = P[ia, ib]
            f10 = P[ia + 1, ib]
            f01 = P[ia, ib + 1]
            f11 = P[ia + 1, ib + 1]
            wa = fa[:, None]
            wb = fb[:, None]
            feats.append(
                f00 * (1 - wa) * (1 - wb)
                + f10 * wa * (1 - wb)
                + f01 * (1 - wa) * wb
                + f11 * wa * wb
            )
            samp.append((ia, ib, fa, fb, da, db, f00, f10, f01, f11))
        enc, denc = positional_encoding(X, self.posenc_bands)
        inp = np.concatenate(feats + [enc], axis=1)
        out, dec_cache = self.decoder.forward(inp)
        s = out[:, 0]
        cache = (X, samp, denc, dec_cache, single, in_volume)
        return (s[0] if single else s), cache

    def query_backward(self, cache, grad_s):
        """Gradients of sum(grad_s * s) w.r.t. planes, decoder, and x."""
        X, samp, denc, dec_cache, single, in_volume = cache
        B = len(X)
        g = np.atleast_1d(np.asarray(grad_s, dtype=np.float64))
        if g.shape != (B,):
            raise InputDomainError("grad_s shape mismatch")
        dec_grads, grad_inp = self.decoder.backward(dec_cache, g[:, None])
        C = self.channels
        plane_grads = np.zeros_like(self.planes)
        grad_x = np.zeros((B, 3))
        for p, (ca, cb) in enumerate(_PLANE_COORDS):
            gf = grad_inp[:, p * C : (p + 1) * C]
            ia, ib, fa, fb, da, db, f00, f10, f01, f11 = samp[p]
            wa = fa[:, None]
            wb = fb[:, None]
            np.add.at(plane_grads[p], (ia, ib), gf * (1 - wa) * (1 - wb))
            np.add.at(plane_grads[p], (ia + 1, ib), gf * wa * (1 - wb))
            np.add.at(plane_grads[p], (ia, ib + 1), gf * (1 - wa) * wb)
            np.add.at(plane_grads[p], (ia + 1, ib + 1), gf * wa * wb)
            dfa = ((f10 - f00) * (1 - wb) + (f11 - f01) * wb) * gf
            dfb = ((f01 - f00) * (1 - wa) + (f11 - f10) * wa) * gf
            grad_x[:, ca] += dfa.sum(axis=1) * da
            grad_x[:, cb] += dfb.sum(axis=1) * db
        genc = grad_inp[:, 3 * C :]
        for k in range(genc.shape[1]):
            grad_x[:, k % 3] += genc[:, k] * denc[:, k]
        grad_x *= in_volume
        if single:
            grad_x = grad_x[0]
        return plane_grads, dec_grads, grad_x


def on_surface_loss(tp: TriplaneSDF, endpoints: np.ndarray):
    """Mean squared SDF value at the endpoints.

    Returns (loss, param grads aligned with ``tp.params``, endpoint
    grads). Endpoints outside the volume are clamped by the query; their
    positional gradient is zero in the clamped coordinates.
    """
    pts = np.atleast_2d(np.asarray(endpoints, dtype=np.float64))
    if pts.size == 0:
        raise InputDomainError("empty endpoint list")
    s, cache = tp.query(pts)
    loss = float(np.mean(s**2))
    grad_s = 2.0 * s / len(pts)
    plane_grads, dec_grads, grad_x = tp.query_backward(cache, grad_s)
    return loss, [plane_grads] + dec_grads, grad_x


@dataclass
class FitResult:
    field: TriplaneSDF
    losses: np.ndarray


def make_supervision(shape, rng, n_samples: int = 4096, jitter: float = 0.05):
    """(points, targets) mixing box-uniform, on-surface, and near-surface
    samples of an analytic shape."""
    n_uniform = int(0.4 * n_samples)
    n_surface = int(0.3 * n_samples)
    n_near = n_samples - n_uniform - n_surface
    uni = rng.uniform(-1.0, 1.0, size=(n_uniform, 3))
    surf = sample_surface_points(shape, n_surface + n_near, rng)
    near = surf[n_surface:] + rng.normal(0.0, jitter, size=(n_near, 3))
    near = np.clip(near, -1.0, 1.0)
    pts = np.concatenate([uni, surf[:n_surface], near])
    targets = shape.sdf(pts)
    targets[n_uniform : n_uniform + n_surface] = 0.0
    return pts, targets


def sample_surface_points(shape, n: int, rng) -> np.ndarray:
    """Project random ball points onto the zero level set by Newton steps."""
    out = np.empty((0, 3))
    while len(out) < n:
        x = rng.normal(size=(2 * n, 3))
        x /= np.linalg.norm(x, axis=1, keepdims=True)
        x *= rng.uniform(0.05, 1.0, size=(2 * n, 1)) ** (1 / 3)
        for _ in range(8):
            x -= shape.sdf(x)[:, None] * shape.normal(x)
        good = np.abs(shape.sdf(x)) < 1e-6
        out = np.concatenate([out, x[good]])
    return out[:n]


def fit_triplane(
    tp: TriplaneSDF,
    points: np.ndarray,
    targets: np.ndarray,
    steps: int = 3000,
    plane_lr: float = 1e-2,
    decoder_lr: float = 1e-3,
    batch: int = 512,
    rng=None,
) -> FitResult:
    """Adam minimization of mean squared SDF error on (points, targets)."""
    rng = rng or np.random.default_rng(0)
    points = np.asarray(points, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if len(points) < 1000 and steps > 0:
        raise InputDomainError("need at least 1000 supervision samples")
    plane_state = AdamState.for_params([tp.planes], lr=plane_lr)
    dec_state = AdamState.for_params(tp.decoder.params, lr=decoder_lr)
    losses = np.empty(steps)
    for step in range(steps):
        idx = rng.integers(0, len(points), size=min(batch, len(points)))
        s, cache = tp.query(points[idx])
        err = s - targets[idx]
        loss = float(np.mean(err**2))
        if not np.isfinite(loss):
            raise DivergenceError(step)
        losses[step] = loss
        grad_s = 2.0 * err / len(idx)
        plane_grads, dec_grads, _ = tp.query_backward(cache, grad_s)
        adam_step(plane_state, [tp.planes], [plane_grads])
        adam_step(dec_state, tp.decoder.params, dec_grads)
    return FitResult(field=tp, losses=losses)
