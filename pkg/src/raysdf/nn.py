"""Tiny feed-forward stack: MLP with explicit reverse-mode gradients,
bias-corrected Adam, and a finite-difference gradient checker.

Everything is float64 numpy; composite models (triplane query, denoiser)
build their backward passes out of these pieces.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputDomainError

_ACTIVATIONS = ("relu", "silu", "none")


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "silu":
        return z / (1.0 + np.exp(-z))
    return z


def _act_grad(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (z > 0).astype(np.float64)
    if name == "silu":
        s = 1.0 / (1.0 + np.exp(-z))
        return s * (1.0 + z * (1.0 - s))
    return np.ones_like(z)


class Mlp:
    """Affine + activation stack; the final layer is always linear."""

    def __init__(self, widths, hidden_activation="silu", rng=None):
        if len(widths) < 2:
            raise InputDomainError("need at least input and output widths")
        if hidden_activation not in _ACTIVATIONS:
            raise InputDomainError(f"unknown activation {hidden_activation!r}")
        rng = rng or np.random.default_rng(0)
        self.widths = tuple(int(w) for w in widths)
        n_layers = len(widths) - 1
        self.activations = [hidden_activation] * (n_layers - 1) + ["none"]
        self.weights = []
        self.biases = []
        for i in range(n_layers):
            fan_in = widths[i]
            scale = np.sqrt(2.0 / fan_in)
            self.weights.append(rng.normal(0.0, scale, size=(widths[i], widths[i + 1])))
            self.biases.append(np.zeros(widths[i + 1]))

    @property
    def params(self):
        """Flat list of parameter arrays (weights then bias, per layer)."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out.extend([W, b])
        return out

    def set_params(self, params):
        n = len(self.weights)
        if len(params) != 2 * n:
            raise InputDomainError("parameter count mismatch")
        for i in range(n):
            W, b = params[2 * i], params[2 * i + 1]
            if W.shape != self.weights[i].shape or b.shape != self.biases[i].shape:
                raise InputDomainError("parameter shape mismatch")
            self.weights[i] = np.asarray(W, dtype=np.float64)
            self.biases[i] = np.asarray(b, dtype=np.float64)

    def forward(self, x: np.ndarray):
        """Returns (output, cache); accepts a vector or a (B, in) batch."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        h = np.atleast_2d(x)
        if h.shape[1] != self.widths[0]:
            raise InputDomainError(f"input width {h.shape[1]} != {self.widths[0]}")
        inputs, preacts = [], []
        for W, b, act in zip(self.weights, self.biases, self.activations):
            inputs.append(h)
            z = h @ W + b
            preacts.append(z)
            h = _act(act, z)
        out = h[0] if single else h
        return out, (inputs, preacts, single)

    def backward(self, cache, grad_out: np.ndarray):
        """Exact gradients; returns (param grads list, input grad)."""
        inputs, preacts, single = cache
        g = np.atleast_2d(np.asarray(grad_out, dtype=np.float64))
        if g.shape != preacts[-1].shape:
            raise InputDomainError("grad_out shape mismatch")
        w_grads = [None] * len(self.weights)
        b_grads = [None] * len(self.biases)
        for i in reversed(range(len(self.weights))):
            gz = g * _act_grad(self.activations[i], preacts[i])
            w_grads[i] = inputs[i].T @ gz
            b_grads[i] = gz.sum(axis=0)
            g = gz @ self.weights[i].T
        grads = []
        for wg, bg in zip(w_grads, b_grads):
            grads.extend([wg, bg])
        return grads, (g[0] if single else g)


@dataclass
class AdamState:
    """Moment accumulators for a list of parameter arrays."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @staticmethod
    def for_params(params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        return AdamState(
            lr=lr,
            beta1=beta1,
            beta2=beta2,
            eps=eps,
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
        )


def adam_step(state: AdamState, params, grads, lr=None):
    """One bias-corrected Adam update; mutates and returns params/state."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise InputDomainError("params/grads/state length mismatch")
    state.step += 1
    lr = state.lr if lr is None else lr
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


GRAD_CHECK_TOL = 1e-4


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    worst_param: int
    worst_index: tuple
    n_checked: int

    @property
    def ok(self) -> bool:
        return np.isfinite(self.max_rel_error) and self.max_rel_error < GRAD_CHECK_TOL


def grad_check(fn, params, h=1e-5, max_coords=512, rng=None) -> GradCheckReport:
    """Central-difference check of ``fn``'s analytic gradients.

    ``fn(params) -> (scalar loss, grads list)`` must be deterministic.
    Checks a random subsample of at most ``max_coords`` coordinates.
    """
    rng = rng or np.random.default_rng(0)
    _, grads = fn(params)
    coords = []
    for pi, p in enumerate(params):
        for flat_idx in range(p.size):
            coords.append((pi, flat_idx))
    if len(coords) > max_coords:
        sel = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in sel]
    worst = (0.0, -1, ())
    for pi, flat_idx in coords:
        p = params[pi]
        idx = np.unravel_index(flat_idx, p.shape)
        orig = p[idx]
        p[idx] = orig + h
        lp, _ = fn(params)
        p[idx] = orig - h
        lm, _ = fn(params)
        p[idx] = orig
        num = (lp - lm) / (2 * h)
        ana = grads[pi][idx]
        rel = abs(num - ana) / max(abs(num), abs(ana), 1e-8)
        if rel > worst[0]:
            worst = (rel, pi, idx)
    return GradCheckReport(
        max_rel_error=worst[0],
        worst_param=worst[1],
        worst_index=worst[2],
        n_checked=len(coords),
    )
