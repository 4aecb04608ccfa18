"""Full-precision reference execution of one transformer layer.

Plain dense numpy, deliberately sharing no code with the decomposer or the
crossbar simulator so it can serve as ground truth for both.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError
from .modelir import LayerSpec, WeightSet


def softmax(s: np.ndarray, stable: bool = True) -> np.ndarray:
    """Row softmax. ``stable=False`` evaluates exp(s_ij) / sum_j exp(s_ij) literally."""
    s = np.asarray(s, dtype=np.float64)
    if stable:
        s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def _check(x: np.ndarray, spec: LayerSpec) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.hidden:
        raise DimensionError(f"input has shape {x.shape}, expected (n, {spec.hidden})")
    return x


def attention_forward(x, w: WeightSet, spec: LayerSpec, causal: bool = False,
                      stable: bool = True) -> np.ndarray:
    """Multi-head attention output Z (no residual). Head h owns columns [h*d_k, (h+1)*d_k)."""
    x = _check(x, spec)
    dk = spec.head_width
    q, k, v = x @ w.W_q, x @ w.W_k, x @ w.W_v
    heads = []
    for h in range(spec.n_heads):
        cols = slice(h * dk, (h + 1) * dk)
        s = q[:, cols] @ k[:, cols].T / np.sqrt(dk)
        if causal:
            s = np.where(np.tril(np.ones_like(s, dtype=bool)), s, -np.inf)
        heads.append(softmax(s, stable=stable) @ v[:, cols])
    return np.concatenate(heads, axis=1) @ w.W_o


def feedforward_forward(x, w: WeightSet, spec: LayerSpec) -> np.ndarray:
    x = _check(x, spec)
    return np.maximum(x @ w.W_a + w.b_a, 0.0) @ w.W_b + w.b_b


def variance(u: np.ndarray, identity: bool = False) -> np.ndarray:
    """Row variance, either two-pass or via E(u^2) - E(u)^2."""
    u = np.asarray(u, dtype=np.float64)
    if identity:
        return np.mean(u * u, axis=-1) - np.mean(u, axis=-1) ** 2
    return np.mean((u - u.mean(axis=-1, keepdims=True)) ** 2, axis=-1)


def add_norm(x, z, gamma, beta, epsilon: float) -> np.ndarray:
    x, z = np.asarray(x, dtype=np.float64), np.asarray(z, dtype=np.float64)
    if x.shape != z.shape:
        raise DimensionError(f"add_norm operands differ in shape: {x.shape} vs {z.shape}")
    u = x + z
    mean = u.mean(axis=-1, keepdims=True)
    var = variance(u)[:, None] if u.ndim == 2 else variance(u)
    return (u - mean) / np.sqrt(var + epsilon) * gamma + beta


def layer_forward(x, w: WeightSet, spec: LayerSpec, causal: bool = False) -> np.ndarray:
    """Component A (attention + add&norm, if present) followed by component B."""
    x = _check(x, spec)
    if spec.has_attention:
        x = add_norm(x, attention_forward(x, w, spec, causal=causal), w.gamma1, w.beta1, w.epsilon)
    return add_norm(x, feedforward_forward(x, w, spec), w.gamma2, w.beta2, w.epsilon)
