"""Dense reference decoder: plain numpy forward pass, no device machinery.

This is the functional oracle the simulated path is checked against. Storage
is float32 with float64 accumulation inside every matrix product, matching
the numeric contract of the modeled hardware path, so agreement is tight.

The decoder core is a pre-norm layer: normalized input feeds the fused
query/key/value projections, per-head scaled-dot-product attention over the
cache (grouped queries share a key/value head), output projection, residual,
then the FFN (plain ReLU MLP or the gated variant ``up * silu(gate)``) with a
second residual. Embeddings and logits are out of scope; inputs and outputs
are hidden-state vectors.
"""

from __future__ import annotations

import math
from typing import Dict, List, Tuple

import numpy as np

from .compiler import ModelConfig


def f64mv(w: np.ndarray, x: np.ndarray) -> np.ndarray:
    return (w.astype(np.float64) @ x.astype(np.float64)).astype(np.float32)


def layernorm(x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    x64 = x.astype(np.float64)
    out = (x64 - x64.mean()) / np.sqrt(x64.var() + eps)
    return out.astype(np.float32)


def softmax(x: np.ndarray) -> np.ndarray:
    x64 = x.astype(np.float64)
    e = np.exp(x64 - x64.max())
    return (e / e.sum()).astype(np.float32)


def make_weights(model: ModelConfig, seed: int = 0) -> List[Dict[str, np.ndarray]]:
    """Seeded per-layer weight dict shared by oracle and simulated paths."""
    rng = np.random.default_rng(seed)
    d = model.d_model
    dkv = model.n_kv_heads * model.head_dim
    scale = 1.0 / math.sqrt(d)
    layers = []
    for _ in range(model.n_layers):
        w = {
            "wq": rng.standard_normal((d, d)) * scale,
            "wk": rng.standard_normal((dkv, d)) * scale,
            "wv": rng.standard_normal((dkv, d)) * scale,
            "wproj": rng.standard_normal((d, d)) * scale,
            "w1": rng.standard_normal((model.ffn, d)) * scale,
            "w2": rng.standard_normal((d, model.ffn)) * (1.0 / math.sqrt(model.ffn)),
        }
        if model.ffn_variant == "swiglu":
            w["wg"] = rng.standard_normal((model.ffn, d)) * scale
        layers.append({k: v.astype(np.float32) for k, v in w.items()})
    return layers


def make_prefill(
    model: ModelConfig, input_len: int, seed: int = 0
) -> Tuple[np.ndarray, np.ndarray]:
    """Pre-populated cache: (n_layers, n_kv_heads, input_len, head_dim) x 2."""
    rng = np.random.default_rng(seed)
    shape = (model.n_layers, model.n_kv_heads, input_len, model.head_dim)
    return (
        rng.standard_normal(shape).astype(np.float32),
        rng.standard_normal(shape).astype(np.float32),
    )


class DenseDecoder:
    """Stateful reference: one growing cache per request id."""

    def __init__(self, model: ModelConfig, weights: List[Dict[str, np.ndarray]]):
        self.model = model
        self.weights = weights
        # cache[request][layer] = (k: (n_kv, t, d_h), v: same)
        self.cache: Dict[int, List[Tuple[np.ndarray, np.ndarray]]] = {}

    def admit(self, request_id: int, k_prefill: np.ndarray, v_prefill: np.ndarray):
        if request_id in self.cache:
            raise ValueError(f"request {request_id} already admitted")
        self.cache[request_id] = [
            (k_prefill[l].copy(), v_prefill[l].copy())
            for l in range(self.model.n_layers)
        ]

    def release(self, request_id: int):
        del self.cache[request_id]

    def t_cur(self, request_id: int) -> int:
        return self.cache[request_id][0][0].shape[1]

    def step(self, request_id: int, x: np.ndarray) -> np.ndarray:
        m = self.model
        group = m.n_heads // m.n_kv_heads
        x = np.asarray(x, dtype=np.float32)
        for l, w in enumerate(self.weights):
            h = layernorm(x)
            q = f64mv(w["wq"], h)
            k_new = f64mv(w["wk"], h).reshape(m.n_kv_heads, m.head_dim)
            v_new = f64mv(w["wv"], h).reshape(m.n_kv_heads, m.head_dim)
            k, v = self.cache[request_id][l]
            k = np.concatenate([k, k_new[:, None, :]], axis=1)
            v = np.concatenate([v, v_new[:, None, :]], axis=1)
            self.cache[request_id][l] = (k, v)
            ctx = np.zeros((m.n_heads, m.head_dim), dtype=np.float32)
            qh = q.reshape(m.n_heads, m.head_dim)
            for i in range(m.n_heads):
                g = i // group
                scores = (k[g].astype(np.float64) @ qh[i].astype(np.float64)) / math.sqrt(
                    m.head_dim
                )
                p = softmax(scores.astype(np.float32))
                ctx[i] = (v[g].astype(np.float64).T @ p.astype(np.float64)).astype(
                    np.float32
                )
            attn = f64mv(w["wproj"], ctx.reshape(-1))
            x = (x.astype(np.float64) + attn.astype(np.float64)).astype(np.float32)
            h2 = layernorm(x)
            up = f64mv(w["w1"], h2)
            if m.ffn_variant == "swiglu":
                gate = f64mv(w["wg"], h2).astype(np.float64)
                f = (up.astype(np.float64) * gate / (1.0 + np.exp(-gate))).astype(
                    np.float32
                )
            else:
                f = np.maximum(up, 0.0)
            down = f64mv(w["w2"], f)
            x = (x.astype(np.float64) + down.astype(np.float64)).astype(np.float32)
        return x
