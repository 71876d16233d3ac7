"""Double-headed routing gate: pooled encoder, hard routing head, soft
channel-attention head, and categorical sampling (argmax / Gumbel).

The first projection W1 is shared by both heads.  The routing head maps
the hidden vector to per-route scores; the attention head maps it back to
channel space and rescales the feature map by 1 + tanh(.), staying in
(0, 2).
"""

from __future__ import annotations

import numpy as np

from .tensor import (
    Tensor,
    UsageError,
    global_avg_pool,
    matmul,
    pad_last,
    softmax,
)

__all__ = ["GateParams", "DynamicGate", "gate_encode", "sample_route"]


class GateParams:
    def __init__(self, c_in_max: int, n_routes: int, c_mlp: int,
                 rng: np.random.Generator):
        if n_routes < 2:
            raise UsageError("a routing gate needs at least 2 routes")
        self.c_in_max = c_in_max
        self.n_routes = n_routes
        self.c_mlp = c_mlp
        scale1 = np.sqrt(2.0 / c_in_max)
        scale2 = np.sqrt(2.0 / c_mlp)
        self.w1 = Tensor((rng.standard_normal((c_mlp, c_in_max)) * scale1
                          ).astype(np.float32), requires_grad=True)
        self.w2 = Tensor((rng.standard_normal((n_routes, c_mlp)) * scale2
                          ).astype(np.float32), requires_grad=True)
        self.w3 = Tensor(np.zeros((c_in_max, c_mlp), dtype=np.float32),
                         requires_grad=True)

    def params(self):
        return {"w1": self.w1, "w2": self.w2, "w3": self.w3}


def gate_encode(x: Tensor, c_in_max: int) -> Tensor:
    """Spatial mean per channel, zero-padded to the gate's max input width.

    Padding with zeros is equivalent to slicing W1's columns because the
    missing channels contribute exactly nothing to the matmul.
    """
    pooled = global_avg_pool(x)
    return pad_last(pooled, c_in_max)


class DynamicGate:
    def __init__(self, c_in_max: int, n_routes: int, c_mlp: int,
                 rng: np.random.Generator):
        self.p = GateParams(c_in_max, n_routes, c_mlp, rng)
        # experiment hook: pin the routing head to one route
        self.force_route: int | None = None

    @property
    def n_routes(self):
        return self.p.n_routes

    def _hidden(self, x_enc: Tensor) -> Tensor:
        return matmul(x_enc, self.p.w1.transpose()).relu()

    def encode(self, x: Tensor) -> Tensor:
        return gate_encode(x, self.p.c_in_max)

    def routing_probs(self, x_enc: Tensor) -> Tensor:
        """Simplex vector over routes from the two-layer routing head."""
        if self.force_route is not None:
            hot = np.zeros(self.p.n_routes, dtype=np.float32)
            hot[self.force_route] = 1.0
            shape = x_enc.shape[:-1] + (self.p.n_routes,)
            return Tensor(np.broadcast_to(hot, shape).copy(), dtype=None)
        scores = matmul(self._hidden(x_enc), self.p.w2.transpose())
        return softmax(scores, axis=-1)

    def attention_scale(self, x_enc: Tensor) -> Tensor:
        """Per-channel scale delta(x) = 1 + tanh(x), bounded in (0, 2)."""
        z = matmul(self._hidden(x_enc), self.p.w3.transpose())
        return 1.0 + z.tanh()

    def apply_attention(self, x: Tensor, x_enc: Tensor) -> Tensor:
        c = x.shape[1]
        scale = self.attention_scale(x_enc)[..., :c]
        if x.ndim == 4:
            scale = scale.reshape(x.shape[0], c, 1, 1)
        return x * scale

    def params(self):
        return self.p.params()


def sample_route(probs: Tensor, mode: str, rng: np.random.Generator | None = None,
                 tau: float = 1.0) -> Tensor:
    """Turn routing probabilities into a route signal.

    argmax: deterministic one-hot, ties broken toward the lowest index
    (the cheapest route).  gumbel: relaxed simplex sample
    softmax((log p + G)/tau).  gumbel_hard: one-hot forward value with the
    relaxed sample's gradient (straight-through).
    """
    if mode not in ("argmax", "gumbel", "gumbel_hard"):
        raise UsageError(f"unknown sampling mode {mode!r}")
    if mode == "argmax":
        idx = np.argmax(probs.data, axis=-1)
        return Tensor(_one_hot(idx, probs.shape[-1]), dtype=None)
    if tau <= 0:
        raise UsageError(f"gumbel temperature must be > 0, got {tau}")
    if rng is None:
        raise UsageError("gumbel sampling needs an rng")
    u = rng.random(probs.shape).astype(probs.dtype)
    g = -np.log(-np.log(u + 1e-20) + 1e-20)
    logits = (probs + 1e-20).log() + Tensor(g, dtype=None)
    soft = softmax(logits * (1.0 / tau), axis=-1)
    if mode == "gumbel":
        return soft
    hard = _one_hot(np.argmax(soft.data, axis=-1), probs.shape[-1])
    # forward: exactly one-hot; backward: the relaxed sample's gradient
    return soft + Tensor(hard - soft.data, dtype=None)


def _one_hot(idx: np.ndarray, n: int) -> np.ndarray:
    return np.eye(n, dtype=np.float32)[idx]
