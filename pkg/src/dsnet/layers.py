"""Layers that execute on contiguous slices of full-size shared weights.

Each layer allocates parameters at the maximum route's dimensions once;
every smaller route runs on views of those buffers.  Slicing conventions:

* output channels / rows: prefix ``[:c_out]`` (axis 0, zero copy)
* input channels / cols: prefix ``[:c_in]``
* kernel window: centered, taps ``k0 + j*dilation`` with
  ``k0 = (K_max - span) // 2`` and ``span = (k-1)*dilation + 1``
* padding: the input is padded to the maximum and then cropped by ``p``
  per side, so the convolution sees a single code path
* attention heads: per-head row blocks, active heads are a prefix
"""

from __future__ import annotations

import numpy as np

from .tensor import (
    NEST_CHUNK,
    ShapeError,
    Tensor,
    UsageError,
    concat,
    conv2d,
    matmul,
    pad2d,
    softmax,
)

__all__ = [
    "SliceableLinear",
    "SliceableConv2d",
    "ReSBN",
    "SliceableLayerNorm",
    "SlimmableAttention",
    "SlimmableMLP",
    "PatchEmbed",
    "EfficientStem",
    "sliceable_linear_forward",
    "kernel_offset",
]

GROUP_SCHEMES = ("standard", "dynamic-group-count", "dynamic-filters-per-group")


def kernel_offset(k_max: int, k: int, dilation: int = 1) -> int:
    """Start index of the centered k-tap window inside a k_max kernel."""
    span = (k - 1) * dilation + 1
    if span > k_max:
        raise ShapeError(f"kernel span {span} exceeds stored size {k_max}")
    return (k_max - span) // 2


def he_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


def _round_up_chunk(n: int, cap: int) -> int:
    return min(-(-n // NEST_CHUNK) * NEST_CHUNK, cap)


def _nested_rows_matmul(x: Tensor, w: Tensor, in_dim: int, out_dim: int) -> Tensor:
    """x @ W[:out_dim, :in_dim]^T computed at chunk granularity.

    Rows are processed in fixed NEST_CHUNK slabs (rounded up within the
    stored maximum) so a narrower route's output is a bitwise prefix of a
    wider route's: the underlying GEMM calls are identical.
    """
    eff = _round_up_chunk(out_dim, w.shape[0])
    if eff <= NEST_CHUNK:
        y = matmul(x, w[:eff, :in_dim].transpose())
    else:
        parts = [
            matmul(x, w[i : min(i + NEST_CHUNK, eff), :in_dim].transpose())
            for i in range(0, eff, NEST_CHUNK)
        ]
        y = concat(parts, axis=-1)
    return y[..., :out_dim] if eff != out_dim else y


def sliceable_linear_forward(w: Tensor, x: Tensor, in_dim: int, out_dim: int,
                             bias: Tensor | None = None) -> Tensor:
    """x @ W[:out_dim, :in_dim]^T, i.e. the sliced linear map applied to x."""
    rows, cols = w.shape
    if not (0 < out_dim <= rows and 0 < in_dim <= cols):
        raise ShapeError(
            f"slice ({out_dim}, {in_dim}) exceeds weight shape {w.shape}"
        )
    if x.shape[-1] != in_dim:
        raise ShapeError(f"input dim {x.shape[-1]} != in_dim {in_dim}")
    out = _nested_rows_matmul(x, w, in_dim, out_dim)
    if bias is not None:
        out = out + bias[:out_dim]
    return out


class SliceableLinear:
    def __init__(self, out_max: int, in_max: int, rng: np.random.Generator,
                 bias: bool = True):
        self.out_max = out_max
        self.in_max = in_max
        self.weight = Tensor(he_init(rng, (out_max, in_max), in_max),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_max, dtype=np.float32),
                           requires_grad=True) if bias else None

    def forward(self, x: Tensor, in_dim: int | None = None,
                out_dim: int | None = None) -> Tensor:
        in_dim = x.shape[-1] if in_dim is None else in_dim
        out_dim = self.out_max if out_dim is None else out_dim
        return sliceable_linear_forward(self.weight, x, in_dim, out_dim, self.bias)

    def params(self):
        p = {"weight": self.weight}
        if self.bias is not None:
            p["bias"] = self.bias
        return p


class SliceableConv2d:
    """Convolution on weight slices over filters, kernel, dilation and padding.

    ``scheme`` picks how group convolutions slim down:

    * ``standard``: ordinary (possibly grouped) conv, filters sliced as a prefix
    * ``dynamic-group-count``: per-group width fixed at (g_in, g_out), the
      number of groups follows the input width
    * ``dynamic-filters-per-group``: group count fixed at n_groups, each
      group's filter block is sliced
    """

    def __init__(self, c_out_max: int, c_in_max: int, k_max: int,
                 rng: np.random.Generator, stride: int = 1, pad_max: int = 0,
                 scheme: str = "standard", g_in: int = 1, g_out: int = 1,
                 n_groups: int = 1, bias: bool = False):
        if scheme not in GROUP_SCHEMES:
            raise UsageError(f"unknown group scheme {scheme!r}")
        self.c_out_max = c_out_max
        self.c_in_max = c_in_max
        self.k_max = k_max
        self.stride = stride
        self.pad_max = pad_max
        self.scheme = scheme
        self.g_in = g_in
        self.g_out = g_out
        self.n_groups = n_groups
        # static-tap layers store exactly their route's taps (stand-alone
        # extraction); the kernel is not sliced further, only dilated.
        self.static_taps = False
        if scheme == "standard":
            per_group_in = c_in_max
        elif scheme == "dynamic-group-count":
            if c_in_max % g_in or c_out_max % g_out:
                raise ShapeError("max channels not divisible by group width")
            per_group_in = g_in
        else:
            if c_in_max % n_groups or c_out_max % n_groups:
                raise ShapeError("max channels not divisible by group count")
            per_group_in = c_in_max // n_groups
        shape = (c_out_max, per_group_in, k_max, k_max)
        self.weight = Tensor(he_init(rng, shape, per_group_in * k_max * k_max),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(c_out_max, dtype=np.float32),
                           requires_grad=True) if bias else None

    def resolve_c_out(self, c_in: int, route: dict) -> int:
        if self.scheme == "dynamic-group-count":
            return (c_in // self.g_in) * self.g_out
        return route.get("c_out", self.c_out_max)

    def forward(self, x: Tensor, route: dict | None = None) -> Tensor:
        """Run the route's slice. route keys: c_out, k, l (dilation), p (pad crop),
        g_out (filters-per-group scheme only); missing keys mean the maximum."""
        route = route or {}
        c_in = x.shape[1]
        k = route.get("k", self.k_max)
        dil = route.get("l", 1)
        p = route.get("p", 0)
        if not 0 <= p <= self.pad_max:
            raise ShapeError(f"pad crop {p} outside [0, {self.pad_max}]")
        if self.static_taps:
            if k != self.k_max:
                raise ShapeError("static-tap layer cannot slice its kernel")
            taps = slice(0, self.k_max)
        else:
            k0 = kernel_offset(self.k_max, k, dil)
            span = (k - 1) * dil + 1
            taps = slice(k0, k0 + span, dil)

        xp = pad2d(x, self.pad_max)
        if p:
            xp = xp[:, :, p:-p, p:-p]

        if self.scheme == "standard":
            c_out = route.get("c_out", self.c_out_max)
            if c_out > self.c_out_max or c_in > self.c_in_max:
                raise ShapeError(
                    f"route ({c_out}, {c_in}) exceeds maxima "
                    f"({self.c_out_max}, {self.c_in_max})"
                )
            # compute at chunk granularity so narrower routes are bitwise
            # prefixes of wider ones, then drop the rounding surplus
            c_eff = _round_up_chunk(c_out, self.c_out_max)
            w = self.weight[:c_eff, :c_in, taps, taps]
            b = self.bias[:c_eff] if self.bias is not None else None
            out = conv2d(xp, w, b, stride=self.stride, dilation=dil)
            return out[:, :c_out] if c_eff != c_out else out
        if self.scheme == "dynamic-group-count":
            if c_in % self.g_in:
                raise ShapeError(
                    f"dynamic-group-count: input width {c_in} not divisible "
                    f"by group width {self.g_in}"
                )
            n = c_in // self.g_in
            c_out = n * self.g_out
            w = self.weight[:c_out, :, taps, taps]
            b = self.bias[:c_out] if self.bias is not None else None
            return conv2d(xp, w, b, stride=self.stride, dilation=dil, groups=n)
        # dynamic-filters-per-group
        if c_in % self.n_groups:
            raise ShapeError(
                f"dynamic-filters-per-group: input width {c_in} not divisible "
                f"by group count {self.n_groups}"
            )
        g_in = c_in // self.n_groups
        g_out = route.get("g_out", self.c_out_max // self.n_groups)
        og_max = self.c_out_max // self.n_groups
        if g_out > og_max:
            raise ShapeError(f"filters per group {g_out} exceeds {og_max}")
        g_eff = _round_up_chunk(g_out, og_max)
        blocks = []
        for i in range(self.n_groups):
            blocks.append(self.weight[i * og_max : i * og_max + g_eff, :g_in,
                                      taps, taps])
        w = concat(blocks, axis=0)
        b = None
        if self.bias is not None:
            b = concat(
                [self.bias[i * og_max : i * og_max + g_eff]
                 for i in range(self.n_groups)],
                axis=0,
            )
        out = conv2d(xp, w, b, stride=self.stride, dilation=dil,
                     groups=self.n_groups)
        if g_eff != g_out:
            out = concat(
                [out[:, i * g_eff : i * g_eff + g_out]
                 for i in range(self.n_groups)],
                axis=1,
            )
        return out

    def params(self):
        p = {"weight": self.weight}
        if self.bias is not None:
            p["bias"] = self.bias
        return p


class ReSBN:
    """Split batch normalization with per-route statistics.

    Training mode normalizes with the current batch's moments.  Evaluation
    requires recalibrated statistics for the active route: a cumulative
    average of batch moments collected with the supernet frozen.
    """

    def __init__(self, c_max: int, eps: float = 1e-5, gamma_init: float = 1.0):
        self.c_max = c_max
        self.eps = eps
        self.gamma = Tensor(np.full(c_max, gamma_init, dtype=np.float32),
                            requires_grad=True)
        self.beta = Tensor(np.zeros(c_max, dtype=np.float32), requires_grad=True)
        self.stats: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        self._acc: dict[int, list] = {}

    def forward(self, x: Tensor, route: int, training: bool,
                recalibrating: bool = False) -> Tensor:
        c = x.shape[1]
        spatial = x.ndim == 4
        if training or recalibrating:
            axes = (0, 2, 3) if spatial else (0,)
            mu = x.mean(axis=axes)
            var = ((x - _bcast(mu, spatial)) ** 2).mean(axis=axes)
            if recalibrating:
                self._observe(route, mu.data, var.data)
            sigma = (var + self.eps).sqrt()
        else:
            if route not in self.stats:
                raise UsageError(f"stats missing for route {route}; recalibrate first")
            mu_d, sigma_d = self.stats[route]
            if mu_d.shape[0] != c:
                raise ShapeError(
                    f"route {route} stats have width {mu_d.shape[0]}, input has {c}"
                )
            mu, sigma = Tensor(mu_d, dtype=None), Tensor(sigma_d, dtype=None)
        norm = (x - _bcast(mu, spatial)) / _bcast(sigma, spatial)
        return _bcast(self.gamma[:c], spatial) * norm + _bcast(self.beta[:c], spatial)

    def _observe(self, route: int, mu: np.ndarray, var: np.ndarray):
        acc = self._acc.get(route)
        if acc is None:
            self._acc[route] = [1, mu.copy(), var.copy()]
        else:
            acc[0] += 1
            acc[1] += mu
            acc[2] += var

    def finish_recalibration(self):
        for route, (n, mu_sum, var_sum) in self._acc.items():
            mu = (mu_sum / n).astype(np.float32)
            sigma = np.sqrt(var_sum / n + self.eps).astype(np.float32)
            self.stats[route] = (mu, sigma)
        self._acc = {}

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}


def _bcast(v: Tensor, spatial: bool) -> Tensor:
    return v.reshape(1, -1, 1, 1) if spatial else v.reshape(1, -1)


def re_sbn_recalibrate(layer: ReSBN, batches, route: int, n_batches: int | None = None):
    """Replace route stats with cumulative averages of batch moments."""
    count = 0
    for batch in batches:
        if n_batches is not None and count >= n_batches:
            break
        layer.forward(batch, route, training=False, recalibrating=True)
        count += 1
    if count == 0:
        raise UsageError("recalibration needs at least one batch")
    layer.finish_recalibration()


class SliceableLayerNorm:
    """Per-token normalization over the active embedding slice."""

    def __init__(self, d_max: int, eps: float = 1e-5):
        self.d_max = d_max
        self.eps = eps
        self.gamma = Tensor(np.ones(d_max, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(d_max, dtype=np.float32), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        d = x.shape[-1]
        mu = x.mean(axis=-1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
        norm = (x - mu) / (var + self.eps).sqrt()
        return self.gamma[:d] * norm + self.beta[:d]

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}


class SlimmableAttention:
    """Multi-head self attention with sliceable heads and embedding dim.

    Q/K/V weights are stored head-block-major: head i owns rows
    ``[i*d_head, (i+1)*d_head)``, so activating a prefix of heads slices a
    contiguous block.  The per-head dim is fixed; routes vary the head
    count and the embedding width.
    """

    def __init__(self, d_embed_max: int, h_max: int, d_head: int,
                 rng: np.random.Generator):
        self.d_embed_max = d_embed_max
        self.h_max = h_max
        self.d_head = d_head
        d_attn = h_max * d_head
        self.w_q = Tensor(he_init(rng, (d_attn, d_embed_max), d_embed_max),
                          requires_grad=True)
        self.w_k = Tensor(he_init(rng, (d_attn, d_embed_max), d_embed_max),
                          requires_grad=True)
        self.w_v = Tensor(he_init(rng, (d_attn, d_embed_max), d_embed_max),
                          requires_grad=True)
        self.w_proj = Tensor(he_init(rng, (d_embed_max, d_attn), d_attn),
                             requires_grad=True)

    def forward(self, x: Tensor, d_embed: int | None = None,
                heads: int | None = None) -> Tensor:
        d_e = x.shape[-1] if d_embed is None else d_embed
        h = self.h_max if heads is None else heads
        if d_e > self.d_embed_max:
            raise ShapeError(f"embed dim {d_e} exceeds max {self.d_embed_max}")
        d_a = h * self.d_head
        if d_a > self.h_max * self.d_head:
            raise ShapeError(f"{h} heads exceed stored {self.h_max}")
        squeeze = x.ndim == 2
        if squeeze:
            x = x.reshape(1, *x.shape)
        B, N, _ = x.shape

        def project(w):
            y = matmul(x, w[:d_a, :d_e].transpose())  # [B, N, d_a]
            return y.reshape(B, N, h, self.d_head).transpose(0, 2, 1, 3)

        q, k, v = project(self.w_q), project(self.w_k), project(self.w_v)
        scores = matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(self.d_head))
        attn = softmax(scores, axis=-1)
        mixed = matmul(attn, v)  # [B, h, N, d_head]
        merged = mixed.transpose(0, 2, 1, 3).reshape(B, N, d_a)
        out = matmul(merged, self.w_proj[:d_e, :d_a].transpose())
        return out.reshape(N, d_e) if squeeze else out

    def attention_weights(self, x: Tensor, d_embed: int | None = None,
                          heads: int | None = None) -> np.ndarray:
        """Row-stochastic attention matrices [B, h, N, N] (no grad)."""
        d_e = x.shape[-1] if d_embed is None else d_embed
        h = self.h_max if heads is None else heads
        d_a = h * self.d_head
        if x.ndim == 2:
            x = x.reshape(1, *x.shape)
        B, N, _ = x.shape
        q = matmul(x, self.w_q[:d_a, :d_e].transpose()).data.reshape(
            B, N, h, self.d_head).transpose(0, 2, 1, 3)
        k = matmul(x, self.w_k[:d_a, :d_e].transpose()).data.reshape(
            B, N, h, self.d_head).transpose(0, 2, 1, 3)
        s = q @ k.transpose(0, 1, 3, 2) / np.sqrt(self.d_head)
        e = np.exp(s - s.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)

    def params(self):
        return {"w_q": self.w_q, "w_k": self.w_k, "w_v": self.w_v,
                "w_proj": self.w_proj}


class SlimmableMLP:
    """Two sliceable linear layers with GELU, for dynamic expansion ratios."""

    def __init__(self, d_max: int, d_hidden_max: int, rng: np.random.Generator):
        self.d_max = d_max
        self.d_hidden_max = d_hidden_max
        self.w1 = Tensor(he_init(rng, (d_hidden_max, d_max), d_max),
                         requires_grad=True)
        self.w2 = Tensor(he_init(rng, (d_max, d_hidden_max), d_hidden_max),
                         requires_grad=True)

    def forward(self, x: Tensor, d_embed: int | None = None,
                d_hidden: int | None = None) -> Tensor:
        d_e = x.shape[-1] if d_embed is None else d_embed
        d_h = self.d_hidden_max if d_hidden is None else d_hidden
        if d_h > self.d_hidden_max or d_e > self.d_max:
            raise ShapeError(
                f"route ({d_e}, {d_h}) exceeds maxima ({self.d_max}, "
                f"{self.d_hidden_max})"
            )
        hidden = matmul(x, self.w1[:d_h, :d_e].transpose()).gelu()
        return matmul(hidden, self.w2[:d_e, :d_h].transpose())

    def params(self):
        return {"w1": self.w1, "w2": self.w2}


class PatchEmbed:
    """Linear projection of flattened image patches, sliceable in output dim."""

    def __init__(self, d_embed_max: int, in_channels: int, patch: int,
                 rng: np.random.Generator):
        self.d_embed_max = d_embed_max
        self.in_channels = in_channels
        self.patch = patch
        d_in = in_channels * patch * patch
        self.weight = Tensor(he_init(rng, (d_embed_max, d_in), d_in),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(d_embed_max, dtype=np.float32),
                           requires_grad=True)

    def forward(self, x: Tensor, d_embed: int | None = None) -> Tensor:
        d_e = self.d_embed_max if d_embed is None else d_embed
        B, C, H, W = x.shape
        m = self.patch
        if H % m or W % m:
            raise ShapeError(f"input {H}x{W} not divisible into {m}x{m} patches")
        gh, gw = H // m, W // m
        # [B, C, gh, m, gw, m] -> [B, gh, gw, C, m, m] -> [B, N, C*m*m]
        patches = (
            x.reshape(B, C, gh, m, gw, m)
            .transpose(0, 2, 4, 1, 3, 5)
            .reshape(B, gh * gw, C * m * m)
        )
        return matmul(patches, self.weight[:d_e].transpose()) + self.bias[:d_e]

    def params(self):
        return {"weight": self.weight, "bias": self.bias}


class EfficientStem:
    """conv -> depthwise-separable -> depthwise-separable, fixed width.

    Cheap front end producing the feature map the routing gate reads before
    patch embedding.  Kernel/stride layout for 32x32 inputs: [3,3,3]/[1,1,1]
    (the trailing patch projection is a separate sliceable layer).
    """

    def __init__(self, in_channels: int, width: int, rng: np.random.Generator,
                 kernel: int = 3):
        pad = kernel // 2
        self.conv = SliceableConv2d(width, in_channels, kernel, rng, pad_max=pad)
        self.bn0 = ReSBN(width)
        blocks = []
        for _ in range(2):
            dw = SliceableConv2d(width, width, kernel, rng, pad_max=pad,
                                 scheme="dynamic-group-count", g_in=1, g_out=1)
            pw = SliceableConv2d(width, width, 1, rng)
            blocks.append((dw, ReSBN(width), pw, ReSBN(width)))
        self.blocks = blocks
        self.width = width

    def forward(self, x: Tensor, training: bool, recalibrating: bool = False) -> Tensor:
        y = self.bn0.forward(self.conv.forward(x), 0, training, recalibrating).relu()
        for dw, bn1, pw, bn2 in self.blocks:
            y = bn1.forward(dw.forward(y), 0, training, recalibrating).relu()
            y = bn2.forward(pw.forward(y), 0, training, recalibrating).relu()
        return y

    def params(self):
        out = {}
        for k, v in self.conv.params().items():
            out[f"conv.{k}"] = v
        for k, v in self.bn0.params().items():
            out[f"bn0.{k}"] = v
        for i, (dw, bn1, pw, bn2) in enumerate(self.blocks):
            for prefix, layer in (
                (f"ds{i}.dw", dw), (f"ds{i}.bn1", bn1),
                (f"ds{i}.pw", pw), (f"ds{i}.bn2", bn2),
            ):
                for k, v in layer.params().items():
                    out[f"{prefix}.{k}"] = v
        return out

    def bn_layers(self):
        out = [self.bn0]
        for _, bn1, _, bn2 in self.blocks:
            out.extend([bn1, bn2])
        return out
