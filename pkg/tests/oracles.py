"""Independent reference implementations used as test oracles.

Everything here is deliberately naive (loops, no shared code with the
library kernels) so that agreement is meaningful.
"""

import numpy as np


def naive_conv2d(x, w, bias=None, stride=1, padding=0, dilation=1, groups=1):
    """Six-nested-loop convolution. x: [B,C,H,W], w: [O,C/groups,K,K]."""
    B, C, H, W = x.shape
    O, Cg, K, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    span = (K - 1) * dilation + 1
    Ho = (H + 2 * padding - span) // stride + 1
    Wo = (W + 2 * padding - span) // stride + 1
    out = np.zeros((B, O, Ho, Wo), dtype=np.float64)
    og = O // groups
    for b in range(B):
        for o in range(O):
            gi = o // og
            for p in range(Ho):
                for q in range(Wo):
                    acc = 0.0
                    for c in range(Cg):
                        for i in range(K):
                            for j in range(K):
                                acc += (
                                    w[o, c, i, j]
                                    * xp[
                                        b,
                                        gi * Cg + c,
                                        p * stride + i * dilation,
                                        q * stride + j * dilation,
                                    ]
                                )
                    out[b, o, p, q] = acc
    if bias is not None:
        out += bias[None, :, None, None]
    return out


def counting_conv2d_madds(x_shape, w_shape, stride=1, padding=0, dilation=1, groups=1):
    """Count multiplies the naive convolution would perform."""
    B, C, H, W = x_shape
    O, Cg, K, _ = w_shape
    span = (K - 1) * dilation + 1
    Ho = (H + 2 * padding - span) // stride + 1
    Wo = (W + 2 * padding - span) // stride + 1
    return O * Ho * Wo * Cg * K * K


def finite_diff_grad(f, params, h=1e-3):
    """Central-difference gradient of scalar f() w.r.t. a list of arrays.

    Mutates each array entry in place, evaluates, and restores, so ``f``
    must read the arrays afresh on every call.
    """
    grads = []
    for p in params:
        g = np.zeros_like(p, dtype=np.float64)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def rel_err(a, b, eps=1e-12):
    """Norm-relative error between two gradient arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), eps)
    return np.linalg.norm(a - b) / denom


# ----------------------------------------------------------------------
# dense-masking references for the sliceable layers
# ----------------------------------------------------------------------
def tap_mask(k_max, k, dilation=1):
    """Boolean [k_max, k_max] mask of the centered k-tap dilated window."""
    span = (k - 1) * dilation + 1
    k0 = (k_max - span) // 2
    taps = np.arange(k0, k0 + span, dilation)
    m = np.zeros((k_max, k_max), dtype=bool)
    m[np.ix_(taps, taps)] = True
    return m, k0


def masked_linear(wd, x, in_dim, out_dim, bias=None):
    """Zero unselected weights, run full width, return the full output."""
    wm = wd.copy()
    wm[out_dim:] = 0
    wm[:, in_dim:] = 0
    xp = np.zeros(x.shape[:-1] + (wd.shape[1],), dtype=x.dtype)
    xp[..., :in_dim] = x
    out = xp @ wm.T
    if bias is not None:
        bm = bias.copy()
        bm[out_dim:] = 0
        out = out + bm
    return out


def masked_conv_standard(wd, x, c_out, k, dilation, p_crop, stride, pad_max,
                         bias=None):
    """Full-width convolution with masked weights, geometry-aligned so the
    first c_out channels equal the sliced forward."""
    C_O, C_I, K, _ = wd.shape
    c_in = x.shape[1]
    wm = wd.copy()
    wm[c_out:] = 0
    wm[:, c_in:] = 0
    tm, k0 = tap_mask(K, k, dilation)
    wm = wm * tm
    xp = np.zeros((x.shape[0], C_I, x.shape[2], x.shape[3]), dtype=x.dtype)
    xp[:, :c_in] = x
    bm = None
    if bias is not None:
        bm = bias.copy()
        bm[c_out:] = 0
    return naive_conv2d(xp, wm, bm, stride=stride,
                        padding=(pad_max - p_crop) + k0)


def masked_conv_group_count(wd, x, g_in, g_out, k, dilation, p_crop, stride,
                            pad_max):
    """Group-count scheme: inactive groups see zero input channels."""
    C_O, _, K, _ = wd.shape
    n_max = C_O // g_out
    c_in = x.shape[1]
    tm, k0 = tap_mask(K, k, dilation)
    wm = wd * tm
    xp = np.zeros((x.shape[0], n_max * g_in, x.shape[2], x.shape[3]),
                  dtype=x.dtype)
    xp[:, :c_in] = x
    return naive_conv2d(xp, wm, stride=stride,
                        padding=(pad_max - p_crop) + k0, groups=n_max)


def masked_conv_filters_per_group(wd, x, n_groups, g_in, g_out, k, dilation,
                                  p_crop, stride, pad_max):
    """Filters-per-group scheme: mask each group block, pad each group's
    input channels, return active rows gathered back out."""
    C_O, g_in_max, K, _ = wd.shape
    og_max = C_O // n_groups
    c_in = x.shape[1]
    assert c_in == n_groups * g_in
    wm = wd.copy()
    for i in range(n_groups):
        wm[i * og_max + g_out : (i + 1) * og_max] = 0
    wm[:, g_in:] = 0
    tm, k0 = tap_mask(K, k, dilation)
    wm = wm * tm
    xp = np.zeros((x.shape[0], n_groups * g_in_max, x.shape[2], x.shape[3]),
                  dtype=x.dtype)
    for i in range(n_groups):
        xp[:, i * g_in_max : i * g_in_max + g_in] = x[:, i * g_in : (i + 1) * g_in]
    full = naive_conv2d(xp, wm, stride=stride,
                        padding=(pad_max - p_crop) + k0, groups=n_groups)
    rows = np.concatenate(
        [np.arange(i * og_max, i * og_max + g_out) for i in range(n_groups)]
    )
    return full[:, rows]


def dense_attention_ref(x, wq, wk, wv, wproj, h, d_head, d_embed):
    """Standard multi-head attention over masked full-size weights."""
    d_a_max, d_e_max = wq.shape
    h_max = d_a_max // d_head
    d_a = h * d_head

    def mask_qkv(w):
        wm = w.copy()
        wm[d_a:] = 0
        wm[:, d_embed:] = 0
        return wm

    wpm = wproj.copy()
    wpm[d_embed:] = 0
    wpm[:, d_a:] = 0
    xp = np.zeros(x.shape[:-1] + (d_e_max,), dtype=x.dtype)
    xp[..., :d_embed] = x
    q = xp @ mask_qkv(wq).T
    k = xp @ mask_qkv(wk).T
    v = xp @ mask_qkv(wv).T
    n = x.shape[-2]
    outs = []
    for head in range(h_max):
        s = slice(head * d_head, (head + 1) * d_head)
        scores = q[..., s] @ np.swapaxes(k[..., s], -1, -2) / np.sqrt(d_head)
        e = np.exp(scores - scores.max(axis=-1, keepdims=True))
        attn = e / e.sum(axis=-1, keepdims=True)
        outs.append(attn @ v[..., s])
    merged = np.concatenate(outs, axis=-1)
    return merged @ wpm.T


def masked_mlp(w1, w2, x, d_embed, d_hidden):
    def gelu(z):
        from scipy.special import erf
        return 0.5 * z * (1 + erf(z / np.sqrt(2)))

    w1m = w1.copy()
    w1m[d_hidden:] = 0
    w1m[:, d_embed:] = 0
    w2m = w2.copy()
    w2m[d_embed:] = 0
    w2m[:, d_hidden:] = 0
    xp = np.zeros(x.shape[:-1] + (w1.shape[1],), dtype=x.dtype)
    xp[..., :d_embed] = x
    return gelu(xp @ w1m.T) @ w2m.T


def masked_patch_embed(w, bias, x, d_embed, patch):
    B, C, H, W = x.shape
    m = patch
    gh, gw = H // m, W // m
    patches = (
        x.reshape(B, C, gh, m, gw, m)
        .transpose(0, 2, 4, 1, 3, 5)
        .reshape(B, gh * gw, C * m * m)
    )
    wm = w.copy()
    wm[d_embed:] = 0
    bm = bias.copy()
    bm[d_embed:] = 0
    return patches @ wm.T + bm
