"""Materialize one route of a supernet as a stand-alone network.

The extracted network allocates fresh contiguous buffers at exactly the
route's dimensions and copies the corresponding weight slices in, which is
the reference an executed slice must match and the "ideal" baseline of the
latency benchmark.
"""

from __future__ import annotations

import copy

import numpy as np

from .layers import kernel_offset
from .space import RoutingSpace, StageDef, SubNetworkSpec

__all__ = ["pinned_space", "extract_static"]


def pinned_space(space: RoutingSpace, spec: SubNetworkSpec) -> RoutingSpace:
    """A space whose grids are frozen at the spec's resolved values."""
    stages = []
    for sd in space.stages:
        cfg = spec.stage_cfg[sd.name]
        grids = {}
        for key in sd.grids:
            if key == "mlp":
                grids[key] = [cfg["mlp"]]
            else:
                grids[key] = [cfg[key]]
        stages.append(StageDef(name=sd.name, kind=sd.kind, grids=grids,
                               stride=sd.stride, gate=sd.gate,
                               routes=2 if sd.gate else None))
    return RoutingSpace(
        input_shape=space.input_shape, n_classes=space.n_classes,
        stages=stages, stem=space.stem, stem_width=space.stem_width,
        patch=space.patch, gate_hidden=space.gate_hidden,
        source_text=f"# pinned from {space.space_hash()}\n",
    )


def _copy(dst, src_slice):
    dst.data[...] = np.ascontiguousarray(src_slice)


def _conv_slice(src, dst, c_out, c_in, k, dil):
    k0 = kernel_offset(src.k_max, k, dil)
    span = (k - 1) * dil + 1
    taps = slice(k0, k0 + span, dil)
    _copy(dst.weight, src.weight.data[:c_out, :c_in, taps, taps])
    if src.bias is not None and dst.bias is not None:
        _copy(dst.bias, src.bias.data[:c_out])
    dst.static_taps = True


def _bn_slice(src, dst, c, t):
    _copy(dst.gamma, src.gamma.data[:c])
    _copy(dst.beta, src.beta.data[:c])
    if t in src.stats:
        mu, sigma = src.stats[t]
        dst.stats[0] = (mu.copy(), sigma.copy())


def extract_static(model, spec: SubNetworkSpec):
    from .model import Supernet

    static = Supernet(pinned_space(model.space, spec), seed=0,
                      attention_active=model.attention_active)
    for src_stage, dst_stage, sd in zip(model.stages, static.stages,
                                        model.space.stages):
        cfg = spec.stage_cfg[sd.name]
        t, c_in, c = cfg["t"], cfg["c_in"], cfg.get("channels")
        if sd.kind == "conv":
            blk_in = c_in
            for i in range(cfg["depth"]):
                s_conv, s_bn = src_stage.blocks[i]
                d_conv, d_bn = dst_stage.blocks[i]
                _conv_slice(s_conv, d_conv, c, blk_in, cfg["kernel"],
                            cfg["dilation"])
                _bn_slice(s_bn, d_bn, c, t)
                blk_in = c
        elif sd.kind == "dsconv":
            blk_in = c_in
            for i in range(cfg["depth"]):
                s_dw, s_bn1, s_pw, s_bn2 = src_stage.blocks[i]
                d_dw, d_bn1, d_pw, d_bn2 = dst_stage.blocks[i]
                _conv_slice(s_dw, d_dw, blk_in, 1, cfg["kernel"],
                            cfg["dilation"])
                _bn_slice(s_bn1, d_bn1, blk_in, t)
                _conv_slice(s_pw, d_pw, c, blk_in, 1, 1)
                _bn_slice(s_bn2, d_bn2, c, t)
                blk_in = c
        elif sd.kind == "resblock":
            blk_in = c_in
            for i in range(cfg["depth"]):
                s_blk, d_blk = src_stage.blocks[i], dst_stage.blocks[i]
                _conv_slice(s_blk["conv1"], d_blk["conv1"], c, blk_in, 3, 1)
                _bn_slice(s_blk["bn1"], d_blk["bn1"], c, t)
                _conv_slice(s_blk["conv2"], d_blk["conv2"], c, c, 3, 1)
                _bn_slice(s_blk["bn2"], d_blk["bn2"], c, t)
                if "proj" in s_blk:
                    _conv_slice(s_blk["proj"], d_blk["proj"], c, blk_in, 1, 1)
                    _bn_slice(s_blk["bnp"], d_blk["bnp"], c, t)
                blk_in = c
        else:  # vitblock
            d_e, h = cfg["embed"], cfg["heads"]
            d_a = h * src_stage.d_head
            d_mlp = cfg["d_mlp"]
            _copy(dst_stage.embed.weight, src_stage.embed.weight.data[:d_e])
            _copy(dst_stage.embed.bias, src_stage.embed.bias.data[:d_e])
            _copy(dst_stage.pos, src_stage.pos.data[:, :d_e])
            for i in range(cfg["depth"]):
                s_blk, d_blk = src_stage.blocks[i], dst_stage.blocks[i]
                for ln in ("ln1", "ln2"):
                    _copy(d_blk[ln].gamma, s_blk[ln].gamma.data[:d_e])
                    _copy(d_blk[ln].beta, s_blk[ln].beta.data[:d_e])
                for wn in ("w_q", "w_k", "w_v"):
                    _copy(getattr(d_blk["attn"], wn),
                          getattr(s_blk["attn"], wn).data[:d_a, :d_e])
                _copy(d_blk["attn"].w_proj,
                      s_blk["attn"].w_proj.data[:d_e, :d_a])
                _copy(d_blk["mlp"].w1, s_blk["mlp"].w1.data[:d_mlp, :d_e])
                _copy(d_blk["mlp"].w2, s_blk["mlp"].w2.data[:d_e, :d_mlp])
            _copy(dst_stage.ln_f.gamma, src_stage.ln_f.gamma.data[:d_e])
            _copy(dst_stage.ln_f.beta, src_stage.ln_f.beta.data[:d_e])

    if model.stem:
        for name, src_p in model.stem.params().items():
            static.stem.params()[name].data[...] = src_p.data
        for s_bn, d_bn in zip(model.stem.bn_layers(), static.stem.bn_layers()):
            d_bn.stats = copy.deepcopy(s_bn.stats)

    _copy(static.head.weight, model.head.weight.data[:, :spec.head_in])
    _copy(static.head.bias, model.head.bias.data)

    for g, src_gate in model.gates.items():
        dst_gate = static.gates[g]
        c_red = dst_gate.p.c_in_max
        _copy(dst_gate.p.w1, src_gate.p.w1.data[:, :c_red])
        _copy(dst_gate.p.w3, src_gate.p.w3.data[:c_red, :])
        _copy(dst_gate.p.w2, src_gate.p.w2.data[: dst_gate.p.n_routes])
    return static
