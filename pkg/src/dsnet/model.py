"""Supernet runtime: builds a weight-sharing network from a routing space,
executes arbitrary routes on weight slices, runs gate-driven dynamic
inference and accounts multiply-adds per route.

MAdds convention: convolution c_out*(c_in/groups)*k^2*H'*W', linear
in*out*tokens, attention QKV projections + both attention matmuls
(scores and value mixing) + output projection.  Normalization, activations,
pooling and the gate MLP are excluded.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gate import DynamicGate
from .layers import (
    EfficientStem,
    PatchEmbed,
    ReSBN,
    SliceableConv2d,
    SliceableLinear,
    SliceableLayerNorm,
    SlimmableAttention,
    SlimmableMLP,
)
from .space import (
    RoutingSpace,
    SubNetworkSpec,
    largest_spec,
    resolve_subnet,
    smallest_spec,
)
from .tensor import Tensor, UsageError, global_avg_pool, no_grad

__all__ = ["ComplexityReport", "Supernet", "build_supernet"]


@dataclass
class ComplexityReport:
    madds: int
    breakdown: list  # (layer name, madds)

    def __post_init__(self):
        assert self.madds > 0
        assert sum(m for _, m in self.breakdown) == self.madds


def _conv_out(h: int, pad: int, k: int, dil: int, stride: int) -> int:
    return (h + 2 * pad - dil * (k - 1) - 1) // stride + 1


def _conv_madds(c_out, c_in, groups, k, h_out, w_out):
    return c_out * (c_in // groups) * k * k * h_out * w_out


# ----------------------------------------------------------------------
# stages
# ----------------------------------------------------------------------
class ConvStage:
    def __init__(self, sd, in_max: int, rng):
        self.name = sd.name
        self.k_max = max(sd.grids.get("kernel", [3]))
        self.pad_max = max(sd.grids.get("padding", [self.k_max // 2]))
        self.out_max = max(sd.grids["channels"])
        self.stride = sd.stride
        self.blocks = []
        for i in range(max(sd.grids["depth"])):
            conv = SliceableConv2d(
                self.out_max, in_max if i == 0 else self.out_max, self.k_max,
                rng, stride=sd.stride if i == 0 else 1, pad_max=self.pad_max,
            )
            self.blocks.append((conv, ReSBN(self.out_max)))

    def forward(self, x, cfg, training, recal=False):
        route = {
            "c_out": cfg["channels"], "k": cfg["kernel"], "l": cfg["dilation"],
            "p": self.pad_max - cfg["padding"],
        }
        for conv, bn in self.blocks[: cfg["depth"]]:
            x = bn.forward(conv.forward(x, route), cfg["t"], training, recal).relu()
        return x

    def madds(self, cfg, h, w):
        c_in = cfg["c_in"]
        k, dil, pad = cfg["kernel"], cfg["dilation"], cfg["padding"]
        out = []
        for i in range(cfg["depth"]):
            stride = self.stride if i == 0 else 1
            h = _conv_out(h, pad, k, dil, stride)
            w = _conv_out(w, pad, k, dil, stride)
            out.append((f"{self.name}.b{i}.conv",
                        _conv_madds(cfg["channels"], c_in, 1, k, h, w)))
            c_in = cfg["channels"]
        return out, h, w

    def params(self):
        out = {}
        for i, (conv, bn) in enumerate(self.blocks):
            for k, v in conv.params().items():
                out[f"{self.name}.b{i}.conv.{k}"] = v
            for k, v in bn.params().items():
                out[f"{self.name}.b{i}.bn.{k}"] = v
        return out

    def bn_layers(self):
        return [(f"{self.name}.b{i}.bn", bn) for i, (_, bn) in enumerate(self.blocks)]


class DSConvStage:
    """Depthwise-separable blocks: dw conv (spatial dims dynamic) + 1x1 pw."""

    def __init__(self, sd, in_max: int, rng):
        self.name = sd.name
        self.k_max = max(sd.grids.get("kernel", [3]))
        self.pad_max = max(sd.grids.get("padding", [self.k_max // 2]))
        self.out_max = max(sd.grids["channels"])
        self.stride = sd.stride
        self.blocks = []
        for i in range(max(sd.grids["depth"])):
            cin = in_max if i == 0 else self.out_max
            dw = SliceableConv2d(cin, cin, self.k_max, rng,
                                 stride=sd.stride if i == 0 else 1,
                                 pad_max=self.pad_max,
                                 scheme="dynamic-group-count", g_in=1, g_out=1)
            pw = SliceableConv2d(self.out_max, cin, 1, rng)
            self.blocks.append((dw, ReSBN(cin), pw, ReSBN(self.out_max)))

    def forward(self, x, cfg, training, recal=False):
        dw_route = {"k": cfg["kernel"], "l": cfg["dilation"],
                    "p": self.pad_max - cfg["padding"]}
        t = cfg["t"]
        for dw, bn1, pw, bn2 in self.blocks[: cfg["depth"]]:
            x = bn1.forward(dw.forward(x, dw_route), t, training, recal).relu()
            x = bn2.forward(pw.forward(x, {"c_out": cfg["channels"]}), t,
                            training, recal).relu()
        return x

    def madds(self, cfg, h, w):
        c_in = cfg["c_in"]
        k, dil, pad = cfg["kernel"], cfg["dilation"], cfg["padding"]
        out = []
        for i in range(cfg["depth"]):
            stride = self.stride if i == 0 else 1
            h = _conv_out(h, pad, k, dil, stride)
            w = _conv_out(w, pad, k, dil, stride)
            out.append((f"{self.name}.b{i}.dw",
                        _conv_madds(c_in, c_in, c_in, k, h, w)))
            out.append((f"{self.name}.b{i}.pw",
                        _conv_madds(cfg["channels"], c_in, 1, 1, h, w)))
            c_in = cfg["channels"]
        return out, h, w

    def params(self):
        out = {}
        for i, (dw, bn1, pw, bn2) in enumerate(self.blocks):
            for prefix, layer in ((f"{self.name}.b{i}.dw", dw),
                                  (f"{self.name}.b{i}.bn1", bn1),
                                  (f"{self.name}.b{i}.pw", pw),
                                  (f"{self.name}.b{i}.bn2", bn2)):
                for k, v in layer.params().items():
                    out[f"{prefix}.{k}"] = v
        return out

    def bn_layers(self):
        out = []
        for i, (_, bn1, _, bn2) in enumerate(self.blocks):
            out.append((f"{self.name}.b{i}.bn1", bn1))
            out.append((f"{self.name}.b{i}.bn2", bn2))
        return out


class ResStage:
    """Basic residual blocks; the first block carries stride and a 1x1
    projection whose width always matches the residual branch output."""

    def __init__(self, sd, in_max: int, rng):
        self.name = sd.name
        self.out_max = max(sd.grids["channels"])
        self.stride = sd.stride
        self.blocks = []
        for i in range(max(sd.grids["depth"])):
            cin = in_max if i == 0 else self.out_max
            conv1 = SliceableConv2d(self.out_max, cin, 3, rng,
                                    stride=sd.stride if i == 0 else 1, pad_max=1)
            conv2 = SliceableConv2d(self.out_max, self.out_max, 3, rng, pad_max=1)
            block = {
                "conv1": conv1, "bn1": ReSBN(self.out_max),
                "conv2": conv2, "bn2": ReSBN(self.out_max, gamma_init=0.0),
            }
            if i == 0:
                block["proj"] = SliceableConv2d(self.out_max, cin, 1, rng,
                                                stride=sd.stride)
                block["bnp"] = ReSBN(self.out_max)
            self.blocks.append(block)

    def forward(self, x, cfg, training, recal=False):
        c, t = cfg["channels"], cfg["t"]
        for i, blk in enumerate(self.blocks[: cfg["depth"]]):
            h = blk["bn1"].forward(blk["conv1"].forward(x, {"c_out": c}), t,
                                   training, recal).relu()
            h = blk["bn2"].forward(blk["conv2"].forward(h, {"c_out": c}), t,
                                   training, recal)
            if "proj" in blk:
                skip = blk["bnp"].forward(blk["proj"].forward(x, {"c_out": c}),
                                          t, training, recal)
            else:
                skip = x
            x = (h + skip).relu()
        return x

    def madds(self, cfg, h, w):
        c_in, c = cfg["c_in"], cfg["channels"]
        out = []
        for i in range(cfg["depth"]):
            stride = self.stride if i == 0 else 1
            h2 = _conv_out(h, 1, 3, 1, stride)
            w2 = _conv_out(w, 1, 3, 1, stride)
            out.append((f"{self.name}.b{i}.conv1",
                        _conv_madds(c, c_in, 1, 3, h2, w2)))
            out.append((f"{self.name}.b{i}.conv2",
                        _conv_madds(c, c, 1, 3, h2, w2)))
            if i == 0:
                out.append((f"{self.name}.b{i}.proj",
                            _conv_madds(c, c_in, 1, 1, h2, w2)))
            h, w = h2, w2
            c_in = c
        return out, h, w

    def params(self):
        out = {}
        for i, blk in enumerate(self.blocks):
            for part, layer in blk.items():
                for k, v in layer.params().items():
                    out[f"{self.name}.b{i}.{part}.{k}"] = v
        return out

    def bn_layers(self):
        out = []
        for i, blk in enumerate(self.blocks):
            for part in ("bn1", "bn2", "bnp"):
                if part in blk:
                    out.append((f"{self.name}.b{i}.{part}", blk[part]))
        return out


class VitStage:
    """Patch embedding plus pre-norm transformer blocks with sliceable
    embedding dim, head count, MLP width and depth."""

    def __init__(self, sd, in_max: int, h_in: int, w_in: int, patch: int, rng):
        self.name = sd.name
        self.d_max = max(sd.grids["embed"])
        self.h_max = max(sd.grids["heads"])
        self.d_head = max(sd.grids["qkv"]) // self.h_max
        self.d_mlp_max = int(round(max(sd.grids.get("mlp", [4])) * self.d_max))
        self.patch = patch
        self.n_tokens = (h_in // patch) * (w_in // patch)
        self.in_channels = in_max
        self.embed = PatchEmbed(self.d_max, in_max, patch, rng)
        self.pos = Tensor(
            (rng.standard_normal((self.n_tokens, self.d_max)) * 0.02
             ).astype(np.float32),
            requires_grad=True,
        )
        self.blocks = []
        for _ in range(max(sd.grids["depth"])):
            self.blocks.append({
                "ln1": SliceableLayerNorm(self.d_max),
                "attn": SlimmableAttention(self.d_max, self.h_max, self.d_head, rng),
                "ln2": SliceableLayerNorm(self.d_max),
                "mlp": SlimmableMLP(self.d_max, self.d_mlp_max, rng),
            })
        self.ln_f = SliceableLayerNorm(self.d_max)
        self.out_max = self.d_max

    def forward(self, x, cfg, training, recal=False):
        d_e, h, d_mlp = cfg["embed"], cfg["heads"], cfg["d_mlp"]
        tok = self.embed.forward(x, d_embed=d_e) + self.pos[:, :d_e]
        for blk in self.blocks[: cfg["depth"]]:
            tok = tok + blk["attn"].forward(blk["ln1"].forward(tok),
                                            d_embed=d_e, heads=h)
            tok = tok + blk["mlp"].forward(blk["ln2"].forward(tok),
                                           d_embed=d_e, d_hidden=d_mlp)
        return self.ln_f.forward(tok)

    def madds(self, cfg, h, w):
        d_e, heads, d_mlp = cfg["embed"], cfg["heads"], cfg["d_mlp"]
        d_a = heads * self.d_head
        n = self.n_tokens
        out = [(f"{self.name}.embed",
                n * self.in_channels * self.patch ** 2 * d_e)]
        for i in range(cfg["depth"]):
            qkv = 3 * n * d_e * d_a
            attn = 2 * n * n * d_a
            proj = n * d_a * d_e
            mlp = 2 * n * d_e * d_mlp
            out.append((f"{self.name}.b{i}.attn", qkv + attn + proj))
            out.append((f"{self.name}.b{i}.mlp", mlp))
        return out, 1, 1

    def params(self):
        out = {f"{self.name}.embed.weight": self.embed.weight,
               f"{self.name}.embed.bias": self.embed.bias,
               f"{self.name}.pos": self.pos}
        for i, blk in enumerate(self.blocks):
            for part, layer in blk.items():
                for k, v in layer.params().items():
                    out[f"{self.name}.b{i}.{part}.{k}"] = v
        for k, v in self.ln_f.params().items():
            out[f"{self.name}.ln_f.{k}"] = v
        return out

    def bn_layers(self):
        return []


_STAGE_BUILDERS = {"conv": ConvStage, "dsconv": DSConvStage, "resblock": ResStage}


class Supernet:
    """Weight-sharing network executable as any route of its space."""

    def __init__(self, space: RoutingSpace, seed: int = 0,
                 attention_active: bool = True):
        rng = np.random.default_rng(seed)
        self.space = space
        self.attention_active = attention_active
        C, H, W = space.input_shape
        self.stem = None
        if space.stem == "efficient":
            self.stem = EfficientStem(C, space.stem_width, rng)
            in_max = space.stem_width
        else:
            in_max = C
        # spatial dims after the stem (stride-1 stem preserves them)
        self.stages = []
        h, w = H, W
        stage_in = []
        for sd in space.stages:
            stage_in.append(in_max)
            if sd.kind == "vitblock":
                st = VitStage(sd, in_max, h, w, space.patch, rng)
            else:
                st = _STAGE_BUILDERS[sd.kind](sd, in_max, rng)
            self.stages.append(st)
            in_max = st.out_max
        self.head_in_max = in_max
        self.head = SliceableLinear(space.n_classes, in_max, rng)
        self.gates = {}
        for g, si in enumerate(space.gate_stage_indices()):
            self.gates[g] = DynamicGate(stage_in[si], space.routes_per_gate()[g],
                                        space.gate_hidden, rng)
        self._gate_at_stage = {si: g for g, si in
                               enumerate(space.gate_stage_indices())}

    # ------------------------------------------------------------------
    # forward passes
    # ------------------------------------------------------------------
    def _run_stem(self, x, training, recal):
        return self.stem.forward(x, training, recal) if self.stem else x

    def forward_route(self, x: Tensor, spec: SubNetworkSpec, training: bool,
                      recal: bool = False, collect_features: bool = False):
        """Execute one resolved route end to end.

        Returns logits, or (logits, stage feature list) when
        ``collect_features`` (features are spatially pooled stage outputs,
        used for hierarchical feature distillation).
        """
        y = self._run_stem(x, training, recal)
        feats = []
        for idx, stage in enumerate(self.stages):
            g = self._gate_at_stage.get(idx)
            if g is not None and self.attention_active:
                enc = self.gates[g].encode(y)
                y = self.gates[g].apply_attention(y, enc)
            y = stage.forward(y, spec.stage_cfg[stage.name], training, recal)
            if collect_features:
                feats.append(y.mean(axis=1) if y.ndim == 3 else global_avg_pool(y))
        pooled = y.mean(axis=1) if y.ndim == 3 else global_avg_pool(y)
        logits = self.head.forward(pooled, in_dim=spec.head_in,
                                   out_dim=self.space.n_classes)
        return (logits, feats) if collect_features else logits

    def forward_dynamic(self, x: Tensor, training: bool = False):
        """Gate-driven inference: per-sample argmax routing at every gate.

        Returns (logits [B, classes], signals [B, n_gates], reports) where
        reports is one ComplexityReport per sample.
        """
        n_gates = len(self.gates)
        B = x.shape[0]
        logits_out = np.zeros((B, self.space.n_classes), dtype=np.float32)
        signals_out = np.zeros((B, n_gates), dtype=np.int64)
        report_cache: dict = {}
        reports: list = [None] * B

        def run(stage_idx, y, sample_idx, picked):
            if stage_idx == len(self.stages):
                spec = resolve_subnet(self.space, list(picked))
                pooled = y.mean(axis=1) if y.ndim == 3 else global_avg_pool(y)
                lg = self.head.forward(pooled, in_dim=spec.head_in,
                                       out_dim=self.space.n_classes)
                logits_out[sample_idx] = lg.data
                if picked not in report_cache:
                    report_cache[picked] = self.madds_of(spec)
                for b in sample_idx:
                    reports[b] = report_cache[picked]
                return
            g = self._gate_at_stage.get(stage_idx)
            if g is None:
                spec = resolve_subnet(
                    self.space,
                    list(picked) + [0] * (n_gates - len(picked)),
                )
                y2 = self.stages[stage_idx].forward(
                    y, spec.stage_cfg[self.stages[stage_idx].name], training)
                run(stage_idx + 1, y2, sample_idx, picked)
                return
            gate = self.gates[g]
            enc = gate.encode(y)
            if self.attention_active:
                y = gate.apply_attention(y, enc)
            probs = gate.routing_probs(enc)
            choice = np.argmax(probs.data, axis=-1)
            signals_out[sample_idx, g] = choice
            for t in np.unique(choice):
                mask = choice == t
                sub = Tensor(y.data[mask], dtype=None)
                picked_t = picked + (int(t),)
                spec = resolve_subnet(
                    self.space,
                    list(picked_t) + [0] * (n_gates - len(picked_t)),
                )
                y2 = self.stages[stage_idx].forward(
                    sub, spec.stage_cfg[self.stages[stage_idx].name], training)
                run(stage_idx + 1, y2, sample_idx[mask], picked_t)

        with no_grad():
            y0 = self._run_stem(x, training, recal=False)
            run(0, y0, np.arange(B), ())
        return logits_out, signals_out, reports

    # ------------------------------------------------------------------
    # complexity
    # ------------------------------------------------------------------
    def madds_of(self, spec: SubNetworkSpec) -> ComplexityReport:
        C, H, W = self.space.input_shape
        breakdown = []
        h, w = H, W
        if self.stem:
            width = self.space.stem_width
            breakdown.append(("stem.conv", _conv_madds(width, C, 1, 3, h, w)))
            for i in range(2):
                breakdown.append((f"stem.ds{i}.dw",
                                  _conv_madds(width, width, width, 3, h, w)))
                breakdown.append((f"stem.ds{i}.pw",
                                  _conv_madds(width, width, 1, 1, h, w)))
        for stage in self.stages:
            part, h, w = stage.madds(spec.stage_cfg[stage.name], h, w)
            breakdown.extend(part)
        tokens = 1
        breakdown.append(("head", spec.head_in * self.space.n_classes * tokens))
        total = int(sum(m for _, m in breakdown))
        return ComplexityReport(madds=total, breakdown=breakdown)

    def supernet_total_madds(self) -> int:
        return self.madds_of(largest_spec(self.space)).madds

    # ------------------------------------------------------------------
    # parameters / state
    # ------------------------------------------------------------------
    def parameters(self) -> dict:
        """Supernet weights (shared W), excluding gate parameters."""
        out = {}
        if self.stem:
            for k, v in self.stem.params().items():
                out[f"stem.{k}"] = v
        for stage in self.stages:
            out.update(stage.params())
        out["head.weight"] = self.head.weight
        out["head.bias"] = self.head.bias
        return out

    def gate_parameters(self) -> dict:
        out = {}
        for g, gate in self.gates.items():
            for k, v in gate.params().items():
                out[f"gate{g}.{k}"] = v
        return out

    def all_bn_layers(self):
        out = []
        if self.stem:
            out.extend((f"stem.bn{i}", bn)
                       for i, bn in enumerate(self.stem.bn_layers()))
        for stage in self.stages:
            out.extend(stage.bn_layers())
        return out

    def recalibrate_bn(self, batch_iter, n_batches: int = 50):
        """Cumulative-average route statistics over the given batches.

        Runs every route of the aligned (diagonal) route ladder so each
        normalization layer sees all of its locally selectable routes.
        """
        counts = self.space.routes_per_gate()
        ladder = range(max(counts)) if counts else range(1)
        for t in ladder:
            signals = [min(t, n - 1) for n in counts]
            spec = resolve_subnet(self.space, signals)
            seen = 0
            for batch in batch_iter():
                if seen >= n_batches:
                    break
                with no_grad():
                    self.forward_route(batch, spec, training=False, recal=True)
                seen += 1
            if seen == 0:
                raise UsageError("recalibration iterator yielded no batches")
        for _, bn in self.all_bn_layers():
            bn.finish_recalibration()

    def state_dict(self) -> dict:
        arrays = {name: t.data for name, t in self.parameters().items()}
        for name, t in self.gate_parameters().items():
            arrays[name] = t.data
        for lname, bn in self.all_bn_layers():
            for t, (mu, sigma) in bn.stats.items():
                arrays[f"{lname}.mu.route{t}"] = mu
                arrays[f"{lname}.sigma.route{t}"] = sigma
        return arrays

    def load_state_dict(self, arrays: dict, strict: bool = True):
        params = {**self.parameters(), **self.gate_parameters()}
        bn_by_name = dict(self.all_bn_layers())
        for name, arr in arrays.items():
            if ".mu.route" in name or ".sigma.route" in name:
                base, _, tail = name.rpartition(".route")
                lname, kind = base.rsplit(".", 1)
                bn = bn_by_name.get(lname)
                if bn is None:
                    if strict:
                        raise KeyError(f"no normalization layer {lname!r}")
                    continue
                t = int(tail)
                mu, sigma = bn.stats.get(t, (None, None))
                if kind == "mu":
                    bn.stats[t] = (arr.astype(np.float32), sigma)
                else:
                    bn.stats[t] = (mu, arr.astype(np.float32))
                continue
            tgt = params.get(name)
            if tgt is None:
                if strict:
                    raise KeyError(f"unexpected array {name!r}")
                continue
            if tgt.data.shape != arr.shape:
                raise ValueError(
                    f"shape mismatch for {name!r}: {tgt.data.shape} vs {arr.shape}"
                )
            tgt.data[...] = arr
        # drop half-filled stats entries (forced loads across spaces)
        for bn in bn_by_name.values():
            bn.stats = {t: (m, s) for t, (m, s) in bn.stats.items()
                        if m is not None and s is not None}

    # ------------------------------------------------------------------
    # stand-alone extraction
    # ------------------------------------------------------------------
    def extract_static(self, spec: SubNetworkSpec) -> "Supernet":
        """Materialize the route as a stand-alone network of exactly its
        dimensions, copying sliced weights into fresh contiguous buffers."""
        from .standalone import extract_static

        return extract_static(self, spec)


def build_supernet(space: RoutingSpace, seed: int = 0) -> Supernet:
    return Supernet(space, seed=seed)
