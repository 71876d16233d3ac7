"""Declarative routing spaces and their resolution into sub-network specs.

Config format (line oriented, ``#`` comments):

    net: input=3x32x32; classes=10[; stem=efficient; stem_width=24; patch=4]
    stage NAME: type=conv|dsconv|resblock|vitblock; channels=[min:max:step]|{a,b}|N;
                kernel={...}|N; dilation={...}; padding=[...]; stride=N;
                depth=[...]|N; gate=yes|no[; routes=N]
    vitblock dims: embed=, qkv=, heads=, mlp=, depth=

Grids are ascending, route 0 cheapest.  A gate's route count is the longest
grid in its scope (every stage until the next gated stage inherits the
signal); shorter grids are index-interpolated monotonically, so a route is
a monotone tuple across all dimensions it controls.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

__all__ = [
    "SpaceConfigError",
    "StageDef",
    "RoutingSpace",
    "SubNetworkSpec",
    "parse_routing_space",
    "load_preset",
    "resolve_subnet",
    "sample_sandwich",
    "grid_index",
]

STAGE_TYPES = ("conv", "dsconv", "resblock", "vitblock")
CONV_DIMS = ("channels", "kernel", "dilation", "padding", "depth")
VIT_DIMS = ("embed", "qkv", "heads", "mlp", "depth")


class SpaceConfigError(ValueError):
    pass


@dataclass
class StageDef:
    name: str
    kind: str
    grids: dict = field(default_factory=dict)
    stride: int = 1
    gate: bool = False
    routes: int | None = None  # explicit route count on gated stages


@dataclass
class RoutingSpace:
    input_shape: tuple          # (C, H, W)
    n_classes: int
    stages: list
    stem: str | None = None     # None or "efficient"
    stem_width: int = 24
    patch: int = 4
    gate_hidden: int = 16
    source_text: str = ""

    def gate_stage_indices(self) -> list:
        return [i for i, s in enumerate(self.stages) if s.gate]

    def controlling_gate(self, stage_idx: int) -> int | None:
        """Index (into gate list) of the gate whose signal this stage inherits."""
        gates = self.gate_stage_indices()
        owner = None
        for g, gs in enumerate(gates):
            if gs <= stage_idx:
                owner = g
        return owner

    def routes_per_gate(self) -> list:
        gates = self.gate_stage_indices()
        counts = []
        for g, gs in enumerate(gates):
            end = gates[g + 1] if g + 1 < len(gates) else len(self.stages)
            explicit = self.stages[gs].routes
            longest = max(
                (len(v) for s in self.stages[gs:end] for v in s.grids.values()),
                default=1,
            )
            counts.append(explicit if explicit is not None else longest)
        return counts

    def num_paths(self) -> int:
        out = 1
        for n in self.routes_per_gate():
            out *= n
        return out

    def space_hash(self) -> str:
        canon = "\n".join(
            ln.strip() for ln in self.source_text.splitlines()
            if ln.strip() and not ln.strip().startswith("#")
        )
        return hashlib.sha256(canon.encode()).hexdigest()[:16]


@dataclass
class SubNetworkSpec:
    """Fully resolved slicing dims, one entry per stage, plus the head."""

    route_indices: tuple        # local route per gate
    stage_cfg: dict             # stage name -> resolved dims (incl. c_in, t)
    head_in: int                # input width of the classifier

    def stage(self, name: str) -> dict:
        return self.stage_cfg[name]


# ----------------------------------------------------------------------
# parsing
# ----------------------------------------------------------------------
def _parse_grid(text: str, line_no: int, key: str) -> list:
    text = text.strip()
    try:
        if text.startswith("[") and text.endswith("]"):
            parts = [p.strip() for p in text[1:-1].split(":")]
            if len(parts) == 2:
                lo, hi, step = int(parts[0]), int(parts[1]), 1
            elif len(parts) == 3:
                lo, hi, step = int(parts[0]), int(parts[1]), int(parts[2])
            else:
                raise ValueError("expected [min:max] or [min:max:step]")
            if step <= 0 or hi < lo:
                raise ValueError("grid must ascend")
            return list(range(lo, hi + 1, step))
        if text.startswith("{") and text.endswith("}"):
            items = [p.strip() for p in text[1:-1].split(",") if p.strip()]
            if not items:
                raise ValueError("empty grid")
            vals = [float(p) if "." in p else int(p) for p in items]
            if any(b <= a for a, b in zip(vals, vals[1:])):
                raise ValueError("grid must ascend")
            return vals
        return [float(text) if "." in text else int(text)]
    except ValueError as e:
        raise SpaceConfigError(f"line {line_no}: bad grid for {key!r}: {e}") from e


def _parse_kv(text: str, line_no: int) -> dict:
    out = {}
    for item in text.split(";"):
        item = item.strip()
        if not item:
            continue
        if "=" not in item:
            raise SpaceConfigError(f"line {line_no}: expected key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def parse_routing_space(text: str) -> RoutingSpace:
    input_shape = None
    n_classes = None
    stem = None
    stem_width = 24
    patch = 4
    gate_hidden = 16
    stages: list[StageDef] = []

    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("net:"):
            kv = _parse_kv(line[len("net:"):], line_no)
            if "input" in kv:
                dims = kv["input"].lower().split("x")
                if len(dims) != 3:
                    raise SpaceConfigError(
                        f"line {line_no}: input must be CxHxW, got {kv['input']!r}"
                    )
                input_shape = tuple(int(d) for d in dims)
            if "classes" in kv:
                n_classes = int(kv["classes"])
            stem = kv.get("stem", stem)
            stem_width = int(kv.get("stem_width", stem_width))
            patch = int(kv.get("patch", patch))
            gate_hidden = int(kv.get("gate_hidden", gate_hidden))
            continue
        if line.startswith("stage "):
            headed, _, body = line.partition(":")
            name = headed[len("stage "):].strip()
            if not name or not body:
                raise SpaceConfigError(f"line {line_no}: malformed stage line")
            kv = _parse_kv(body, line_no)
            kind = kv.pop("type", None)
            if kind not in STAGE_TYPES:
                raise SpaceConfigError(
                    f"line {line_no}: stage type must be one of {STAGE_TYPES}, "
                    f"got {kind!r}"
                )
            stage = StageDef(name=name, kind=kind)
            stage.stride = int(kv.pop("stride", 1))
            stage.gate = kv.pop("gate", "no").lower() in ("yes", "true", "1")
            if "routes" in kv:
                stage.routes = int(kv.pop("routes"))
            dims = VIT_DIMS if kind == "vitblock" else CONV_DIMS
            for key, val in kv.items():
                if key not in dims:
                    raise SpaceConfigError(
                        f"line {line_no}: unknown key {key!r} for {kind} stage"
                    )
                stage.grids[key] = _parse_grid(val, line_no, key)
            if kind == "vitblock":
                missing = [d for d in ("embed", "qkv", "heads") if d not in stage.grids]
            else:
                missing = [] if "channels" in stage.grids else ["channels"]
            if missing:
                raise SpaceConfigError(
                    f"line {line_no}: stage {name!r} missing {missing}"
                )
            stage.grids.setdefault("depth", [1])
            stages.append(stage)
            continue
        raise SpaceConfigError(f"line {line_no}: unrecognized line {raw!r}")

    if input_shape is None or n_classes is None:
        raise SpaceConfigError("missing 'net:' line with input= and classes=")
    if not stages:
        raise SpaceConfigError("no stages defined")

    space = RoutingSpace(
        input_shape=input_shape, n_classes=n_classes, stages=stages,
        stem=stem, stem_width=stem_width, patch=patch,
        gate_hidden=gate_hidden, source_text=text,
    )
    _validate(space)
    return space


def _validate(space: RoutingSpace):
    for s in space.stages:
        for key, grid in s.grids.items():
            if not grid:
                raise SpaceConfigError(f"stage {s.name!r}: empty grid for {key!r}")
            if any(b <= a for a, b in zip(grid, grid[1:])):
                raise SpaceConfigError(
                    f"stage {s.name!r}: grid for {key!r} must strictly ascend"
                )
        if s.kind == "vitblock":
            heads = s.grids["heads"]
            qkv = s.grids["qkv"]
            d_head = max(qkv) // max(heads)
            if d_head * max(heads) != max(qkv):
                raise SpaceConfigError(
                    f"stage {s.name!r}: qkv max {max(qkv)} not divisible by "
                    f"heads max {max(heads)}"
                )
    if not space.gate_stage_indices():
        # a space with no gate is a static network; allowed for experiments
        return
    gates = space.gate_stage_indices()
    counts = space.routes_per_gate()
    for g, gs in enumerate(gates):
        end = gates[g + 1] if g + 1 < len(gates) else len(space.stages)
        n = counts[g]
        if n < 1:
            raise SpaceConfigError(f"gate at stage {space.stages[gs].name!r}: "
                                   f"no routes")
        for s in space.stages[gs:end]:
            for key, grid in s.grids.items():
                if len(grid) > n:
                    raise SpaceConfigError(
                        f"stage {s.name!r}: grid {key!r} has {len(grid)} values "
                        f"but the gate exposes only {n} routes"
                    )
            # joint kernel/dilation combinations must fit the stored kernel
            if s.kind in ("conv", "dsconv"):
                kg = s.grids.get("kernel", [3])
                lg = s.grids.get("dilation", [1])
                k_max = max(kg)
                for t in range(n):
                    k = kg[grid_index(t, n, len(kg))]
                    l = lg[grid_index(t, n, len(lg))]
                    if (k - 1) * l + 1 > k_max:
                        raise SpaceConfigError(
                            f"stage {s.name!r}: route {t} needs kernel span "
                            f"{(k - 1) * l + 1} > stored {k_max}"
                        )
            if s.kind == "vitblock":
                qg, hg = s.grids["qkv"], s.grids["heads"]
                d_head = max(qg) // max(hg)
                for t in range(n):
                    q = qg[grid_index(t, n, len(qg))]
                    h = hg[grid_index(t, n, len(hg))]
                    if q != h * d_head:
                        raise SpaceConfigError(
                            f"stage {s.name!r}: route {t} picks qkv={q} but "
                            f"{h} heads x head dim {d_head} = {h * d_head}"
                        )


def load_preset(name: str) -> RoutingSpace:
    """Load a shipped .cfg by name ('ds-mbnet') or parse a file path."""
    import importlib.resources as res
    from pathlib import Path

    if name.endswith(".cfg") and Path(name).exists():
        return parse_routing_space(Path(name).read_text())
    fname = name if name.endswith(".cfg") else f"{name}.cfg"
    ref = res.files("dsnet").joinpath("presets", fname)
    if not ref.is_file():
        raise SpaceConfigError(f"unknown preset or missing file: {name!r}")
    return parse_routing_space(ref.read_text())


# ----------------------------------------------------------------------
# resolution
# ----------------------------------------------------------------------
def grid_index(t: int, n_routes: int, grid_len: int) -> int:
    """Monotone index interpolation of route t onto a shorter grid."""
    if grid_len == 1 or n_routes == 1:
        return 0 if grid_len == 1 else min(t, grid_len - 1)
    return int(round(t * (grid_len - 1) / (n_routes - 1)))


def _signal_to_index(signal, n_routes: int) -> int:
    if isinstance(signal, (int, np.integer)):
        t = int(signal)
    elif isinstance(signal, Tensor):
        t = int(np.argmax(signal.data))
    else:
        t = int(np.argmax(np.asarray(signal)))
    if not 0 <= t < n_routes:
        raise IndexError(f"route index {t} out of range [0, {n_routes})")
    return t


def resolve_subnet(space: RoutingSpace, signals) -> SubNetworkSpec:
    """Deterministically resolve gate signals into per-stage slicing dims.

    ``signals``: one entry per gate, either a route index or a one-hot
    vector.  Stages without their own gate inherit the signal of the last
    gated stage before them; stages ahead of any gate run their maxima.
    """
    gates = space.gate_stage_indices()
    counts = space.routes_per_gate()
    if len(signals) != len(gates):
        raise ValueError(
            f"expected {len(gates)} gate signals, got {len(signals)}"
        )
    ts = [_signal_to_index(sig, n) for sig, n in zip(signals, counts)]

    stage_cfg: dict = {}
    width = space.stem_width if space.stem else space.input_shape[0]
    for idx, s in enumerate(space.stages):
        owner = space.controlling_gate(idx)
        if owner is None:
            t, n = 0, 1
            pick = lambda grid: grid[-1]  # pre-gate stages run their maxima
        else:
            t, n = ts[owner], counts[owner]
            pick = lambda grid: grid[grid_index(t, n, len(grid))]
        cfg = {"t": t, "c_in": width, "stride": s.stride, "kind": s.kind}
        for key, grid in s.grids.items():
            cfg[key] = pick(grid)
        if s.kind == "vitblock":
            d_head = max(s.grids["qkv"]) // max(s.grids["heads"])
            cfg["d_head"] = d_head
            cfg["qkv"] = cfg["heads"] * d_head
            cfg["d_mlp"] = int(round(cfg.get("mlp", 4) * cfg["embed"]))
            width = cfg["embed"]
        else:
            cfg.setdefault("kernel", 3)
            cfg.setdefault("dilation", 1)
            cfg.setdefault("padding", max(s.grids.get("padding", [s.grids.get("kernel", [3])[-1] // 2])))
            width = cfg["channels"]
        stage_cfg[s.name] = cfg
    return SubNetworkSpec(route_indices=tuple(ts), stage_cfg=stage_cfg,
                          head_in=width)


def smallest_spec(space: RoutingSpace) -> SubNetworkSpec:
    return resolve_subnet(space, [0] * len(space.gate_stage_indices()))


def largest_spec(space: RoutingSpace) -> SubNetworkSpec:
    return resolve_subnet(space, [n - 1 for n in space.routes_per_gate()])


def sample_sandwich(space: RoutingSpace, k: int, rng: np.random.Generator) -> list:
    """[smallest, k uniform-random, largest], independent per gate."""
    counts = space.routes_per_gate()
    specs = [smallest_spec(space)]
    for _ in range(k):
        specs.append(
            resolve_subnet(space, [int(rng.integers(0, n)) for n in counts])
        )
    specs.append(largest_spec(space))
    return specs
