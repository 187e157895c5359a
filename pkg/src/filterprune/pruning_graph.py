"""Channel-coupling discovery and physical filter removal.

The network is traced with torch.fx and every tensor edge is assigned a
channel space. Convs open a new space, BN/activation/pooling pass it
through, additions merge the spaces of their operands, and flatten feeds
a linear layer with ``H*W`` columns per channel. All slices that live in
one space are removed together, which keeps residual junctions aligned.
"""
from __future__ import annotations

import logging
import math
import operator
from dataclasses import dataclass, field

import torch
import torch.fx as fx
import torch.nn as nn
import torch.nn.functional as F
from torch.fx.passes.shape_prop import ShapeProp

from .model_zoo import LayerInfo, count_params

logger = logging.getLogger(__name__)

_PASS_MODULES = (nn.ReLU, nn.ReLU6, nn.LeakyReLU, nn.Identity, nn.Dropout, nn.MaxPool2d,
                 nn.AvgPool2d, nn.AdaptiveAvgPool2d, nn.AdaptiveMaxPool2d)
_PASS_FUNCS = {F.relu, torch.relu, F.relu6, F.leaky_relu, F.max_pool2d, F.avg_pool2d,
               F.adaptive_avg_pool2d, F.adaptive_max_pool2d, F.dropout}
_PASS_METHODS = {"relu", "relu_", "contiguous"}
_ADD_FUNCS = {operator.add, operator.iadd, torch.add}
_FLATTEN_FUNCS = {torch.flatten}
_FLATTEN_METHODS = {"flatten", "view", "reshape"}


class UnsupportedTopology(ValueError):
    pass


class SurgeryError(ValueError):
    pass


@dataclass
class ChannelSpace:
    """One set of coupled channels (a junction may merge several convs)."""
    sid: int
    channels: int
    producers: list[str] = field(default_factory=list)   # conv names (out axis)
    norms: list[str] = field(default_factory=list)       # bn names
    consumers: list[str] = field(default_factory=list)   # conv names (in axis)
    linears: list[tuple[str, int]] = field(default_factory=list)  # (name, cols per channel)
    junctions: list[str] = field(default_factory=list)
    from_input: bool = False
    out_bias: dict[str, bool] = field(default_factory=dict)

    @property
    def prunable(self) -> bool:
        return bool(self.producers) and not self.from_input

    def members(self, k: int) -> list[tuple[str, str, object]]:
        out = [(p, "out", k) for p in self.producers]
        out += [(b, "norm-channel", k) for b in self.norms]
        out += [(c, "in", k) for c in self.consumers]
        out += [(lin, "in", range(k * m, (k + 1) * m)) for lin, m in self.linears]
        return out


@dataclass(frozen=True)
class PruningGroup:
    driver: tuple[str, int]
    members: tuple
    flops_weight: int
    space: int


@dataclass
class SurgeryReceipt:
    layer: str
    indices: list[int]
    removed: list[tuple[str, str, int]]
    params_before: int
    params_after: int
    flops_before: int | None = None
    flops_after: int | None = None
    removed_per_layer: dict[str, int] = field(default_factory=dict)


class ChannelGraph:
    """Result of tracing: channel spaces plus per-layer lookup tables."""

    def __init__(self, spaces, space_of_conv, layer_infos, conv_out_hw, linear_out, member_only):
        self.spaces: dict[int, ChannelSpace] = spaces
        self.space_of_conv: dict[str, int] = space_of_conv
        self.layer_infos: list[LayerInfo] = layer_infos
        self.conv_out_hw: dict[str, int] = conv_out_hw
        self.linear_out: dict[str, int] = linear_out
        self.member_only = set(member_only)

    def space(self, layer: str) -> ChannelSpace:
        if layer not in self.space_of_conv:
            raise SurgeryError(f"unknown conv layer {layer!r}")
        return self.spaces[self.space_of_conv[layer]]

    def prunable_layers(self) -> list[str]:
        return [li.name for li in self.layer_infos if li.prunable]

    def per_filter_flops(self, net: nn.Module, sid: int) -> int:
        """MACs removed by deleting one channel of space ``sid`` at current shapes."""
        mods = dict(net.named_modules())
        sp = self.spaces[sid]
        total = 0
        for p in sp.producers:
            c = mods[p]
            total += (c.in_channels // c.groups) * c.kernel_size[0] * c.kernel_size[1] * self.conv_out_hw[p]
        for q in sp.consumers:
            c = mods[q]
            total += c.out_channels * c.kernel_size[0] * c.kernel_size[1] * self.conv_out_hw[q]
        for lin, m in sp.linears:
            total += mods[lin].out_features * m
        return total


def _union(parent, a, b):
    ra, rb = _find(parent, a), _find(parent, b)
    if ra != rb:
        parent[max(ra, rb)] = min(ra, rb)


def _find(parent, a):
    while parent[a] != a:
        parent[a] = parent[parent[a]]
        a = parent[a]
    return a


def trace_channels(net: nn.Module, input_shape=None) -> ChannelGraph:
    """Trace ``net`` and build its channel spaces; rejects unsupported ops."""
    input_shape = tuple(input_shape or net.input_shape)
    gm = fx.symbolic_trace(net)
    was_training = net.training
    net.eval()
    try:
        with torch.no_grad():
            ShapeProp(gm).propagate(torch.zeros(1, *input_shape))
    finally:
        net.train(was_training)
    mods = dict(net.named_modules())

    parent: dict[int, int] = {}
    raw: dict[int, dict] = {}

    def new_space(channels, from_input=False):
        sid = len(parent)
        parent[sid] = sid
        raw[sid] = {"channels": channels, "producers": [], "norms": [], "consumers": [],
                    "linears": [], "junctions": [], "from_input": from_input}
        return sid

    def shape(node):
        meta = node.meta.get("tensor_meta")
        return tuple(meta.shape) if meta is not None else None

    # value kinds: ("ch", sid) spatial channel tensor; ("flat", sid, mult); ("opaque",)
    val: dict[fx.Node, tuple] = {}
    infos: list[LayerInfo] = []
    conv_space: dict[str, int] = {}
    conv_hw: dict[str, int] = {}
    linear_out: dict[str, int] = {}

    def channel_input(node, what):
        v = val[node.args[0]]
        if v[0] != "ch":
            raise UnsupportedTopology(f"{what} expects a channel tensor")
        return v[1]

    for node in gm.graph.nodes:
        if node.op == "placeholder":
            shp = shape(node)
            val[node] = ("ch", new_space(shp[1], from_input=True))
        elif node.op == "get_attr":
            raise UnsupportedTopology(f"parameter access {node.target!r} in forward")
        elif node.op == "output":
            continue
        elif node.op == "call_module":
            mod = mods[node.target]
            name = node.target
            if isinstance(mod, nn.Conv2d):
                if mod.groups != 1:
                    raise UnsupportedTopology(f"grouped conv {name!r} is not supported")
                sid_in = channel_input(node, name)
                raw[sid_in]["consumers"].append(name)
                out_shape = shape(node)
                conv_hw[name] = out_shape[2] * out_shape[3]
                sid = new_space(mod.out_channels)
                raw[sid]["producers"].append(name)
                conv_space[name] = sid
                val[node] = ("ch", sid)
                infos.append(LayerInfo(name, "conv", mod.out_channels, mod.in_channels,
                                       mod.kernel_size[0]))
            elif isinstance(mod, nn.BatchNorm2d):
                sid = channel_input(node, name)
                raw[sid]["norms"].append(name)
                val[node] = ("ch", sid)
                infos.append(LayerInfo(name, "norm", mod.num_features, mod.num_features))
            elif isinstance(mod, _PASS_MODULES):
                v = val[node.args[0]]
                val[node] = v
                kind = "activation" if isinstance(mod, (nn.ReLU, nn.ReLU6, nn.LeakyReLU)) else "pool"
                infos.append(LayerInfo(name, kind))
            elif isinstance(mod, nn.Flatten):
                val[node] = _flatten_value(val[node.args[0]], shape(node.args[0]))
            elif isinstance(mod, nn.Linear):
                v = val[node.args[0]]
                if v[0] == "flat":
                    raw[v[1]]["linears"].append((name, v[2]))
                elif v[0] != "opaque":
                    raise UnsupportedTopology(f"linear {name!r} applied to a spatial tensor")
                linear_out[name] = mod.out_features
                val[node] = ("opaque",)
                infos.append(LayerInfo(name, "linear", mod.out_features, mod.in_features))
            else:
                raise UnsupportedTopology(f"module {name!r} of type {type(mod).__name__}")
        elif node.op == "call_function":
            fn = node.target
            if fn in _ADD_FUNCS:
                operands = [a for a in node.args if isinstance(a, fx.Node)]
                kinds = [val[a] for a in operands]
                if len(operands) != 2 or any(k[0] != "ch" for k in kinds):
                    raise UnsupportedTopology(f"addition {node.name!r} with non-channel operands")
                _union(parent, kinds[0][1], kinds[1][1])
                root = _find(parent, kinds[0][1])
                raw[root]["junctions"].append(node.name)
                val[node] = ("ch", root)
                infos.append(LayerInfo(node.name, "add-junction"))
            elif fn in _PASS_FUNCS:
                val[node] = val[node.args[0]]
            elif fn in _FLATTEN_FUNCS:
                val[node] = _flatten_value(val[node.args[0]], shape(node.args[0]))
            elif fn is torch.cat:
                raise UnsupportedTopology(f"concatenation {node.name!r} is not supported")
            else:
                raise UnsupportedTopology(f"function {getattr(fn, '__name__', fn)!r}")
        elif node.op == "call_method":
            if node.target in _PASS_METHODS:
                val[node] = val[node.args[0]]
            elif node.target in _FLATTEN_METHODS:
                val[node] = _flatten_value(val[node.args[0]], shape(node.args[0]))
            else:
                raise UnsupportedTopology(f"method {node.target!r}")

    # merge union-find classes into final spaces
    spaces: dict[int, ChannelSpace] = {}
    for sid, r in raw.items():
        root = _find(parent, sid)
        sp = spaces.get(root)
        if sp is None:
            sp = spaces[root] = ChannelSpace(root, raw[root]["channels"])
        if r["channels"] != sp.channels:
            raise UnsupportedTopology("junction operands disagree on channel count")
        sp.producers += r["producers"]
        sp.norms += r["norms"]
        sp.consumers += r["consumers"]
        sp.linears += r["linears"]
        sp.junctions += r["junctions"]
        sp.from_input |= r["from_input"]
    conv_space = {k: _find(parent, v) for k, v in conv_space.items()}
    for sp in spaces.values():
        for p in sp.producers:
            sp.out_bias[p] = mods[p].bias is not None

    member_only = getattr(net, "member_only", set())
    final_infos = []
    for li in infos:
        if li.kind == "conv":
            ok = spaces[conv_space[li.name]].prunable and li.name not in member_only
            li = LayerInfo(li.name, li.kind, li.out_channels, li.in_channels, li.kernel, ok)
        final_infos.append(li)
    return ChannelGraph(spaces, conv_space, final_infos, conv_hw, linear_out, member_only)


def _flatten_value(v, in_shape):
    if v[0] != "ch":
        return ("opaque",)
    if in_shape is None or len(in_shape) != 4:
        raise UnsupportedTopology("flatten of a non-4D tensor")
    return ("flat", v[1], in_shape[2] * in_shape[3])


def layer_table(net: nn.Module) -> list[LayerInfo]:
    return trace_channels(net).layer_infos


def prunable_layers(net: nn.Module) -> list[str]:
    return trace_channels(net).prunable_layers()


def build_groups(net: nn.Module, graph: ChannelGraph | None = None) -> dict[tuple[str, int], PruningGroup]:
    """Map every (conv, filter index) of a prunable space to its pruning group.

    All producer convs of a space (including downsample 1x1s) map to the
    same index-aligned group, so pruning through any of them is identical.
    """
    graph = graph or trace_channels(net)
    groups = {}
    for sp in graph.spaces.values():
        if not sp.prunable:
            continue
        w = graph.per_filter_flops(net, sp.sid)
        drivers = [p for p in sp.producers if p not in graph.member_only] or sp.producers
        for k in range(sp.channels):
            g = PruningGroup(driver=(drivers[0], k), members=tuple(sp.members(k)),
                             flops_weight=w, space=sp.sid)
            for p in sp.producers:
                groups[(p, k)] = g
    return groups


def format_groups(groups: dict) -> str:
    """One line per distinct group, for debugging and reports."""
    seen = set()
    lines = []
    for g in groups.values():
        key = (g.space, g.driver[1])
        if key in seen:
            continue
        seen.add(key)
        parts = []
        for name, axis, idx in g.members:
            if isinstance(idx, range):
                parts.append(f"{name}.{axis}[{idx.start}:{idx.stop}]")
            else:
                parts.append(f"{name}.{axis}[{idx}]")
        lines.append(f"{g.driver[0]}[{g.driver[1]}] flops={g.flops_weight}: " + ", ".join(parts))
    return "\n".join(lines)


def remove_filters(net: nn.Module, layer: str, indices, graph: ChannelGraph | None = None,
                   measure_flops: bool = True) -> SurgeryReceipt:
    """Physically delete filters ``indices`` of ``layer`` and every coupled slice.

    Validation happens before any tensor is touched, so a rejected call
    leaves the network unchanged.
    """
    from .flops_meter import flops

    graph = graph or trace_channels(net)
    sp = graph.space(layer)
    if not sp.prunable:
        raise SurgeryError(f"{layer!r} feeds a non-prunable channel space")
    indices = [int(i) for i in indices]
    idx = sorted(set(indices))
    if len(idx) != len(indices):
        raise SurgeryError("duplicate filter indices")
    mods = dict(net.named_modules())
    n = mods[layer].out_channels
    if any(mods[p].out_channels != n for p in sp.producers):
        raise SurgeryError(f"stale channel graph for {layer!r}")
    bad = [i for i in idx if i < 0 or i >= n]
    if bad:
        raise SurgeryError(f"filter indices {bad} out of range for {layer!r} ({n} filters)")
    if len(idx) >= n:
        raise SurgeryError(f"removing {len(idx)} of {n} filters would empty {layer!r}")

    shape_in = getattr(net, "input_shape", None)
    params_before = count_params(net)
    flops_before = flops(net, shape_in).total if (measure_flops and shape_in) else None
    if not idx:
        return SurgeryReceipt(layer, [], [], params_before, params_before, flops_before, flops_before)

    drop = set(idx)
    keep = torch.tensor([i for i in range(n) if i not in drop], dtype=torch.long)
    removed = []
    for p in sp.producers:
        _slice_conv_out(mods[p], keep)
        removed += [(p, "out", i) for i in idx]
    for b in sp.norms:
        _slice_norm(mods[b], keep)
        removed += [(b, "norm-channel", i) for i in idx]
    for c in sp.consumers:
        _slice_conv_in(mods[c], keep)
        removed += [(c, "in", i) for i in idx]
    for lin, m in sp.linears:
        cols = torch.cat([torch.arange(k * m, (k + 1) * m) for k in keep.tolist()])
        _slice_linear_in(mods[lin], cols)
        removed += [(lin, "in", i) for i in idx]

    params_after = count_params(net)
    flops_after = flops(net, shape_in).total if (measure_flops and shape_in) else None
    return SurgeryReceipt(layer, idx, removed, params_before, params_after, flops_before,
                          flops_after, {p: len(idx) for p in sp.producers})


def _param(t):
    return nn.Parameter(t.detach().clone())


def _slice_conv_out(conv: nn.Conv2d, keep):
    conv.weight = _param(conv.weight.data[keep])
    if conv.bias is not None:
        conv.bias = _param(conv.bias.data[keep])
    conv.out_channels = len(keep)


def _slice_conv_in(conv: nn.Conv2d, keep):
    conv.weight = _param(conv.weight.data[:, keep])
    conv.in_channels = len(keep)


def _slice_norm(bn: nn.BatchNorm2d, keep):
    bn.weight = _param(bn.weight.data[keep])
    bn.bias = _param(bn.bias.data[keep])
    bn.running_mean = bn.running_mean[keep].clone()
    bn.running_var = bn.running_var[keep].clone()
    bn.num_features = len(keep)


def _slice_linear_in(lin: nn.Linear, cols):
    lin.weight = _param(lin.weight.data[:, cols])
    lin.in_features = len(cols)


def prune_allowance(original: int, current: int, r_max: float) -> int:
    """How many more filters may go before the layer hits its R_max cap."""
    cap = math.floor(original * r_max + 1e-9)
    return max(0, min(cap - (original - current), current - 1))


def eligible_filters(net: nn.Module, layer: str, original_counts: dict, r_max: float,
                     step: int = 1) -> list[int]:
    """Current filter indices of ``layer`` if ``step`` more may be pruned, else []."""
    if not 0.0 < r_max < 1.0:
        raise ValueError("R_max must lie in (0, 1)")
    current = dict(net.named_modules())[layer].out_channels
    if prune_allowance(original_counts[layer], current, r_max) < step:
        return []
    return list(range(current))
