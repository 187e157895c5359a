"""FLOPs accounting and per-layer exploration steps.

Costs are multiply-accumulates (MACs): conv = N_out * H_out * W_out * N_in * K^2,
linear = in * out. Normalisation, activations and pooling count as zero.
Everything downstream uses ratios, so the MAC-vs-FLOP factor cancels.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn

HEADER = "# FLOPs counted as MACs (multiply-accumulates); norm/activation/pool = 0"


@dataclass
class FlopsReport:
    total: int
    per_layer: dict[str, int]
    input_shape: tuple[int, ...]

    def table(self) -> str:
        width = max([len(n) for n in self.per_layer] + [5])
        rows = [HEADER, f"{'layer':<{width}}  MACs"]
        rows += [f"{n:<{width}}  {v}" for n, v in self.per_layer.items()]
        rows.append(f"{'total':<{width}}  {self.total}")
        return "\n".join(rows)

    def to_dict(self) -> dict:
        return {"total": self.total, "per_layer": dict(self.per_layer),
                "input_shape": list(self.input_shape)}


@dataclass
class ExplorationPlan:
    steps: dict[str, int]
    P_s: float
    baseline_total: int
    mode: str = "measured"
    analytic_steps: dict[str, int] = field(default_factory=dict)
    measured_steps: dict[str, int] = field(default_factory=dict)
    per_filter_delta: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"P_s": self.P_s, "baseline_total": self.baseline_total, "mode": self.mode,
                "steps": dict(self.steps), "analytic_steps": dict(self.analytic_steps),
                "measured_steps": dict(self.measured_steps),
                "per_filter_delta": dict(self.per_filter_delta)}


@torch.no_grad()
def flops(net: nn.Module, input_shape=None) -> FlopsReport:
    """Count MACs of conv and linear layers for one sample of ``input_shape``."""
    input_shape = tuple(input_shape or net.input_shape)
    per_layer: dict[str, int] = {}
    hooks = []

    def conv_hook(name):
        def hook(mod, inp, out):
            k = mod.kernel_size[0] * mod.kernel_size[1]
            per_layer[name] = int(out[0].numel() * (mod.in_channels // mod.groups) * k)
        return hook

    def linear_hook(name):
        def hook(mod, inp, out):
            rows = out[0].numel() // mod.out_features
            per_layer[name] = int(rows * mod.in_features * mod.out_features)
        return hook

    for name, mod in net.named_modules():
        if isinstance(mod, nn.Conv2d):
            hooks.append(mod.register_forward_hook(conv_hook(name)))
        elif isinstance(mod, nn.Linear):
            hooks.append(mod.register_forward_hook(linear_hook(name)))
    was_training = net.training
    net.eval()
    try:
        net(torch.zeros(1, *input_shape))
    except RuntimeError as exc:
        raise ValueError(f"shape inference failed for input {input_shape}: {exc}") from exc
    finally:
        for h in hooks:
            h.remove()
        net.train(was_training)
    return FlopsReport(sum(per_layer.values()), per_layer, input_shape)


def pruning_rate(base: FlopsReport | int, pruned: FlopsReport | int) -> float:
    """Fraction of baseline FLOPs removed: 1 - pruned / base."""
    b = base.total if isinstance(base, FlopsReport) else base
    p = pruned.total if isinstance(pruned, FlopsReport) else pruned
    if isinstance(base, FlopsReport) and isinstance(pruned, FlopsReport):
        if tuple(base.input_shape) != tuple(pruned.input_shape):
            raise ValueError("reports were measured at different input shapes")
    if b <= 0:
        raise ValueError("baseline FLOPs must be positive")
    return 1.0 - p / b


def layer_contribution(net: nn.Module, layer: str, report: FlopsReport | None = None) -> int:
    """The layer's own MAC entry (consumer in-channel share is not included)."""
    report = report or flops(net)
    if layer not in report.per_layer:
        raise KeyError(f"unknown layer {layer!r}")
    return report.per_layer[layer]


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def analytic_step(P_s: float, total: int, n_out: int, contribution: int) -> int:
    if contribution <= 0:
        raise ValueError("zero contribution")
    return max(1, round_half_up(P_s * total * n_out / contribution))


def measured_delta(net: nn.Module, layer: str, graph=None) -> int:
    """Re-measure total FLOPs after removing one filter of ``layer`` in a clone."""
    from .pruning_graph import remove_filters
    clone = copy.deepcopy(net)
    before = flops(clone).total
    remove_filters(clone, layer, [0], graph=graph, measure_flops=False)
    return before - flops(clone).total


def exploration_steps(net: nn.Module, P_s: float, mode: str = "measured") -> ExplorationPlan:
    """Per-layer filter counts so that one pruning step removes about P_s of FLOPs.

    ``analytic`` uses the layer's own MACs (N_out / contribution); ``measured``
    divides by the exact per-filter FLOPs drop of the whole coupled group.
    Both are recorded; ``mode`` selects which one drives the pruner.
    """
    from .pruning_graph import trace_channels

    if not 0.0 < P_s < 1.0:
        raise ValueError("P_s must lie in (0, 1)")
    if mode not in ("measured", "analytic"):
        raise ValueError(f"unknown step mode {mode!r}")
    graph = trace_channels(net)
    report = flops(net)
    total = report.total
    mods = dict(net.named_modules())
    analytic, measured, delta = {}, {}, {}
    for layer in graph.prunable_layers():
        n_out = mods[layer].out_channels
        contrib = report.per_layer.get(layer, 0)
        if contrib <= 0 or n_out < 2:
            continue
        analytic[layer] = analytic_step(P_s, total, n_out, contrib)
        d = measured_delta(net, layer, graph)
        if d <= 0:
            continue
        delta[layer] = d
        measured[layer] = max(1, round_half_up(P_s * total / d))
    steps = measured if mode == "measured" else {k: v for k, v in analytic.items() if k in measured}
    return ExplorationPlan(dict(steps), P_s, total, mode, analytic, measured, delta)
