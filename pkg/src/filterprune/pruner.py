"""Greedy loss-aware layer/criterion selection.

Each iteration scores every eligible (layer, criterion) pair: the layer's
lowest-ranked ``step`` filters are physically removed from a clone and the
clone's loss on the fixed probe set is measured. The pair with the lowest
probe loss is committed to the working network. Recovery fine-tuning runs
each time the FLOPs reduction passes another multiple of ``dP_ft``.
"""
from __future__ import annotations

import copy
import datetime
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import torch
import torch.fx as fx
import torch.nn as nn
import torch.nn.functional as F
from torch.fx.experimental.optimization import fuse

from .criteria import CRITERIA, CriterionError, check_pool, rank
from .flops_meter import ExplorationPlan, exploration_steps, flops, pruning_rate
from .pruning_graph import ChannelGraph, SurgeryError, prune_allowance, remove_filters, trace_channels

logger = logging.getLogger(__name__)

LOG_SCHEMA_VERSION = 1
_EPS = 1e-12


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    t_p: int = 30
    t_max: int = 60
    P: float = 0.5
    P_s: float = 0.01
    R_max: float = 0.7
    dP_ft: float = 0.03
    ft_epochs: int = 1
    probe_size: int = 1024
    seed: int = 0
    criteria_pool: tuple = CRITERIA
    step_mode: str = "measured"
    paper_exact_cos: bool = False
    balanced_probe: bool = False

    def validate(self) -> "RunConfig":
        try:
            self.criteria_pool = check_pool(self.criteria_pool)
        except CriterionError as exc:
            raise ConfigError(str(exc)) from exc
        if self.P != 0 and not (0 < self.P_s <= self.dP_ft <= self.P < 1):
            raise ConfigError(f"need 0 < P_s <= dP_ft <= P < 1 "
                              f"(got P_s={self.P_s}, dP_ft={self.dP_ft}, P={self.P})")
        if not 0 <= self.P < 1:
            raise ConfigError(f"P must lie in [0, 1), got {self.P}")
        if not 0.0 < self.R_max < 1.0:
            raise ConfigError(f"R_max must lie in (0, 1), got {self.R_max}")
        if not 0 <= self.t_p < self.t_max:
            raise ConfigError(f"need 0 <= t_p < t_max (got t_p={self.t_p}, t_max={self.t_max})")
        if self.probe_size < 1:
            raise ConfigError("probe_size must be at least 1")
        if self.ft_epochs < 1:
            raise ConfigError("ft_epochs must be at least 1")
        if self.step_mode not in ("measured", "analytic"):
            raise ConfigError(f"unknown step_mode {self.step_mode!r}")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["criteria_pool"] = list(self.criteria_pool)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys {sorted(extra)}")
        d = dict(d)
        if "criteria_pool" in d:
            d["criteria_pool"] = tuple(d["criteria_pool"])
        return cls(**d)


@dataclass(frozen=True)
class Candidate:
    layer: str
    criterion: str
    indices: tuple[int, ...]
    space: int
    layer_order: int
    criterion_order: int


@dataclass
class PruneLogEntry:
    iteration: int
    candidates: list[tuple[str, str, float]]
    chosen: dict
    flops_before: int
    flops_after: int
    rate_after: float
    removed_per_layer: dict[str, int]
    finetuned: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PruneLog:
    header: dict
    entries: list[PruneLogEntry] = field(default_factory=list)
    footer: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"header": self.header, "entries": [e.to_dict() for e in self.entries],
                "footer": self.footer}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "PruneLog":
        with open(path) as fh:
            d = json.load(fh)
        version = d.get("header", {}).get("schema_version")
        if version != LOG_SCHEMA_VERSION:
            raise ValueError(f"unsupported prune log schema version {version}")
        entries = [PruneLogEntry(**e) for e in d["entries"]]
        return cls(d["header"], entries, d.get("footer", {}))


@dataclass
class PruneResult:
    net: nn.Module
    log: PruneLog
    status: str  # "reached" | "exhausted"
    rate: float


@dataclass
class Eligibility:
    original_counts: dict[str, int]
    R_max: float

    def allowance(self, net_mods: dict, layer: str) -> int:
        return prune_allowance(self.original_counts[layer], net_mods[layer].out_channels, self.R_max)


class ProbeEvaluator:
    """Probe loss of candidate prunings without cloning the network.

    ``prepare`` folds BN into convs on a copy of the working network and
    caches, per probe chunk, the outputs of the nodes that feed the first
    affected operation of every prunable channel space. A candidate then
    swaps in sliced weights for the modules of its space and re-runs only
    the nodes downstream of that space. Folding is per output channel, so
    slicing the folded weights equals folding the sliced layers.
    """

    def __init__(self, images: torch.Tensor, labels: torch.Tensor, chunk: int = 64):
        if len(images) == 0:
            raise ValueError("empty probe set")
        cl = torch.channels_last
        self.chunks = [(images[i:i + chunk].contiguous(memory_format=cl), labels[i:i + chunk])
                       for i in range(0, len(images), chunk)]
        self.n = len(images)
        self.gm: fx.GraphModule | None = None
        self.graph: ChannelGraph | None = None
        self.affected: dict[int, set[str]] = {}
        self.cache: list[dict[str, torch.Tensor]] = []

    @staticmethod
    def _fused(net: nn.Module, inplace: bool = False) -> fx.GraphModule:
        was_training = net.training
        net.eval()
        gm = fuse(net, inplace=inplace)
        net.train(was_training)
        return gm.to(memory_format=torch.channels_last)

    def prepare(self, net: nn.Module, graph: ChannelGraph):
        gm = self._fused(net)
        nodes = list(gm.graph.nodes)
        self.affected, frontier = {}, set()
        for sp in graph.spaces.values():
            if not sp.prunable:
                continue
            touched = set(sp.producers) | set(sp.norms) | set(sp.consumers) | {l for l, _ in sp.linears}
            aff = set()
            for node in nodes:
                if (node.op == "call_module" and node.target in touched) or \
                        any(a.name in aff for a in node.all_input_nodes):
                    aff.add(node.name)
            self.affected[sp.sid] = aff
            for node in nodes:
                if node.name in aff:
                    frontier |= {a.name for a in node.all_input_nodes if a.name not in aff}
        self.gm, self.graph = gm, graph
        self.cache = []
        with torch.no_grad():
            for x, _ in self.chunks:
                store = _Recorder(gm, frontier)
                store.run(x)
                self.cache.append(store.saved)

    def _overrides(self, space: int, indices) -> dict:
        sp = self.graph.spaces[space]
        mods = dict(self.gm.named_modules())
        n = sp.channels
        drop = set(indices)
        keep = torch.tensor([i for i in range(n) if i not in drop], dtype=torch.long)
        cl = torch.channels_last
        over = {}

        def conv_fn(m, w, b):
            w = w.contiguous(memory_format=cl)
            return lambda x: F.conv2d(x, w, b, m.stride, m.padding, m.dilation, m.groups)

        weights = {}
        for name in set(sp.producers) | set(sp.consumers):
            m = mods[name]
            w, b = m.weight, m.bias
            if name in sp.producers:
                w = w[keep]
                b = b[keep] if b is not None else None
            if name in sp.consumers:
                w = w[:, keep]
            weights[name] = (m, w, b)
        for name, (m, w, b) in weights.items():
            over[name] = conv_fn(m, w, b)
        for name in sp.norms:
            if name in mods:  # BN that fusion could not fold
                bn = mods[name]
                rm, rv = bn.running_mean[keep], bn.running_var[keep]
                g, bb = bn.weight[keep], bn.bias[keep]
                over[name] = lambda x, rm=rm, rv=rv, g=g, bb=bb, e=bn.eps: F.batch_norm(
                    x, rm, rv, g, bb, False, 0.0, e)
        for name, mult in sp.linears:
            lin = mods[name]
            cols = torch.cat([torch.arange(k * mult, (k + 1) * mult) for k in keep.tolist()])
            w = lin.weight[:, cols]
            over[name] = lambda x, w=w, b=lin.bias: F.linear(x, w, b)
        return over

    def candidate_loss(self, space: int, indices) -> float:
        """Mean cross-entropy with ``indices`` of channel space ``space`` removed."""
        if self.gm is None:
            raise RuntimeError("prepare() must run before candidate_loss()")
        with torch.no_grad():
            over = self._overrides(space, indices)
            total = 0.0
            for i, (x, y) in enumerate(self.chunks):
                logits = _Partial(self.gm, self.cache[i], self.affected[space], over).run(x)
                total += float(F.cross_entropy(logits, y, reduction="sum"))
        return total / self.n

    def loss(self, clone: nn.Module) -> float:
        """Mean cross-entropy of a whole network (consumed: BN is folded in place)."""
        gm = self._fused(clone, inplace=True)
        total = 0.0
        with torch.no_grad():
            for x, y in self.chunks:
                total += float(F.cross_entropy(gm(x), y, reduction="sum"))
        return total / self.n


class _Recorder(fx.Interpreter):
    def __init__(self, gm, keep):
        super().__init__(gm)
        self.keep = keep
        self.saved = {}

    def run_node(self, n):
        out = super().run_node(n)
        if n.name in self.keep:
            self.saved[n.name] = out
        return out


class _Partial(fx.Interpreter):
    def __init__(self, gm, cached, affected, overrides=None):
        super().__init__(gm)
        self.cached = cached
        self.affected = affected
        self.overrides = overrides or {}

    def run_node(self, n):
        if n.name in self.affected or n.op == "output":
            return super().run_node(n)
        return self.cached.get(n.name)

    def call_module(self, target, args, kwargs):
        if target in self.overrides:
            return self.overrides[target](*args, **kwargs)
        return super().call_module(target, args, kwargs)


def generate_candidates(net: nn.Module, plan: ExplorationPlan, pool, eligibility: Eligibility,
                        graph: ChannelGraph | None = None,
                        paper_exact_cos: bool = False) -> list[Candidate]:
    """One candidate per (eligible layer, criterion): its lowest-ranked filters."""
    graph = graph or trace_channels(net)
    mods = dict(net.named_modules())
    out = []
    for li, layer in enumerate(graph.prunable_layers()):
        step = plan.steps.get(layer)
        if not step:
            continue
        allowed = eligibility.allowance(mods, layer)
        if allowed < 1:
            continue
        k = min(step, allowed)
        for ci, crit in enumerate(pool):
            try:
                score = rank(net, layer, crit, paper_exact_cos)
            except CriterionError as exc:
                logger.debug("skip %s/%s: %s", layer, crit, exc)
                continue
            idx = tuple(sorted(score.order[:k]))
            out.append(Candidate(layer, crit, idx, graph.space_of_conv[layer], li, ci))
    return out


def _check_indices(net: nn.Module, candidate: Candidate):
    n = dict(net.named_modules())[candidate.layer].out_channels
    idx = list(candidate.indices)
    if len(set(idx)) != len(idx) or any(i < 0 or i >= n for i in idx) or len(idx) >= n:
        raise SurgeryError(f"invalid filter set {idx} for {candidate.layer!r} ({n} filters)")


def evaluate_candidate(net: nn.Module, candidate: Candidate, probe, graph: ChannelGraph | None = None,
                       evaluator: ProbeEvaluator | None = None) -> float:
    """Probe loss of ``net`` with ``candidate`` applied; ``net`` is untouched.

    Without a prepared ``evaluator`` the candidate is applied to a deep copy
    by real surgery (the reference path). Surgery rejection yields ``inf``
    so the candidate can never win.
    """
    graph = graph or trace_channels(net)
    try:
        if evaluator is not None:
            _check_indices(net, candidate)
            return evaluator.candidate_loss(candidate.space, candidate.indices)
        clone = copy.deepcopy(net)
        remove_filters(clone, candidate.layer, candidate.indices, graph=graph, measure_flops=False)
    except SurgeryError as exc:
        logger.warning("candidate %s/%s disqualified: %s", candidate.layer, candidate.criterion, exc)
        return math.inf
    return ProbeEvaluator(*probe).loss(clone)


def select(scored: list[tuple[Candidate, float]]) -> tuple[Candidate, float]:
    """Lowest loss; ties go to the earlier layer, then the earlier criterion."""
    def key(item):
        c, loss = item
        loss = math.inf if math.isnan(loss) else loss
        return (loss, c.layer_order, c.criterion_order)
    valid = [s for s in scored if math.isfinite(s[1])]
    if not valid:
        raise SurgeryError("no valid candidate")
    return min(valid, key=key)


def commit_iteration(net: nn.Module, log: PruneLog, scored: list[tuple[Candidate, float]],
                     base_total: int, graph: ChannelGraph | None = None) -> PruneLogEntry:
    """Apply the winning candidate to ``net`` and append its log entry."""
    best, best_loss = select(scored)
    receipt = remove_filters(net, best.layer, best.indices, graph=graph)
    entry = PruneLogEntry(
        iteration=len(log.entries),
        candidates=[(c.layer, c.criterion, float(loss)) for c, loss in scored],
        chosen={"layer": best.layer, "criterion": best.criterion,
                "indices": list(best.indices), "loss": float(best_loss)},
        flops_before=receipt.flops_before,
        flops_after=receipt.flops_after,
        rate_after=pruning_rate(base_total, receipt.flops_after),
        removed_per_layer=receipt.removed_per_layer,
    )
    log.entries.append(entry)
    return entry


def run(net: nn.Module, config: RunConfig, probe, trainer_hook: Callable | None = None,
        header_extra: dict | None = None, plan: ExplorationPlan | None = None) -> PruneResult:
    """Prune ``net`` in place until the FLOPs reduction reaches ``config.P``.

    ``probe`` is an (images, labels) pair of un-augmented tensors.
    ``trainer_hook(net, epochs)`` runs recovery fine-tuning. Running out of
    eligible layers ends the loop with status ``"exhausted"``.
    """
    config.validate()
    started = time.time()
    base = flops(net)
    plan = plan or exploration_steps(net, config.P_s, config.step_mode)
    graph = trace_channels(net)
    mods = dict(net.named_modules())
    original = {l: mods[l].out_channels for l in graph.prunable_layers()}
    conv_counts = {n: m.out_channels for n, m in mods.items() if isinstance(m, nn.Conv2d)}
    header = {
        "schema_version": LOG_SCHEMA_VERSION,
        "arch": getattr(net, "arch", type(net).__name__),
        "input_shape": list(base.input_shape),
        "config": config.to_dict(),
        "baseline_flops": base.to_dict(),
        "exploration": plan.to_dict(),
        "original_counts": original,
        "original_conv_channels": conv_counts,
        "layer_order": graph.prunable_layers(),
        "flops_unit": "MAC",
    }
    header.update(header_extra or {})
    log = PruneLog(header)
    eligibility = Eligibility(original, config.R_max)
    evaluator = ProbeEvaluator(*probe)
    rate, status, ft_calls = 0.0, "reached", 0
    next_ft = config.dP_ft

    while rate < config.P:
        graph = trace_channels(net)
        cands = generate_candidates(net, plan, config.criteria_pool, eligibility, graph,
                                    config.paper_exact_cos)
        if not cands:
            status = "exhausted"
            logger.info("no eligible layer left at P'=%.4f", rate)
            break
        evaluator.prepare(net, graph)
        seen: dict[tuple, float] = {}
        scored = []
        for c in cands:
            key = (c.space, c.indices)
            if key not in seen:
                seen[key] = evaluate_candidate(net, c, probe, graph, evaluator)
            scored.append((c, seen[key]))
        entry = commit_iteration(net, log, scored, base.total, graph)
        rate = entry.rate_after
        logger.info("iter %d: %s/%s -%d filters, loss %.4f, P'=%.4f", entry.iteration,
                    entry.chosen["layer"], entry.chosen["criterion"], len(entry.chosen["indices"]),
                    entry.chosen["loss"], rate)
        if rate >= next_ft - _EPS:
            # recover each time P' passes the next multiple of dP_ft
            if trainer_hook is not None:
                trainer_hook(net, config.ft_epochs)
            ft_calls += 1
            entry.finetuned = True
            next_ft = (math.floor(rate / config.dP_ft + 1e-9) + 1) * config.dP_ft

    log.footer = {
        "final_rate": rate,
        "status": status,
        "iterations": len(log.entries),
        "finetune_calls": ft_calls,
        "final_flops": flops(net).total,
        "wall_time_s": time.time() - started,
        "finished_at": datetime.datetime.now().isoformat(timespec="seconds"),
    }
    return PruneResult(net, log, status, rate)
