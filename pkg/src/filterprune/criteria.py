"""Filter-importance criteria: l1/l2 magnitude and Euclidean/cosine similarity.

Every scorer returns a ``CriterionScore`` whose ``order`` lists filter
indices from least to most important (pruned first -> pruned last).
Low norm means unimportant; low mean distance to the other filters of
the layer means redundant.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

logger = logging.getLogger(__name__)

CRITERIA = ("l1", "l2", "eucl", "cos")
KIND = {"l1": "magnitude", "l2": "magnitude", "eucl": "similarity", "cos": "similarity"}


class CriterionError(ValueError):
    pass


@dataclass(frozen=True)
class Criterion:
    id: str

    @property
    def kind(self) -> str:
        return KIND[self.id]


@dataclass
class CriterionScore:
    layer: str
    criterion: str
    scores: np.ndarray
    order: list[int]


def check_pool(pool) -> tuple[str, ...]:
    pool = tuple(pool)
    if not pool:
        raise CriterionError("criteria pool is empty")
    unknown = [c for c in pool if c not in CRITERIA]
    if unknown:
        raise CriterionError(f"unknown criteria {unknown}; choose from {CRITERIA}")
    if len(set(pool)) != len(pool):
        raise CriterionError(f"duplicate criteria in pool {pool}")
    return pool


def ascending_order(scores) -> list[int]:
    """Indices sorted by score; equal scores keep the lower index first."""
    return [int(i) for i in np.argsort(np.asarray(scores), kind="stable")]


def _flatten(weights) -> torch.Tensor:
    w = torch.as_tensor(weights).detach().to(torch.float64)
    if w.ndim < 2 or w.shape[0] == 0:
        raise CriterionError("layer has no filters")
    return w.reshape(w.shape[0], -1)


def score_magnitude(weights, p: int, layer: str = "") -> CriterionScore:
    if p not in (1, 2):
        raise CriterionError(f"p must be 1 or 2, got {p}")
    x = _flatten(weights)
    s = x.abs().sum(1) if p == 1 else x.pow(2).sum(1).sqrt()
    s = s.numpy()
    return CriterionScore(layer, f"l{p}", s, ascending_order(s))


def pairwise_distance(x, y, kind: str, paper_exact_cos: bool = False) -> float:
    """Distance between two filter vectors.

    ``cos`` is 1 - <x,y> / (|x| |y|); with ``paper_exact_cos`` the
    denominator is the un-rooted product sum(x^2) * sum(y^2). A zero vector
    is treated as orthogonal (distance 1).
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise CriterionError("filter vectors differ in length")
    if kind == "eucl":
        return float(np.sqrt(np.sum((x - y) ** 2)))
    if kind != "cos":
        raise CriterionError(f"unknown distance {kind!r}")
    nx, ny = np.sum(x * x), np.sum(y * y)
    if nx == 0 or ny == 0:
        return 1.0
    denom = nx * ny if paper_exact_cos else np.sqrt(nx) * np.sqrt(ny)
    return float(1.0 - np.dot(x, y) / denom)


def distance_matrix(x: torch.Tensor, kind: str, paper_exact_cos: bool = False,
                    budget: int = 1 << 22) -> torch.Tensor:
    """Pairwise distances, each pair reduced on its own so row position never matters."""
    n, m = x.shape
    sq = x.pow(2).sum(1)
    d = torch.empty(n, n, dtype=x.dtype)
    block = max(1, budget // max(1, n * m))
    for s in range(0, n, block):
        xb = x[s:s + block, None, :]
        if kind == "eucl":
            d[s:s + block] = (xb - x[None]).pow(2).sum(-1).sqrt()
            continue
        dots = (xb * x[None]).sum(-1)
        a, b = sq[s:s + block, None], sq[None, :]
        denom = a * b if paper_exact_cos else a.sqrt() * b.sqrt()
        d[s:s + block] = 1.0 - dots / torch.where(denom == 0, torch.ones_like(denom), denom)
    if kind == "cos":
        zero = sq == 0
        d[zero, :] = 1.0
        d[:, zero] = 1.0
    return d


def score_similarity(weights, kind: str, layer: str = "",
                     paper_exact_cos: bool = False) -> CriterionScore:
    """Mean distance of each filter to every other filter of the layer."""
    if kind not in ("eucl", "cos"):
        raise CriterionError(f"unknown similarity {kind!r}")
    x = _flatten(weights)
    n = x.shape[0]
    if n < 2:
        raise CriterionError(f"{kind} similarity needs at least two filters in {layer or 'layer'}")
    if kind == "cos" and bool((x.pow(2).sum(1) == 0).any()):
        logger.info("zero filter in %s: cosine distance to it taken as 1", layer or "layer")
    d = distance_matrix(x, kind, paper_exact_cos)
    d.fill_diagonal_(0.0)
    # sorted row sums keep the score independent of filter order
    s = (d.sort(1).values.sum(1) / (n - 1)).numpy()
    return CriterionScore(layer, kind, s, ascending_order(s))


def score_weights(weights, criterion: str, layer: str = "", paper_exact_cos: bool = False):
    if criterion == "l1":
        return score_magnitude(weights, 1, layer)
    if criterion == "l2":
        return score_magnitude(weights, 2, layer)
    if criterion in ("eucl", "cos"):
        return score_similarity(weights, criterion, layer, paper_exact_cos)
    raise CriterionError(f"unknown criterion {criterion!r}")


def rank(net: nn.Module, layer: str, criterion: str, paper_exact_cos: bool = False) -> CriterionScore:
    """Score the filters of conv ``layer`` under ``criterion``."""
    mods = dict(net.named_modules())
    conv = mods.get(layer)
    if not isinstance(conv, nn.Conv2d):
        raise CriterionError(f"{layer!r} is not a conv layer")
    return score_weights(conv.weight, criterion, layer, paper_exact_cos)
