"""Report tables rebuilt from a pruning log (plus, optionally, the final checkpoint).

Every number written here comes from prune_log.json; the checkpoint is
only used to cross-check retained filter counts against real shapes.
"""
from __future__ import annotations

import csv
import logging
from collections import Counter
from pathlib import Path

import torch.nn as nn

from .pruner import PruneLog

logger = logging.getLogger(__name__)


def criteria_distribution(log: PruneLog) -> dict[str, int]:
    """Physically removed filters (all coupled producers) attributed to the winning criterion."""
    pool = log.header.get("config", {}).get("criteria_pool", [])
    counts = Counter({c: 0 for c in pool})
    for e in log.entries:
        counts[e.chosen["criterion"]] += sum(e.removed_per_layer.values())
    return dict(counts)


def per_layer_table(log: PruneLog) -> list[dict]:
    original = log.header["original_conv_channels"]
    pruned = Counter()
    for e in log.entries:
        pruned.update(e.removed_per_layer)
    return [{"layer": name, "original": n, "pruned": pruned.get(name, 0),
             "retained": n - pruned.get(name, 0)} for name, n in original.items()]


def flops_trajectory(log: PruneLog) -> list[dict]:
    base = log.header["baseline_flops"]["total"]
    rows = [{"iteration": -1, "layer": "", "criterion": "", "filters": 0,
             "flops": base, "rate": 0.0, "finetuned": False}]
    for e in log.entries:
        rows.append({"iteration": e.iteration, "layer": e.chosen["layer"],
                     "criterion": e.chosen["criterion"], "filters": len(e.chosen["indices"]),
                     "flops": e.flops_after, "rate": e.rate_after, "finetuned": e.finetuned})
    return rows


def check_against_net(table: list[dict], net: nn.Module) -> list[str]:
    """Layers whose retained count disagrees with the network's actual conv widths."""
    mods = dict(net.named_modules())
    return [r["layer"] for r in table
            if not isinstance(mods.get(r["layer"]), nn.Conv2d)
            or mods[r["layer"]].out_channels != r["retained"]]


def _write_csv(path: Path, rows: list[dict], fields=None):
    fields = fields or (list(rows[0]) if rows else [])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)


def _figures(out: Path, dist, table, traj):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 3))
    ax.bar(list(dist), list(dist.values()), color="tab:blue")
    ax.set_ylabel("pruned filters")
    fig.tight_layout()
    fig.savefig(out / "criteria_distribution.png", dpi=120)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(max(5, 0.3 * len(table)), 3.5))
    xs = range(len(table))
    ax.bar(xs, [r["retained"] for r in table], label="retained", color="tab:green")
    ax.bar(xs, [r["pruned"] for r in table], bottom=[r["retained"] for r in table],
           label="pruned", color="tab:red")
    ax.set_xticks(list(xs))
    ax.set_xticklabels([r["layer"] for r in table], rotation=90, fontsize=6)
    ax.set_ylabel("filters")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "per_layer.png", dpi=120)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(4.5, 3))
    ax.plot([r["iteration"] + 1 for r in traj], [r["flops"] for r in traj], marker=".")
    ax.set_xlabel("iteration")
    ax.set_ylabel("MACs")
    fig.tight_layout()
    fig.savefig(out / "flops_trajectory.png", dpi=120)
    plt.close(fig)


def write_reports(log: PruneLog | str | Path, out_dir, net: nn.Module | None = None,
                  figures: bool = True) -> dict:
    if not isinstance(log, PruneLog):
        log = PruneLog.load(log)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dist = criteria_distribution(log)
    table = per_layer_table(log)
    traj = flops_trajectory(log)
    total = sum(dist.values())
    _write_csv(out / "criteria_distribution.csv",
               [{"criterion": c, "filters": n, "share": (n / total if total else 0.0)}
                for c, n in dist.items()], ["criterion", "filters", "share"])
    _write_csv(out / "per_layer.csv", table, ["layer", "original", "pruned", "retained"])
    _write_csv(out / "flops_trajectory.csv", traj)
    mismatched = check_against_net(table, net) if net is not None else []
    if mismatched:
        logger.warning("report disagrees with checkpoint for %s", mismatched)
    if figures:
        _figures(out, dist, table, traj)
    return {"criteria_distribution": dist, "per_layer": table, "trajectory": traj,
            "mismatched": mismatched}
