"""Command-line front end: prune, train, eval, report, ablate.

Settings are layered preset -> YAML config file -> flags. Flags carry the
RunConfig field names unchanged (``--P_s``, ``--R_max``, ...).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import statistics
import sys
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from . import pruner
from .data_pipeline import DATA_ROOT_ENV, DatasetError, load_dataset
from .flops_meter import flops
from .model_zoo import ArchError, count_params, load_checkpoint
from .report import write_reports
from .train_loop import TrainSchedule, evaluate, full_pipeline

logger = logging.getLogger("filterprune")

MANIFEST_VERSION = 1

PRESETS = {
    "resnet20-cifar-p30": {
        "arch": "resnet20",
        "dataset": {"source": "cifar10"},
        "run": {"P": 0.3, "t_max": 60},
    },
    "resnet56-cifar-p50": {
        "arch": "resnet56",
        "dataset": {"source": "cifar10"},
        "run": {"P": 0.5, "t_max": 60},
    },
    "vgg16-cifar-p50": {
        "arch": "vgg16",
        "dataset": {"source": "cifar10"},
        "run": {"P": 0.5, "t_max": 60, "t_p": 30},
    },
    "smoke-synthetic": {
        "arch": "toy-chain[8,16]",
        "dataset": {"source": "synthetic", "classes": 4, "n": 512, "size": 16, "seed": 7},
        "run": {"P": 0.3, "P_s": 0.03, "dP_ft": 0.1, "t_max": 4, "probe_size": 64},
        "schedule": {"batch_size": 64, "lr": 0.05},
    },
    "resnet8-synthetic": {
        "arch": "resnet8",
        "dataset": {"source": "synthetic", "classes": 10, "n": 1024, "size": 16, "seed": 7},
        "run": {"P": 0.3, "P_s": 0.01, "dP_ft": 0.1, "t_max": 6, "probe_size": 128},
        "schedule": {"batch_size": 64, "lr": 0.05},
    },
}

RUN_FIELDS = list(pruner.RunConfig.__dataclass_fields__)
SCHEDULE_FIELDS = ["lr", "momentum", "weight_decay", "batch_size", "gamma"]

STUDIES = {"prune-epoch": "t_p", "criteria-pool": "criteria_pool", "rmax": "R_max", "ps": "P_s"}


@dataclass
class RunManifest:
    arch: str
    dataset: dict
    config: pruner.RunConfig
    schedule: TrainSchedule
    out: str
    schema_version: int = MANIFEST_VERSION
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"schema_version": self.schema_version, "arch": self.arch,
                "dataset": dict(self.dataset), "run": self.config.to_dict(),
                "schedule": self.schedule.to_dict(), "out": self.out}

    def save(self, path):
        with open(path, "w") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=False)


def _pool(text):
    text = text.strip()
    if text in ("all", "*"):
        return list(pruner.CRITERIA)
    return [c.strip() for c in text.split(",") if c.strip()]


def _bool(text):
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def add_manifest_args(p: argparse.ArgumentParser):
    g = p.add_argument_group("run")
    g.add_argument("--preset", choices=sorted(PRESETS))
    g.add_argument("--config", help="YAML file with arch/dataset/run/schedule/out sections")
    g.add_argument("--arch")
    g.add_argument("--out")
    g.add_argument("-v", "--verbose", action="store_true")
    d = p.add_argument_group("dataset")
    d.add_argument("--data-source", dest="data_source", choices=["cifar10", "synthetic"])
    d.add_argument("--data-root", dest="data_root", help=f"CIFAR-10 binary dir (else ${DATA_ROOT_ENV})")
    d.add_argument("--train-subset", dest="train_subset", type=int)
    d.add_argument("--val-subset", dest="val_subset", type=int)
    d.add_argument("--synthetic-n", dest="synthetic_n", type=int)
    d.add_argument("--synthetic-classes", dest="synthetic_classes", type=int)
    d.add_argument("--synthetic-size", dest="synthetic_size", type=int)
    c = p.add_argument_group("config (RunConfig fields)")
    c.add_argument("--t_p", type=int)
    c.add_argument("--t_max", type=int)
    c.add_argument("--P", type=float)
    c.add_argument("--P_s", type=float)
    c.add_argument("--R_max", type=float)
    c.add_argument("--dP_ft", type=float)
    c.add_argument("--ft_epochs", type=int)
    c.add_argument("--probe_size", type=int)
    c.add_argument("--seed", type=int)
    c.add_argument("--criteria_pool", type=_pool, help="comma list or 'all'")
    c.add_argument("--step_mode", choices=["measured", "analytic"])
    c.add_argument("--paper_exact_cos", type=_bool)
    c.add_argument("--balanced_probe", type=_bool)
    s = p.add_argument_group("schedule")
    s.add_argument("--lr", type=float)
    s.add_argument("--momentum", type=float)
    s.add_argument("--weight_decay", type=float)
    s.add_argument("--batch_size", type=int)
    s.add_argument("--gamma", type=float)


def build_manifest(args, force: dict | None = None) -> RunManifest:
    """Layer preset, file and flags; validate before anything expensive runs."""
    tree: dict = {"arch": None, "dataset": {}, "run": {}, "schedule": {}, "out": "runs/latest"}
    if getattr(args, "preset", None):
        tree = _merge(tree, PRESETS[args.preset])
    if getattr(args, "config", None):
        with open(args.config) as fh:
            loaded = yaml.safe_load(fh) or {}
        unknown = set(loaded) - {"arch", "dataset", "run", "schedule", "out", "schema_version"}
        if unknown:
            raise pruner.ConfigError(f"unknown config sections {sorted(unknown)}")
        tree = _merge(tree, loaded)
    v = vars(args)
    for k in ("arch", "out"):
        if v.get(k) is not None:
            tree[k] = v[k]
    data_flags = {"source": "data_source", "root": "data_root", "train_subset": "train_subset",
                  "val_subset": "val_subset", "n": "synthetic_n", "classes": "synthetic_classes",
                  "size": "synthetic_size"}
    for key, flag in data_flags.items():
        if v.get(flag) is not None:
            tree["dataset"][key] = v[flag]
    for k in RUN_FIELDS:
        if v.get(k) is not None:
            tree["run"][k] = v[k]
    for k in SCHEDULE_FIELDS:
        if v.get(k) is not None:
            tree["schedule"][k] = v[k]
    tree["run"].update(force or {})
    if not tree["arch"]:
        raise pruner.ConfigError("no architecture given (--arch, --preset or config file)")

    run = dict(tree["run"])
    t_max = int(run.get("t_max", pruner.RunConfig.t_max))
    sched_kw = {k: v for k, v in tree["schedule"].items() if k not in ("t_max", "seed")}
    schedule = TrainSchedule(t_max=t_max, seed=int(run.get("seed", 0)), **sched_kw)
    if "t_p" not in run:
        run["t_p"] = schedule.default_t_p()
    config = pruner.RunConfig.from_dict(run).validate()
    tree["dataset"].setdefault("source", "synthetic")
    return RunManifest(tree["arch"], tree["dataset"], config, schedule, str(tree["out"]))


def execute(manifest: RunManifest, reports: bool = True) -> dict:
    out = Path(manifest.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest.save(out / "manifest.yaml")
    data = load_dataset(manifest.dataset)
    result = full_pipeline(manifest.config, data, manifest.arch, manifest.schedule, out)
    summary = {"accuracy": result.final_accuracy, "status": result.status,
               "rate": result.log.footer["final_rate"] if result.log else 0.0,
               "macs": flops(result.net).total, "params": count_params(result.net), **result.extras}
    if result.log is not None and reports:
        write_reports(result.log, out / "reports", result.net)
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=1)
    return summary


def cmd_prune(args) -> int:
    summary = execute(build_manifest(args))
    print(json.dumps(summary))
    return 0


def cmd_train(args) -> int:
    summary = execute(build_manifest(args, force={"P": 0.0}), reports=False)
    print(json.dumps(summary))
    return 0


def cmd_eval(args) -> int:
    net, payload = load_checkpoint(args.ckpt)
    dataset = {"source": "synthetic"}
    manifest_path = Path(args.ckpt).parent / "manifest.yaml"
    if manifest_path.is_file():
        with open(manifest_path) as fh:
            dataset = yaml.safe_load(fh).get("dataset", dataset)
    if args.data_source:
        dataset = {"source": args.data_source}
    if args.data_root:
        dataset["root"] = args.data_root
    data = load_dataset(dataset)
    summary = {"accuracy": evaluate(net, data), "macs": flops(net).total,
               "params": count_params(net), "arch": payload["arch"]}
    print(json.dumps(summary))
    return 0


def cmd_report(args) -> int:
    net = load_checkpoint(args.ckpt)[0] if args.ckpt else None
    out = args.out or str(Path(args.log).parent / "reports")
    res = write_reports(args.log, out, net, figures=not args.no_figures)
    print(json.dumps({"out": out, "criteria_distribution": res["criteria_distribution"],
                      "mismatched": res["mismatched"]}))
    return 1 if res["mismatched"] else 0


def parse_grid(study: str, text: str) -> list:
    if study == "criteria-pool":
        return [_pool(part) for part in text.split(";") if part.strip()]
    conv = int if study == "prune-epoch" else float
    return [conv(x) for x in text.split(",") if x.strip()]


def _label(value) -> str:
    return "+".join(value) if isinstance(value, list) else f"{value:g}"


def _mean_std(xs):
    if not xs:
        return None, None
    return statistics.fmean(xs), (statistics.stdev(xs) if len(xs) > 1 else 0.0)


def cmd_ablate(args) -> int:
    base = build_manifest(args)
    key = STUDIES[args.study]
    grid = parse_grid(args.study, args.grid)
    seeds = [int(s) for s in args.seeds.split(",")]
    out = Path(base.out)
    for value in grid:  # reject bad grid points before the first run
        pruner.RunConfig.from_dict({**base.config.to_dict(), key: value}).validate()
    rows = []
    for value in grid:
        for seed in seeds:
            run = {**base.config.to_dict(), key: value, "seed": seed}
            sched = TrainSchedule(**{**base.schedule.to_dict(), "seed": seed})
            m = RunManifest(base.arch, base.dataset, pruner.RunConfig.from_dict(run), sched,
                            str(out / args.study / _label(value) / f"seed{seed}"))
            try:
                s = execute(m, reports=False)
                rows.append({"value": _label(value), "seed": seed, "status": s["status"],
                             "accuracy": s["accuracy"], "rate": s["rate"]})
            except Exception as exc:  # partial failures are recorded, the study goes on
                logger.error("grid point %s seed %d failed: %s", _label(value), seed, exc)
                rows.append({"value": _label(value), "seed": seed, "status": f"failed: {exc}",
                             "accuracy": "", "rate": ""})
    with open(out / f"{args.study}_runs.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["value", "seed", "status", "accuracy", "rate"])
        w.writeheader()
        w.writerows(rows)
    summary = summarize(rows, [_label(v) for v in grid])
    with open(out / f"{args.study}_summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(summary[0]))
        w.writeheader()
        w.writerows(summary)
    table = summary_table(args.study, summary)
    (out / f"{args.study}_summary.md").write_text(table)
    print(table)
    return 0 if all(not str(r["status"]).startswith("failed") for r in rows) else 1


def summarize(rows: list[dict], labels: list[str]) -> list[dict]:
    out = []
    for label in labels:
        ok = [r for r in rows if r["value"] == label and not str(r["status"]).startswith("failed")]
        acc_m, acc_s = _mean_std([float(r["accuracy"]) for r in ok])
        rate_m, rate_s = _mean_std([float(r["rate"]) for r in ok])
        out.append({"value": label, "runs": len(ok),
                    "failed": sum(1 for r in rows if r["value"] == label) - len(ok),
                    "acc_mean": acc_m, "acc_std": acc_s, "rate_mean": rate_m, "rate_std": rate_s})
    return out


def summary_table(study: str, summary: list[dict]) -> str:
    """One column per grid value, mean ± std per row."""
    def cell(m, s, scale=1.0, digits=2):
        return "n/a" if m is None else f"{m * scale:.{digits}f} ± {s * scale:.{digits}f}"
    head = f"| {STUDIES[study]} | " + " | ".join(r["value"] for r in summary) + " |"
    sep = "|---" * (len(summary) + 1) + "|"
    acc = "| accuracy (%) | " + " | ".join(cell(r["acc_mean"], r["acc_std"]) for r in summary) + " |"
    rate = "| FLOPs pruned (%) | " + " | ".join(cell(r["rate_mean"], r["rate_std"], 100.0)
                                               for r in summary) + " |"
    return "\n".join([head, sep, acc, rate]) + "\n"


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="filterprune", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("prune", help="train, prune at t_p, train to t_max")
    add_manifest_args(p)
    p.set_defaults(func=cmd_prune)
    p = sub.add_parser("train", help="unpruned baseline with the same schedule")
    add_manifest_args(p)
    p.set_defaults(func=cmd_train)
    p = sub.add_parser("eval", help="accuracy and MACs of a checkpoint")
    p.add_argument("ckpt")
    p.add_argument("--data-source", dest="data_source", choices=["cifar10", "synthetic"])
    p.add_argument("--data-root", dest="data_root")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_eval)
    p = sub.add_parser("report", help="CSV tables and figures from prune_log.json")
    p.add_argument("log")
    p.add_argument("--ckpt", help="cross-check retained counts against this checkpoint")
    p.add_argument("--out")
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_report)
    p = sub.add_parser("ablate", help="grid study over one knob, repeated over seeds")
    p.add_argument("--study", choices=sorted(STUDIES), required=True)
    p.add_argument("--grid", required=True, help="comma list; criteria pools use ';' between pools")
    p.add_argument("--seeds", default="0,1")
    add_manifest_args(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (pruner.ConfigError, ArchError, DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        logger.exception("command failed")
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
