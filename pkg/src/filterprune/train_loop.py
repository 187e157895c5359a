"""Pruning-while-training schedule.

Train ``t_p`` epochs, pause and prune, then keep training the slimmed
network up to ``t_max`` on the same learning-rate schedule. Recovery
fine-tunes inside the pruning loop are extra epochs and are reported
separately from the ``t_max`` budget.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import pruner
from .data_pipeline import DatasetHandle, epoch_generator, sample_probe, train_batches
from .model_zoo import build_model, save_checkpoint

logger = logging.getLogger(__name__)

STREAM_TRAIN = 0
STREAM_FINETUNE = 1


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainSchedule:
    t_max: int = 60
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 128
    milestones: tuple = (0.5, 0.75)  # fractions of t_max, or absolute epochs if > 1
    gamma: float = 0.1
    augment: bool = True
    seed: int = 0

    def milestone_epochs(self) -> list[int]:
        return [int(round(m * self.t_max)) if m <= 1 else int(m) for m in self.milestones]

    def lr_at(self, epoch: int) -> float:
        decays = sum(1 for m in self.milestone_epochs() if epoch >= m)
        return self.lr * self.gamma ** decays

    def default_t_p(self) -> int:
        """Pre-prune epoch count whose last epoch sits just before the first decay."""
        ms = self.milestone_epochs()
        return min(ms) if ms else self.t_max - 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        return d


@dataclass
class EpochRecord:
    epoch: int
    phase: str  # pre-prune | fine-tune | post-prune
    train_loss: float
    val_accuracy: float
    lr: float


@dataclass
class PipelineResult:
    net: nn.Module
    records: list[EpochRecord]
    log: pruner.PruneLog | None
    status: str
    final_accuracy: float
    extras: dict = field(default_factory=dict)


@torch.no_grad()
def evaluate(net: nn.Module, data: DatasetHandle, batch_size: int = 500) -> float:
    """Top-1 validation accuracy in percent."""
    was_training = net.training
    net.eval()
    correct = 0
    for i in range(0, data.val_size, batch_size):
        x = data.normalize(data.val_x[i:i + batch_size])
        correct += int((net(x).argmax(1) == data.val_y[i:i + batch_size]).sum())
    net.train(was_training)
    return 100.0 * correct / max(1, data.val_size)


def _optimizer(net, schedule, lr):
    return torch.optim.SGD(net.parameters(), lr=lr, momentum=schedule.momentum,
                           weight_decay=schedule.weight_decay)


def _train_epoch(net, data, schedule, opt, gen) -> float:
    net.train()
    total, seen = 0.0, 0
    for x, y in train_batches(data, schedule.batch_size, gen, schedule.augment):
        opt.zero_grad(set_to_none=True)
        loss = F.cross_entropy(net(x), y)
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"non-finite training loss {float(loss.detach())}")
        loss.backward()
        opt.step()
        total += float(loss.detach()) * len(y)
        seen += len(y)
    net.eval()
    return total / max(1, seen)


def fit(net: nn.Module, data: DatasetHandle, schedule: TrainSchedule, upto: int, start: int = 0,
        phase: str = "pre-prune", sink=None) -> list[EpochRecord]:
    """Train epochs ``start .. upto-1``; each epoch's data order depends only on its index."""
    if upto > schedule.t_max:
        raise ValueError(f"upto={upto} exceeds t_max={schedule.t_max}")
    records = []
    if upto <= start:
        return records
    opt = _optimizer(net, schedule, schedule.lr_at(start))
    for epoch in range(start, upto):
        lr = schedule.lr_at(epoch)
        for g in opt.param_groups:
            g["lr"] = lr
        loss = _train_epoch(net, data, schedule, opt, epoch_generator(schedule.seed, STREAM_TRAIN, epoch))
        rec = EpochRecord(epoch, phase, loss, evaluate(net, data), lr)
        logger.info("epoch %d [%s] loss %.4f acc %.2f lr %.4g", epoch, phase, loss, rec.val_accuracy, lr)
        records.append(rec)
        if sink:
            sink(rec)
    return records


def finetune(net: nn.Module, data: DatasetHandle, schedule: TrainSchedule, epochs: int,
             lr: float, round_index: int = 0, sink=None) -> list[EpochRecord]:
    """Recovery epochs at a fixed rate; ``round_index`` selects the data-order stream."""
    if epochs < 1:
        raise ValueError("fine-tune needs at least one epoch")
    opt = _optimizer(net, schedule, lr)
    records = []
    for e in range(epochs):
        gen = epoch_generator(schedule.seed, STREAM_FINETUNE, round_index * 1000 + e)
        loss = _train_epoch(net, data, schedule, opt, gen)
        rec = EpochRecord(e, "fine-tune", loss, evaluate(net, data), lr)
        records.append(rec)
        if sink:
            sink(rec)
    return records


def full_pipeline(config: pruner.RunConfig, data: DatasetHandle, arch: str,
                  schedule: TrainSchedule | None = None, out_dir=None) -> PipelineResult:
    """fit(t_p) -> prune -> fit(t_p .. t_max) with checkpoints at phase boundaries."""
    config.validate()
    schedule = schedule or TrainSchedule(t_max=config.t_max, seed=config.seed)
    if schedule.t_max != config.t_max:
        raise pruner.ConfigError("schedule.t_max and config.t_max disagree")
    out = Path(out_dir) if out_dir else None
    records: list[EpochRecord] = []
    epoch_log = None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        epoch_log = open(out / "epochs.log", "w")

    def sink(rec):
        records.append(rec)
        if epoch_log:
            epoch_log.write(json.dumps(asdict(rec)) + "\n")
            epoch_log.flush()

    try:
        net = build_model(arch, data.class_count, seed=config.seed, input_shape=data.input_shape)
        t_p = config.t_p if config.P > 0 else config.t_max
        fit(net, data, schedule, t_p, 0, "pre-prune", sink)
        if out:
            save_checkpoint(net, out / "pre_prune.ckpt", extra={"epoch": t_p})
        log, status, recovery = None, "no-prune", []
        if config.P > 0:
            probe = sample_probe(data, config.probe_size, config.seed, config.balanced_probe)
            images, labels = data.train_tensors(probe.indices)
            ft_lr = schedule.lr_at(t_p)  # first post-pause epoch, same rate the resumed run starts at

            def hook(n, epochs):
                before = evaluate(n, data)
                recs = finetune(n, data, schedule, epochs, ft_lr, len(recovery), sink)
                recovery.append((before, recs[-1].val_accuracy))

            header = {"schedule": schedule.to_dict(), "finetune_lr": ft_lr,
                      "probe_indices": list(probe.indices), "probe_seed": probe.seed,
                      "dataset": {k: v for k, v in data.spec.items() if k != "checksums"}}
            result = pruner.run(net, config, (images, labels), hook, header)
            log, status = result.log, result.status
            if out:
                save_checkpoint(net, out / "pruned.ckpt", prune_log="prune_log.json",
                                extra={"epoch": t_p})
            fit(net, data, schedule, config.t_max, t_p, "post-prune", sink)
        acc = evaluate(net, data)
        n_ft = sum(1 for r in records if r.phase == "fine-tune")
        extras = {"recovery": recovery,
                  "post_prune_epochs": sum(1 for r in records if r.phase == "post-prune"),
                  "pre_prune_epochs": sum(1 for r in records if r.phase == "pre-prune"),
                  "finetune_epochs": n_ft}
        if log is not None:
            log.footer.update({"final_accuracy": acc, **extras})
        if out:
            save_checkpoint(net, out / "final.ckpt",
                            prune_log="prune_log.json" if log else None, extra={"epoch": config.t_max})
            if log is not None:
                log.save(out / "prune_log.json")
        if math.isnan(acc):
            raise TrainingDiverged("validation accuracy is NaN")
        return PipelineResult(net, records, log, status, acc, extras)
    finally:
        if epoch_log:
            epoch_log.close()
