import json

import pytest
import torch

from filterprune.data_pipeline import load_dataset
from filterprune.model_zoo import build_model, load_checkpoint
from filterprune.pruner import ConfigError, RunConfig
from filterprune.pruning_graph import remove_filters
from filterprune.train_loop import (TrainingDiverged, TrainSchedule, evaluate, finetune, fit,
                                    full_pipeline)

SCHED = dict(batch_size=64, lr=0.05)
TOY = "toy-chain[8,16]"


def toy(data, seed=0):
    return build_model(TOY, data.class_count, seed=seed, input_shape=data.input_shape)


def test_schedule():
    s = TrainSchedule(t_max=60)
    assert s.milestone_epochs() == [30, 45]
    assert [s.lr_at(e) for e in (0, 29, 30, 44, 45)] == pytest.approx([0.1, 0.1, 0.01, 0.01, 0.001])
    assert s.default_t_p() == 30 and s.lr_at(s.default_t_p() - 1) == 0.1


def test_fit_learns(blobs16):
    net = toy(blobs16)
    recs = fit(net, blobs16, TrainSchedule(t_max=5, **SCHED), 5)
    assert [r.epoch for r in recs] == list(range(5))
    assert recs[-1].train_loss < recs[0].train_loss
    assert all(r.phase == "pre-prune" for r in recs)


def test_fit_noop(blobs16):
    net = toy(blobs16)
    before = {k: v.clone() for k, v in net.state_dict().items()}
    assert fit(net, blobs16, TrainSchedule(t_max=5), 0) == []
    assert all(torch.equal(before[k], v) for k, v in net.state_dict().items())
    with pytest.raises(ValueError):
        fit(net, blobs16, TrainSchedule(t_max=5), 6)


def test_fit_deterministic(blobs16):
    runs = []
    for _ in range(2):
        net = toy(blobs16)
        runs.append([r.train_loss for r in fit(net, blobs16, TrainSchedule(t_max=2, **SCHED), 2)])
    assert runs[0] == runs[1]


def test_divergence(blobs16):
    net = toy(blobs16)
    with pytest.raises(TrainingDiverged):
        fit(net, blobs16, TrainSchedule(t_max=3, lr=1e12, momentum=0.0, batch_size=64), 3)


def test_finetune_counts_and_recovery():
    data = load_dataset({"source": "synthetic", "classes": 4, "n": 1024, "val_n": 1024, "seed": 7, "size": 16})
    net = toy(data)
    sched = TrainSchedule(t_max=12, **SCHED)
    fit(net, data, sched, 6)
    remove_filters(net, "features.conv2", list(range(10)))
    remove_filters(net, "features.conv1", [0, 1, 2])
    pruned_acc = evaluate(net, data)
    recs = finetune(net, data, sched, 1, lr=sched.lr_at(6))
    assert len(recs) == 1 and recs[0].phase == "fine-tune"
    assert recs[0].val_accuracy >= pruned_acc - 0.5
    assert len(finetune(net, data, sched, 3, lr=0.005)) == 3
    with pytest.raises(ValueError):
        finetune(net, data, sched, 0, lr=0.01)


def test_pipeline_without_pruning(blobs16):
    cfg = RunConfig(P=0.0, t_p=2, t_max=4)
    res = full_pipeline(cfg, blobs16, TOY, TrainSchedule(t_max=4, **SCHED))
    assert res.log is None and res.status == "no-prune"
    assert [r.epoch for r in res.records] == [0, 1, 2, 3]


def test_pipeline_phases_and_outputs(blobs16, tmp_path):
    cfg = RunConfig(P=0.3, P_s=0.03, dP_ft=0.1, t_p=2, t_max=5, probe_size=64)
    sched = TrainSchedule(t_max=5, **SCHED)
    res = full_pipeline(cfg, blobs16, TOY, sched, tmp_path)
    phases = [r.phase for r in res.records]
    order = {"pre-prune": 0, "fine-tune": 1, "post-prune": 2}
    assert [order[p] for p in phases] == sorted(order[p] for p in phases)
    assert res.extras["post_prune_epochs"] == cfg.t_max - cfg.t_p
    assert res.extras["finetune_epochs"] == res.log.footer["finetune_calls"] * cfg.ft_epochs
    for name in ("pre_prune.ckpt", "pruned.ckpt", "final.ckpt", "prune_log.json", "epochs.log"):
        assert (tmp_path / name).is_file()
    lines = [json.loads(l) for l in (tmp_path / "epochs.log").read_text().splitlines()]
    assert len(lines) == len(res.records)
    assert res.log.header["probe_indices"] and res.log.header["finetune_lr"] == sched.lr_at(2)

    # shared schedule: post-prune lr per epoch equals the unpruned baseline's
    base = full_pipeline(RunConfig(P=0.0, t_p=2, t_max=5), blobs16, TOY, sched)
    base_lr = {r.epoch: r.lr for r in base.records}
    assert all(r.lr == base_lr[r.epoch] for r in res.records if r.phase == "post-prune")

    # resuming from the phase-boundary checkpoint replays the tail bit-identically
    net, _ = load_checkpoint(tmp_path / "pruned.ckpt")
    fit(net, blobs16, sched, 5, 2, "post-prune")
    final, _ = load_checkpoint(tmp_path / "final.ckpt")
    for (k, a), b in zip(net.state_dict().items(), final.state_dict().values()):
        assert torch.equal(a, b), k


def test_pipeline_rejects_bad_config(blobs16):
    with pytest.raises(ConfigError):
        full_pipeline(RunConfig(P=0.1, P_s=0.2, t_max=4, t_p=2), blobs16, TOY)
    with pytest.raises(ConfigError):
        full_pipeline(RunConfig(P=0.0, t_p=2, t_max=4), blobs16, TOY, TrainSchedule(t_max=5))
