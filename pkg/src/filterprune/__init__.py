"""Structured filter pruning with a greedy, probe-loss-driven choice of layer and criterion."""
from .criteria import CRITERIA, rank
from .flops_meter import exploration_steps, flops, pruning_rate
from .model_zoo import build_model, forward_loss, load_checkpoint, save_checkpoint
from .pruner import PruneLog, RunConfig, run
from .pruning_graph import build_groups, remove_filters, trace_channels

__version__ = "0.1.0"
