"""CNN builders used for pruning experiments.

Architecture descriptors are plain strings so they can travel inside
checkpoints and manifests:

    vgg16, vgg-16, vgg11 ...        CIFAR-style VGG with BN (input >= 32x32)
    resnet20, resnet-56 ...         3-stage basic-block ResNet, depth = 6n + 2
    resnet18-shape                  ImageNet-shaped ResNet-18 (FLOPs studies)
    toy-chain[8,16]                 small conv chain with BN, for tests
    toy-chain[8,16]/plain           same chain without BN and without biases
    toy-chain[8,16]/bias            BN-free chain with conv biases
"""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1

VGG_CONFIGS = {
    11: [64, "M", 128, "M", 256, 256, "M", 512, 512, "M", 512, 512, "M"],
    13: [64, 64, "M", 128, 128, "M", 256, 256, "M", 512, 512, "M", 512, 512, "M"],
    16: [64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512, "M"],
    19: [64, 64, "M", 128, 128, "M", 256, 256, 256, 256, "M", 512, 512, 512, 512, "M",
         512, 512, 512, 512, "M"],
}


class ArchError(ValueError):
    pass


@dataclass(frozen=True)
class LayerInfo:
    name: str
    kind: str  # conv | norm | linear | add-junction | pool | activation
    out_channels: int | None = None
    in_channels: int | None = None
    kernel: int | None = None
    prunable: bool = False


class Network(nn.Module):
    """Base class for every zoo model.

    Carries the descriptor, class count and input shape so that surgery,
    FLOPs counting and checkpointing need nothing but the module itself.
    ``member_only`` lists convs that follow their group but never drive
    pruning (residual downsample 1x1s).
    """

    def __init__(self, arch: str, class_count: int, input_shape: tuple[int, int, int]):
        super().__init__()
        self.arch = arch
        self.class_count = class_count
        self.input_shape = tuple(input_shape)
        self.member_only: set[str] = set()

    def conv_names(self) -> list[str]:
        return [n for n, m in self.named_modules() if isinstance(m, nn.Conv2d)]

    def prunable_layers(self) -> list[str]:
        from .pruning_graph import prunable_layers
        return prunable_layers(self)

    def layers(self) -> list[LayerInfo]:
        from .pruning_graph import layer_table
        return layer_table(self)


class ToyChain(Network):
    def __init__(self, arch, widths, class_count, input_shape, batchnorm=True, bias=False):
        super().__init__(arch, class_count, input_shape)
        if not 1 <= len(widths) <= 4:
            raise ArchError(f"toy-chain takes 1-4 conv widths, got {widths}")
        layers = []
        c_in = input_shape[0]
        for i, w in enumerate(widths, start=1):
            layers.append((f"conv{i}", nn.Conv2d(c_in, w, 3, padding=1, bias=bias)))
            if batchnorm:
                layers.append((f"bn{i}", nn.BatchNorm2d(w)))
            layers.append((f"relu{i}", nn.ReLU()))
            c_in = w
        self.features = nn.Sequential()
        for name, mod in layers:
            self.features.add_module(name, mod)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(c_in, class_count)

    def forward(self, x):
        x = self.pool(self.features(x))
        return self.fc(torch.flatten(x, 1))


class VGG(Network):
    def __init__(self, arch, depth, class_count, input_shape):
        super().__init__(arch, class_count, input_shape)
        if input_shape[1] < 32 or input_shape[2] < 32:
            raise ArchError("vgg needs inputs of at least 32x32")
        self.features = nn.Sequential()
        c_in = input_shape[0]
        n_conv = n_pool = 0
        for v in VGG_CONFIGS[depth]:
            if v == "M":
                n_pool += 1
                self.features.add_module(f"pool{n_pool}", nn.MaxPool2d(2))
            else:
                n_conv += 1
                self.features.add_module(f"conv{n_conv}", nn.Conv2d(c_in, v, 3, padding=1, bias=False))
                self.features.add_module(f"bn{n_conv}", nn.BatchNorm2d(v))
                self.features.add_module(f"relu{n_conv}", nn.ReLU())
                c_in = v
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.classifier = nn.Sequential(
            nn.Linear(c_in, 512), nn.ReLU(), nn.Linear(512, class_count))

    def forward(self, x):
        x = self.pool(self.features(x))
        return self.classifier(torch.flatten(x, 1))


class BasicBlock(nn.Module):
    def __init__(self, c_in, c_out, stride):
        super().__init__()
        self.conv_a = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False)
        self.bn_a = nn.BatchNorm2d(c_out)
        self.conv_b = nn.Conv2d(c_out, c_out, 3, padding=1, bias=False)
        self.bn_b = nn.BatchNorm2d(c_out)
        self.downsample = None
        if stride != 1 or c_in != c_out:
            self.downsample = nn.Sequential(
                nn.Conv2d(c_in, c_out, 1, stride=stride, bias=False), nn.BatchNorm2d(c_out))

    def forward(self, x):
        out = F.relu(self.bn_a(self.conv_a(x)))
        out = self.bn_b(self.conv_b(out))
        shortcut = x if self.downsample is None else self.downsample(x)
        return F.relu(out + shortcut)


class ResNet(Network):
    """Basic-block ResNet; ``imagenet_stem`` selects the 7x7/maxpool stem."""

    def __init__(self, arch, blocks, widths, class_count, input_shape, imagenet_stem=False):
        super().__init__(arch, class_count, input_shape)
        c0 = widths[0]
        if imagenet_stem:
            self.conv1 = nn.Conv2d(input_shape[0], c0, 7, stride=2, padding=3, bias=False)
        else:
            self.conv1 = nn.Conv2d(input_shape[0], c0, 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(c0)
        self.maxpool = nn.MaxPool2d(3, stride=2, padding=1) if imagenet_stem else None
        c_in = c0
        for s, (n, w) in enumerate(zip(blocks, widths), start=1):
            stage = nn.Sequential()
            for b in range(n):
                stride = 2 if (s > 1 and b == 0) else 1
                stage.add_module(str(b), BasicBlock(c_in, w, stride))
                c_in = w
            self.add_module(f"layer{s}", stage)
        self.n_stages = len(blocks)
        self.avgpool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(c_in, class_count)
        self.member_only = {n for n, m in self.named_modules()
                            if isinstance(m, nn.Conv2d) and ".downsample." in n}

    def forward(self, x):
        x = F.relu(self.bn1(self.conv1(x)))
        if self.maxpool is not None:
            x = self.maxpool(x)
        for s in range(1, self.n_stages + 1):
            x = getattr(self, f"layer{s}")(x)
        x = self.avgpool(x)
        return self.fc(torch.flatten(x, 1))


def _init_weights(net: nn.Module):
    for m in net.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def parse_arch(arch: str) -> dict:
    """Split a descriptor into builder arguments; raises ArchError."""
    a = arch.strip().lower()
    m = re.fullmatch(r"toy-chain\[([\d,\s]+)\](?:/(plain|bias))?", a)
    if m:
        widths = [int(w) for w in m.group(1).split(",") if w.strip()]
        variant = m.group(2)
        return {"family": "toy-chain", "widths": widths,
                "batchnorm": variant is None, "bias": variant == "bias"}
    m = re.fullmatch(r"vgg-?(\d+)", a)
    if m:
        depth = int(m.group(1))
        if depth not in VGG_CONFIGS:
            raise ArchError(f"unsupported vgg depth {depth}; choose from {sorted(VGG_CONFIGS)}")
        return {"family": "vgg", "depth": depth}
    if a in ("resnet18-shape", "resnet-18-shape"):
        return {"family": "resnet18-shape"}
    m = re.fullmatch(r"resnet-?(\d+)", a)
    if m:
        depth = int(m.group(1))
        if depth < 8 or (depth - 2) % 6 != 0:
            raise ArchError(f"resnet depth must be 6n+2 (8, 14, 20, 32, 56, 110 ...), got {depth}")
        return {"family": "resnet", "depth": depth}
    raise ArchError(f"unknown architecture descriptor {arch!r}")


def default_input_shape(arch: str) -> tuple[int, int, int]:
    return (3, 224, 224) if parse_arch(arch)["family"] == "resnet18-shape" else (3, 32, 32)


def build_model(arch: str, class_count: int, seed: int = 0,
                input_shape: tuple[int, int, int] | None = None) -> Network:
    """Build a freshly initialised network; deterministic in (arch, seed)."""
    spec = parse_arch(arch)
    if class_count < 1:
        raise ArchError("class_count must be positive")
    input_shape = tuple(input_shape or default_input_shape(arch))
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        fam = spec["family"]
        if fam == "toy-chain":
            net = ToyChain(arch, spec["widths"], class_count, input_shape,
                           batchnorm=spec["batchnorm"], bias=spec["bias"])
        elif fam == "vgg":
            net = VGG(arch, spec["depth"], class_count, input_shape)
        elif fam == "resnet":
            n = (spec["depth"] - 2) // 6
            net = ResNet(arch, [n, n, n], [16, 32, 64], class_count, input_shape)
        else:
            net = ResNet(arch, [2, 2, 2, 2], [64, 128, 256, 512], class_count, input_shape,
                         imagenet_stem=True)
        _init_weights(net)
    return net.eval()


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(logits, labels)


@torch.no_grad()
def forward_loss(net: nn.Module, images: torch.Tensor, labels: torch.Tensor) -> float:
    """Mean cross-entropy of ``net`` in eval mode; training mode is restored."""
    if images.shape[0] == 0:
        raise ValueError("empty batch")
    if images.shape[0] != labels.shape[0]:
        raise ValueError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    expected = getattr(net, "input_shape", None)
    if expected is not None and tuple(images.shape[1:]) != tuple(expected):
        raise ValueError(f"batch shape {tuple(images.shape[1:])} != input shape {tuple(expected)}")
    n_cls = getattr(net, "class_count", None)
    if n_cls is not None and (labels.min() < 0 or labels.max() >= n_cls):
        raise ValueError(f"labels outside [0, {n_cls})")
    was_training = net.training
    net.eval()
    try:
        return float(cross_entropy(net(images), labels))
    finally:
        net.train(was_training)


def count_params(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def save_checkpoint(net: Network, path, prune_log: str | None = None, extra: dict | None = None):
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "arch": net.arch,
        "class_count": net.class_count,
        "input_shape": list(net.input_shape),
        "state_dict": net.state_dict(),
        "prune_log": prune_log,
        "extra": extra or {},
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[Network, dict]:
    """Rebuild the architecture, reshape pruned layers, then load tensors."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    net = build_model(payload["arch"], payload["class_count"],
                      input_shape=tuple(payload["input_shape"]))
    reshape_to_state(net, payload["state_dict"])
    net.load_state_dict(payload["state_dict"])
    net.eval()
    return net, payload


def reshape_to_state(net: nn.Module, state: dict):
    """Resize conv/bn/linear modules in place to the shapes stored in ``state``."""
    for name, mod in net.named_modules():
        prefix = f"{name}." if name else ""
        if isinstance(mod, nn.Conv2d):
            w = state[prefix + "weight"]
            mod.out_channels, mod.in_channels = w.shape[0], w.shape[1]
            mod.weight = nn.Parameter(torch.empty_like(w))
            if mod.bias is not None:
                mod.bias = nn.Parameter(torch.empty(w.shape[0]))
        elif isinstance(mod, nn.BatchNorm2d):
            n = state[prefix + "weight"].shape[0]
            mod.num_features = n
            mod.weight = nn.Parameter(torch.empty(n))
            mod.bias = nn.Parameter(torch.empty(n))
            mod.running_mean = torch.zeros(n)
            mod.running_var = torch.ones(n)
        elif isinstance(mod, nn.Linear):
            w = state[prefix + "weight"]
            mod.out_features, mod.in_features = w.shape
            mod.weight = nn.Parameter(torch.empty_like(w))
            if mod.bias is not None:
                mod.bias = nn.Parameter(torch.empty(w.shape[0]))
