"""Architecture descriptors shared by the APIs and the meta model.

Tags:
    mlp-<depth>x<width>[-tanh]   flatten, <depth> hidden layers, linear head
    conv4-<filters>              four blocks of conv3x3 / BN / ReLU / maxpool2, linear head
"""

import re
from math import prod

import torch
from torch import nn

from services.errors import ConfigurationError

_MLP_TAG = re.compile(r"^mlp-(\d+)x(\d+)(-tanh)?$")
_CONV_TAG = re.compile(r"^conv4-(\d+)$")


def arch_fits(arch_tag: str, input_shape: tuple[int, ...]) -> bool:
    """Whether an architecture can consume inputs of this shape."""
    if _MLP_TAG.match(arch_tag):
        return True
    if _CONV_TAG.match(arch_tag):
        return len(input_shape) == 3 and input_shape[1] >= 16 and input_shape[2] >= 16
    return False


def build_network(
    arch_tag: str,
    input_shape: tuple[int, ...],
    num_classes: int,
    meta: bool = False,
) -> nn.Module:
    """
    Build a classifier from its tag.

    Args:
        arch_tag: architecture descriptor (see module docstring)
        input_shape: per-sample input shape
        num_classes: head width
        meta: meta models keep no BN running statistics, so every forward pass
            normalizes with the statistics of the batch it sees

    Returns:
        nn.Module producing logits
    """
    if match := _MLP_TAG.match(arch_tag):
        depth, width = int(match.group(1)), int(match.group(2))
        act = nn.Tanh if match.group(3) else nn.ReLU
        layers: list[nn.Module] = [nn.Flatten()]
        fan_in = prod(input_shape)
        for _ in range(depth):
            layers += [nn.Linear(fan_in, width), act()]
            fan_in = width
        layers.append(nn.Linear(fan_in, num_classes))
        return nn.Sequential(*layers)

    if match := _CONV_TAG.match(arch_tag):
        if not arch_fits(arch_tag, input_shape):
            raise ConfigurationError(f"{arch_tag} needs (channels, >=16, >=16) images, got {input_shape}")
        filters = int(match.group(1))
        layers = []
        channels = input_shape[0]
        for _ in range(4):
            layers += [
                nn.Conv2d(channels, filters, 3, stride=1, padding=1),
                nn.BatchNorm2d(filters, track_running_stats=not meta),
                nn.ReLU(),
                nn.MaxPool2d(2),
            ]
            channels = filters
        side_h, side_w = input_shape[1] // 16, input_shape[2] // 16
        layers += [nn.Flatten(), nn.Linear(filters * side_h * side_w, num_classes)]
        return nn.Sequential(*layers)

    raise ConfigurationError(f"Unknown architecture tag: {arch_tag}")


def seeded_network(
    arch_tag: str,
    input_shape: tuple[int, ...],
    num_classes: int,
    seed: int,
    meta: bool = False,
    dtype: torch.dtype = torch.float32,
) -> nn.Module:
    """Build a network whose initialization depends only on `seed`."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = build_network(arch_tag, input_shape, num_classes, meta=meta)
    return net.to(dtype)
