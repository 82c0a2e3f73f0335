"""Tiny parameterized models and self-describing checkpoints.

The conv net is a stack of Conv3x3-BN-ReLU-MaxPool blocks followed by
global average pooling; the penultimate representation is the pooled
vector. Weight init is driven by an explicit generator so model
construction never touches global RNG state.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict
from pathlib import Path
from typing import List, Optional, Tuple

import torch
import torch.nn as nn

from ..errors import ConfigError
from .config import ArchSpec


class TinyConvNet(nn.Module):
    def __init__(self, spec: ArchSpec):
        super().__init__()
        self.spec = spec
        blocks = []
        in_ch = spec.in_channels
        for w in spec.widths:
            blocks.append(nn.Sequential(
                nn.Conv2d(in_ch, w, kernel_size=3, padding=1, bias=False),
                nn.BatchNorm2d(w),
                nn.ReLU(inplace=True),
                nn.MaxPool2d(2),
            ))
            in_ch = w
        self.blocks = nn.ModuleList(blocks)
        self.classifier = nn.Linear(in_ch, spec.classes)
        self.penultimate_dim = in_ch

    def forward_full(self, x) -> Tuple[torch.Tensor, torch.Tensor, List[torch.Tensor]]:
        """Returns (logits, pooled features, per-block activations)."""
        acts = []
        h = x
        for block in self.blocks:
            h = block(h)
            acts.append(h)
        feats = h.mean(dim=(2, 3))
        return self.classifier(feats), feats, acts

    def features(self, x) -> torch.Tensor:
        return self.forward_full(x)[1]

    def forward(self, x) -> torch.Tensor:
        return self.forward_full(x)[0]


class TinyMLP(nn.Module):
    def __init__(self, spec: ArchSpec):
        super().__init__()
        self.spec = spec
        dims = [spec.in_dim] + list(spec.widths)
        self.hidden = nn.ModuleList(
            nn.Linear(dims[i], dims[i + 1]) for i in range(len(dims) - 1))
        self.classifier = nn.Linear(dims[-1], spec.classes)
        self.penultimate_dim = dims[-1]

    def forward_full(self, x):
        acts = []
        h = x
        for lin in self.hidden:
            h = torch.relu(lin(h))
            acts.append(h)
        return self.classifier(h), h, acts

    def features(self, x) -> torch.Tensor:
        return self.forward_full(x)[1]

    def forward(self, x) -> torch.Tensor:
        return self.forward_full(x)[0]


def _init_params(module: nn.Module, generator: torch.Generator) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight.shape[1] * (m.weight[0, 0].numel()
                                          if isinstance(m, nn.Conv2d) else 1)
            std = (2.0 / fan_in) ** 0.5
            nn.init.normal_(m.weight, mean=0.0, std=std, generator=generator)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def build_model(spec: ArchSpec, seed: int = 0) -> nn.Module:
    """Construct and deterministically initialize a model from its spec."""
    spec.validate()
    if spec.kind == "conv":
        size = spec.image_size
        if size // (2 ** len(spec.widths)) < 1:
            raise ConfigError("arch.widths", "too many blocks for the image size")
        net = TinyConvNet(spec)
    else:
        net = TinyMLP(spec)
    gen = torch.Generator().manual_seed(int(seed))
    _init_params(net, gen)
    return net


def save_checkpoint(module: nn.Module, spec: ArchSpec, path) -> None:
    """Self-describing checkpoint: architecture descriptor + parameters."""
    torch.save({"arch": asdict(spec), "state": module.state_dict()}, path)


def load_checkpoint(path) -> Tuple[nn.Module, ArchSpec]:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    spec = ArchSpec(**blob["arch"])
    if isinstance(spec.widths, list):
        spec.widths = tuple(spec.widths)
    net = build_model(spec, seed=0)
    net.load_state_dict(blob["state"])
    net.eval()
    return net, spec


def param_checksum(module: nn.Module) -> str:
    """Order-stable digest over all parameters and buffers."""
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()
