"""Low-rank adapters on the attention projections."""
from __future__ import annotations

import math

import torch
from torch import nn

from .model import LoraLinear, ToyModel

DEFAULT_RANK = 32
DEFAULT_ALPHA = 32.0


class LoraAdapter(nn.Module):
    """A and B matrices for every q/k/v/o projection of a model."""

    def __init__(self, shapes: dict, rank: int = DEFAULT_RANK, alpha: float = DEFAULT_ALPHA, seed: int = 0):
        super().__init__()
        if rank < 1:
            raise ValueError(f"rank must be >= 1, got {rank}")
        self.rank = int(rank)
        self.alpha = float(alpha)
        self.names = sorted(shapes)
        self.A = nn.ParameterDict()
        self.B = nn.ParameterDict()
        g = torch.Generator().manual_seed(seed)
        for name in self.names:
            out_f, in_f = shapes[name]
            key = name.replace(".", "_")
            A = torch.empty(rank, in_f)
            # kaiming_uniform(a=sqrt(5)) with an explicit generator
            bound = 1.0 / math.sqrt(in_f)
            A.uniform_(-bound, bound, generator=g)
            self.A[key] = nn.Parameter(A)
            self.B[key] = nn.Parameter(torch.zeros(out_f, rank))

    @classmethod
    def for_model(cls, model: ToyModel, rank: int = DEFAULT_RANK, alpha: float = DEFAULT_ALPHA, seed: int = 0):
        shapes = {n: tuple(l.base.weight.shape) for n, l in model.lora_layers().items()}
        return cls(shapes, rank, alpha, seed)

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def pair(self, name: str):
        key = name.replace(".", "_")
        return self.A[key], self.B[key]


def lora_mount(model: ToyModel, adapter: LoraAdapter) -> None:
    layers = model.lora_layers()
    if set(layers) != set(adapter.names):
        raise ValueError("adapter targets do not match the model's attention projections")
    for name, layer in layers.items():
        A, B = adapter.pair(name)
        layer.mount(A, B, adapter.alpha)


def lora_unmount(model: ToyModel) -> None:
    for layer in model.lora_layers().values():
        layer.unmount()


def lora_forward(layer: LoraLinear, x: torch.Tensor) -> torch.Tensor:
    return layer(x)


def merged_weight(layer: LoraLinear) -> torch.Tensor:
    W = layer.base.weight
    if not layer.mounted:
        return W.detach().clone()
    return (W + layer.scaling * layer.lora_B @ layer.lora_A).detach()


def merge_into(model: ToyModel) -> None:
    """Fold mounted adapters into the base weights and unmount them."""
    with torch.no_grad():
        for layer in model.lora_layers().values():
            if layer.mounted:
                layer.base.weight.copy_(merged_weight(layer))
                layer.unmount()
