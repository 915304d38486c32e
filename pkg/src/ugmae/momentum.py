"""Exponential-moving-average shadows of the encoder and decoder."""

from __future__ import annotations

import copy

import torch
from torch import nn

from .errors import ShapeMismatch


class EmaShadow:
    """A frozen copy of a module whose parameters track an EMA of the source.

    The shadow is kept out of ``nn.Module`` trees on purpose: it is never
    registered with an optimizer and its tensors never require grad.
    """

    def __init__(self, module: nn.Module, tau: float = 0.996):
        if not 0.0 <= tau <= 1.0:
            raise ValueError(f"tau must lie in [0, 1], got {tau}")
        self.module = module
        self.tau = tau
        for p in self.module.parameters():
            p.requires_grad_(False)

    def parameters(self):
        return self.module.parameters()

    def named_parameters(self):
        return self.module.named_parameters()

    def state_dict(self) -> dict:
        return self.module.state_dict()

    def load_state_dict(self, state: dict):
        self.module.load_state_dict(state)

    def __call__(self, edges, x: torch.Tensor) -> torch.Tensor:
        return momentum_forward(self, edges, x)


def init_shadow(source: nn.Module, tau: float = 0.996) -> EmaShadow:
    return EmaShadow(copy.deepcopy(source), tau)


@torch.no_grad()
def ema_update(shadow: EmaShadow, source: nn.Module, tau: float | None = None) -> EmaShadow:
    """theta_shadow <- tau * theta_shadow + (1 - tau) * theta_source, in place."""
    tau = shadow.tau if tau is None else tau
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    src = dict(source.named_parameters())
    dst = dict(shadow.named_parameters())
    if src.keys() != dst.keys():
        raise ShapeMismatch(f"parameter names differ: {sorted(src.keys() ^ dst.keys())}")
    for name, s in dst.items():
        p = src[name]
        if p.shape != s.shape:
            raise ShapeMismatch(f"{name}: shadow {tuple(s.shape)} vs source {tuple(p.shape)}")
        s.copy_(tau * s + (1.0 - tau) * p.detach())
    return shadow


def momentum_forward(shadow: EmaShadow, edges, x: torch.Tensor) -> torch.Tensor:
    """Run the shadow module without building any autograd graph."""
    with torch.no_grad():
        out = shadow.module(edges, x.detach())
    return out.detach()
