"""Adaptive feature-mask sampler, random structure masks and the REINFORCE loss."""

from __future__ import annotations

import math
from typing import Optional

import torch
from torch import nn

from .errors import InvalidRate, NonFiniteInput, NumericalUnderflow, ShapeMismatch
from .graph import num_masked_nodes


class AdaptiveSampler(nn.Module):
    """Scores nodes with self-attention over the feature rows and a per-node FFN.

    Attention runs over all node pairs with no graph structure, so memory is
    O(N^2 * heads). The output is a categorical distribution over nodes.
    """

    def __init__(self, feature_dim: int, dim: int = 32, heads: int = 4):
        super().__init__()
        if dim % heads:
            raise ValueError(f"sampler width {dim} is not divisible by {heads} heads")
        self.feature_dim = feature_dim
        self.dim = dim
        self.heads = heads
        self.embed = nn.Linear(feature_dim, dim)
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)
        self.ffn = nn.Sequential(nn.Linear(dim, dim), nn.ReLU(), nn.Linear(dim, 1))
        self.last_scores: Optional[torch.Tensor] = None

    def mha(self, x: torch.Tensor) -> torch.Tensor:
        n = x.shape[0]
        e = self.embed(x)
        hd = self.dim // self.heads
        q = self.q(e).view(n, self.heads, hd).transpose(0, 1)
        k = self.k(e).view(n, self.heads, hd).transpose(0, 1)
        v = self.v(e).view(n, self.heads, hd).transpose(0, 1)
        att = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(hd), dim=-1)
        return self.out((att @ v).transpose(0, 1).reshape(n, self.dim))

    def log_scores(self, x: torch.Tensor) -> torch.Tensor:
        """log P for every node, shape ``[N]``."""
        if x.dim() != 2 or x.shape[1] != self.feature_dim:
            raise ShapeMismatch(f"sampler expects width {self.feature_dim}, got {tuple(x.shape)}")
        if x.shape[0] < 1:
            raise ShapeMismatch("cannot score an empty node set")
        if not torch.isfinite(x).all():
            raise NonFiniteInput("node features contain NaN or inf")
        logits = self.ffn(self.mha(x)).squeeze(-1)
        log_p = torch.log_softmax(logits, dim=0)
        self.last_scores = log_p.detach().exp()
        return log_p

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.log_scores(x).exp()


def score_nodes(sampler: AdaptiveSampler, features: torch.Tensor) -> torch.Tensor:
    return sampler(features)


def _check_feature_rate(p_f: float):
    if not (0.0 < p_f <= 1.0):
        raise InvalidRate(f"feature mask rate must lie in (0, 1], got {p_f}")


def gumbel_top_k(log_p: torch.Tensor, k: int, generator: torch.Generator,
                 num_samples: Optional[int] = None) -> torch.Tensor:
    """Draw ``k`` distinct indices, distributed as sequential draws without replacement.

    With ``num_samples`` returns a ``[num_samples, k]`` batch of independent draws.
    """
    n = log_p.shape[0]
    shape = (n,) if num_samples is None else (num_samples, n)
    u = torch.rand(shape, dtype=torch.float64, generator=generator)
    u = u.clamp_min(torch.finfo(torch.float64).tiny)
    keys = log_p.detach().to(torch.float64) - torch.log(-torch.log(u))
    return torch.sort(torch.topk(keys, k, dim=-1).indices, dim=-1).values


def sample_feature_mask(P: torch.Tensor, p_f: float, generator: torch.Generator,
                        log_p: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Sorted ids of the masked nodes, drawn from ``P`` without replacement.

    Pass ``log_p`` when it is available; it avoids log(0) for tiny scores.
    """
    _check_feature_rate(p_f)
    n = P.shape[0]
    k = num_masked_nodes(n, p_f)
    if log_p is None:
        log_p = torch.log(P.detach())
    return gumbel_top_k(log_p, k, generator)


def sample_uniform_mask(num_nodes: int, p_f: float, generator: torch.Generator) -> torch.Tensor:
    """Random masking without a learned sampler."""
    _check_feature_rate(p_f)
    k = num_masked_nodes(num_nodes, p_f)
    return torch.sort(torch.randperm(num_nodes, generator=generator)[:k]).values


def sample_structure_mask(num_edges: int, p_s: float, generator: torch.Generator) -> torch.Tensor:
    """Indices of edges masked by independent Bernoulli(p_s) draws."""
    if not (0.0 <= p_s < 1.0):
        raise InvalidRate(f"structure mask rate must lie in [0, 1), got {p_s}")
    draws = torch.rand(num_edges, dtype=torch.float64, generator=generator)
    return torch.nonzero(draws < p_s, as_tuple=False).reshape(-1)


def sampling_loss(P: Optional[torch.Tensor], masked_nodes: torch.Tensor, per_node_fr_loss: torch.Tensor,
                  log_p: Optional[torch.Tensor] = None, baseline: bool = False) -> torch.Tensor:
    """REINFORCE loss -sum_v log(P_v) * L_FR_v over the masked nodes.

    ``per_node_fr_loss`` is aligned with ``masked_nodes`` and is detached here,
    so only the sampler receives gradient. With ``baseline`` the mean reward is
    subtracted first.
    """
    masked_nodes = torch.as_tensor(masked_nodes, dtype=torch.long)
    if log_p is None:
        picked = P[masked_nodes]
        if (picked <= 0).any():
            raise NumericalUnderflow("a masked node has zero sampling probability")
        log_picked = torch.log(picked)
    else:
        log_picked = log_p[masked_nodes]
        if torch.isinf(log_picked).any():
            raise NumericalUnderflow("a masked node has zero sampling probability")
    rewards = per_node_fr_loss.detach().to(log_picked.dtype)
    if rewards.shape != log_picked.shape:
        raise ShapeMismatch(f"{rewards.shape[0]} rewards for {log_picked.shape[0]} masked nodes")
    if baseline and rewards.numel() > 0:
        rewards = rewards - rewards.mean()
    return -(log_picked * rewards).sum()
