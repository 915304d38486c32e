"""Message-passing encoder/decoder stacks, mask tokens and projection head.

Every layer consumes ``(edges, x)`` where ``edges`` is a ``[E, 2]`` long tensor
of directed ``(src, dst)`` arcs; messages flow from ``src`` into ``dst``.
"""

from __future__ import annotations

import math
from enum import Enum

import torch
from torch import nn
import torch.nn.functional as F

from .errors import ShapeMismatch
from .graph import replace_rows


class Arch(str, Enum):
    GAT = "gat"
    GIN = "gin"
    GCN = "gcn"
    MLP = "mlp"


ACTIVATIONS = {
    "relu": nn.ReLU,
    "elu": nn.ELU,
    "prelu": nn.PReLU,
    "tanh": nn.Tanh,
    "gelu": nn.GELU,
}


def make_activation(name: str) -> nn.Module:
    try:
        return ACTIVATIONS[name]()
    except KeyError:
        raise ValueError(f"unknown activation {name!r}; choose from {sorted(ACTIVATIONS)}") from None


def _linear(in_dim: int, out_dim: int, bias: bool = True) -> nn.Linear:
    lin = nn.Linear(in_dim, out_dim, bias=bias)
    bound = 1.0 / math.sqrt(in_dim)
    nn.init.uniform_(lin.weight, -bound, bound)
    if bias:
        nn.init.zeros_(lin.bias)
    return lin


def with_self_loops(edges: torch.Tensor, num_nodes: int) -> torch.Tensor:
    """Drop any existing self-loops, then add exactly one per node."""
    keep = edges[:, 0] != edges[:, 1]
    loops = torch.arange(num_nodes, device=edges.device).unsqueeze(1).expand(-1, 2)
    return torch.cat([edges[keep], loops], dim=0)


class GATLayer(nn.Module):
    def __init__(self, in_dim: int, head_dim: int, heads: int = 1, concat: bool = True,
                 negative_slope: float = 0.2):
        super().__init__()
        self.heads = heads
        self.head_dim = head_dim
        self.concat = concat
        self.negative_slope = negative_slope
        self.lin = _linear(in_dim, heads * head_dim, bias=False)
        bound = 1.0 / math.sqrt(head_dim)
        self.att_src = nn.Parameter(torch.empty(heads, head_dim).uniform_(-bound, bound))
        self.att_dst = nn.Parameter(torch.empty(heads, head_dim).uniform_(-bound, bound))
        self.bias = nn.Parameter(torch.zeros(heads * head_dim if concat else head_dim))

    def forward(self, edges: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        n = x.shape[0]
        edges = with_self_loops(edges, n)
        src, dst = edges[:, 0], edges[:, 1]
        wh = self.lin(x).view(n, self.heads, self.head_dim)
        s = (wh * self.att_src).sum(-1)
        t = (wh * self.att_dst).sum(-1)
        e = F.leaky_relu(s[src] + t[dst], self.negative_slope)
        # shift by a detached per-destination max; softmax is shift invariant
        emax = torch.full((n, self.heads), -math.inf, dtype=e.dtype, device=e.device)
        emax = emax.scatter_reduce(0, dst.unsqueeze(1).expand_as(e), e.detach(), "amax")
        w = torch.exp(e - emax[dst])
        denom = torch.zeros(n, self.heads, dtype=e.dtype, device=e.device).index_add(0, dst, w)
        alpha = w / denom[dst]
        out = torch.zeros_like(wh).index_add(0, dst, alpha.unsqueeze(-1) * wh[src])
        out = out.reshape(n, -1) if self.concat else out.mean(dim=1)
        return out + self.bias


class GCNLayer(nn.Module):
    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.lin = _linear(in_dim, out_dim, bias=False)
        self.bias = nn.Parameter(torch.zeros(out_dim))

    def forward(self, edges: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        n = x.shape[0]
        edges = with_self_loops(edges, n)
        src, dst = edges[:, 0], edges[:, 1]
        deg = torch.zeros(n, dtype=x.dtype, device=x.device).index_add(
            0, dst, torch.ones(dst.shape[0], dtype=x.dtype, device=x.device))
        inv_sqrt = deg.pow(-0.5)
        norm = (inv_sqrt[src] * inv_sqrt[dst]).unsqueeze(1)
        h = self.lin(x)
        out = torch.zeros(n, h.shape[1], dtype=h.dtype, device=h.device).index_add(0, dst, norm * h[src])
        return out + self.bias


class GINLayer(nn.Module):
    """Sum aggregation followed by a two-layer MLP, with a learnable self weight."""

    def __init__(self, in_dim: int, out_dim: int, activation: str = "elu"):
        super().__init__()
        self.eps = nn.Parameter(torch.zeros(1))
        self.mlp = nn.Sequential(_linear(in_dim, out_dim), make_activation(activation), _linear(out_dim, out_dim))

    def forward(self, edges: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        src, dst = edges[:, 0], edges[:, 1]
        agg = torch.zeros_like(x).index_add(0, dst, x[src])
        return self.mlp((1 + self.eps) * x + agg)


class MLPLayer(nn.Module):
    """Feature-only transform; the edge list is ignored."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.lin = _linear(in_dim, out_dim)

    def forward(self, edges: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        return self.lin(x)


class GNNStack(nn.Module):
    """A stack of ``num_layers`` message-passing layers of one architecture.

    Attention stacks use ``heads`` concatenated heads in every hidden layer and a
    single head at the output layer.
    """

    def __init__(self, arch: Arch | str, in_dim: int, hidden_dim: int, out_dim: int,
                 num_layers: int = 2, heads: int = 4, activation: str = "elu",
                 last_activation: bool = True):
        super().__init__()
        if num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        self.arch = Arch(arch)
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.layers = nn.ModuleList()
        self.acts = nn.ModuleList()
        for i in range(num_layers):
            d_in = in_dim if i == 0 else hidden_dim
            last = i == num_layers - 1
            d_out = out_dim if last else hidden_dim
            self.layers.append(self._make_layer(d_in, d_out, heads=1 if last else heads, activation=activation))
            self.acts.append(make_activation(activation) if (not last or last_activation) else nn.Identity())

    def _make_layer(self, d_in, d_out, heads, activation):
        if self.arch is Arch.GAT:
            if d_out % heads:
                raise ValueError(f"hidden width {d_out} is not divisible by {heads} attention heads")
            return GATLayer(d_in, d_out // heads, heads=heads, concat=True)
        if self.arch is Arch.GIN:
            return GINLayer(d_in, d_out, activation=activation)
        if self.arch is Arch.GCN:
            return GCNLayer(d_in, d_out)
        return MLPLayer(d_in, d_out)

    def forward(self, edges: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 2 or x.shape[1] != self.in_dim:
            raise ShapeMismatch(f"expected input width {self.in_dim}, got shape {tuple(x.shape)}")
        edges = torch.as_tensor(edges, dtype=torch.long, device=x.device).reshape(-1, 2)
        h = x
        for layer, act in zip(self.layers, self.acts):
            h = act(layer(edges, h))
        return h


class Backbone(nn.Module):
    """Encoder f_E, decoder f_D, the [FMASK]/[DM] tokens and the shared projection."""

    def __init__(self, feature_dim: int, hidden_dim: int = 64, arch: Arch | str = Arch.GAT,
                 num_layers: int = 2, decoder_layers: int = 1, heads: int = 4,
                 activation: str = "elu", proj_activation: str = "prelu"):
        super().__init__()
        self.feature_dim = feature_dim
        self.hidden_dim = hidden_dim
        self.arch = Arch(arch)
        self.encoder = GNNStack(arch, feature_dim, hidden_dim, hidden_dim, num_layers=num_layers,
                                heads=heads, activation=activation, last_activation=True)
        self.decoder = GNNStack(arch, hidden_dim, hidden_dim, feature_dim, num_layers=decoder_layers,
                                heads=heads, activation=activation, last_activation=False)
        self.fmask_token = nn.Parameter(torch.zeros(feature_dim))
        self.dm_token = nn.Parameter(torch.zeros(hidden_dim))
        self.proj = nn.Sequential(_linear(hidden_dim, hidden_dim), make_activation(proj_activation),
                                  _linear(hidden_dim, hidden_dim))

    def encode(self, edges, features: torch.Tensor) -> torch.Tensor:
        return self.encoder(edges, features)

    def decode(self, edges, h: torch.Tensor) -> torch.Tensor:
        return self.decoder(edges, h)

    def project(self, h: torch.Tensor) -> torch.Tensor:
        if h.dim() != 2 or h.shape[1] != self.hidden_dim:
            raise ShapeMismatch(f"projection expects width {self.hidden_dim}, got {tuple(h.shape)}")
        return self.proj(h)

    def remask(self, h: torch.Tensor, masked_nodes: torch.Tensor) -> torch.Tensor:
        return remask(h, masked_nodes, self.dm_token)


def remask(h: torch.Tensor, masked_nodes: torch.Tensor, dm_token: torch.Tensor) -> torch.Tensor:
    """Overwrite the rows of ``h`` at ``masked_nodes`` with ``dm_token``."""
    if dm_token.dim() != 1 or h.dim() != 2 or dm_token.shape[0] != h.shape[1]:
        raise ShapeMismatch(f"token shape {tuple(dm_token.shape)} does not fit hidden matrix {tuple(h.shape)}")
    return replace_rows(h, torch.as_tensor(masked_nodes, dtype=torch.long), dm_token)
