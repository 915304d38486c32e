"""Graph data model and the two masking transforms."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import torch

from .errors import DuplicateEdge, InvalidEdge, InvalidRate, ShapeMismatch


@dataclass
class Graph:
    """A graph with dense node features.

    ``edges`` is a ``[E, 2]`` long tensor of directed ``(src, dst)`` arcs.
    Undirected graphs store every edge in both directions.
    """

    num_nodes: int
    edges: torch.Tensor
    features: torch.Tensor
    labels: Optional[torch.Tensor] = None

    def __post_init__(self):
        self.edges = torch.as_tensor(self.edges, dtype=torch.long).reshape(-1, 2)
        self.features = torch.as_tensor(self.features)
        if not torch.is_floating_point(self.features):
            self.features = self.features.float()
        if self.labels is not None:
            self.labels = torch.as_tensor(self.labels, dtype=torch.long)

    @property
    def num_edges(self) -> int:
        return int(self.edges.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1]) if self.features.dim() == 2 else 0

    @property
    def num_classes(self) -> int:
        if self.labels is None or self.labels.numel() == 0:
            return 0
        return int(self.labels.max()) + 1

    def to(self, dtype: torch.dtype) -> "Graph":
        return Graph(self.num_nodes, self.edges, self.features.to(dtype), self.labels)

    def is_undirected(self) -> bool:
        fwd = set(map(tuple, self.edges.tolist()))
        return all((d, s) in fwd for s, d in fwd)


@dataclass
class MaskPlan:
    masked_nodes: torch.Tensor = field(default_factory=lambda: torch.empty(0, dtype=torch.long))
    masked_edges: torch.Tensor = field(default_factory=lambda: torch.empty(0, dtype=torch.long))
    p_f: float = 0.0
    p_s: float = 0.0

    def __post_init__(self):
        self.masked_nodes = torch.sort(torch.as_tensor(self.masked_nodes, dtype=torch.long).reshape(-1)).values
        self.masked_edges = torch.sort(torch.as_tensor(self.masked_edges, dtype=torch.long).reshape(-1)).values


def validate_graph(g: Graph) -> Graph:
    """Return ``g`` unchanged, or raise if any structural invariant fails."""
    if g.features.dim() != 2 or g.features.shape[1] < 1:
        raise ShapeMismatch(f"features must be a 2-D matrix with >= 1 column, got {tuple(g.features.shape)}")
    if g.features.shape[0] != g.num_nodes:
        raise ShapeMismatch(f"features has {g.features.shape[0]} rows but num_nodes={g.num_nodes}")
    if g.labels is not None and g.labels.shape[0] != g.num_nodes:
        raise ShapeMismatch(f"labels has {g.labels.shape[0]} entries but num_nodes={g.num_nodes}")
    if g.num_edges:
        lo, hi = int(g.edges.min()), int(g.edges.max())
        if lo < 0 or hi >= g.num_nodes:
            bad = g.edges[((g.edges < 0) | (g.edges >= g.num_nodes)).any(dim=1)][0].tolist()
            raise InvalidEdge(f"edge {tuple(bad)} has an endpoint outside [0, {g.num_nodes})")
        keys = g.edges[:, 0] * g.num_nodes + g.edges[:, 1]
        if torch.unique(keys).numel() != keys.numel():
            uniq, counts = torch.unique(keys, return_counts=True)
            k = int(uniq[counts > 1][0])
            raise DuplicateEdge(f"duplicate edge {(k // g.num_nodes, k % g.num_nodes)}")
    return g


def num_masked_nodes(num_nodes: int, p_f: float) -> int:
    """floor(N * p_f), but never zero when p_f > 0."""
    if not 0.0 <= p_f <= 1.0:
        raise InvalidRate(f"feature mask rate must lie in [0, 1], got {p_f}")
    k = int(math.floor(num_nodes * p_f))
    if p_f > 0:
        k = max(k, 1)
    return min(k, num_nodes)


def apply_feature_mask(g: Graph, plan: MaskPlan, fmask_token: torch.Tensor) -> torch.Tensor:
    """Replace the feature rows of masked nodes with ``fmask_token``.

    The result stays differentiable with respect to the token.
    """
    if fmask_token.dim() != 1 or fmask_token.shape[0] != g.feature_dim:
        raise ShapeMismatch(f"mask token has shape {tuple(fmask_token.shape)}, expected ({g.feature_dim},)")
    return replace_rows(g.features, plan.masked_nodes, fmask_token)


def replace_rows(x: torch.Tensor, rows: torch.Tensor, token: torch.Tensor) -> torch.Tensor:
    # torch.where keeps untouched rows bit-identical and routes gradient to the
    # token only from the replaced rows.
    sel = torch.zeros(x.shape[0], dtype=torch.bool, device=x.device)
    sel[rows] = True
    return torch.where(sel.unsqueeze(1), token.to(x.dtype).unsqueeze(0), x)


def apply_structure_mask(g: Graph, plan: MaskPlan) -> torch.Tensor:
    """Visible edges E - E_mask, in their original order."""
    keep = torch.ones(g.num_edges, dtype=torch.bool)
    keep[plan.masked_edges] = False
    return g.edges[keep]


def undirected_groups(edges: torch.Tensor) -> tuple[torch.Tensor, int]:
    """Map every stored arc to the id of its undirected edge.

    Arcs ``(u, v)`` and ``(v, u)`` share one id. Self-loops get ``-1`` so they
    are never masked. Returns ``(group_ids, num_groups)``.
    """
    if edges.shape[0] == 0:
        return torch.empty(0, dtype=torch.long), 0
    lo = torch.minimum(edges[:, 0], edges[:, 1])
    hi = torch.maximum(edges[:, 0], edges[:, 1])
    n = int(hi.max()) + 1
    keys = lo * n + hi
    loop = lo == hi
    uniq, inverse = torch.unique(keys[~loop], return_inverse=True)
    groups = torch.full((edges.shape[0],), -1, dtype=torch.long)
    groups[~loop] = inverse
    return groups, int(uniq.numel())


def expand_group_mask(groups: torch.Tensor, masked_groups: torch.Tensor) -> torch.Tensor:
    """Edge indices of every arc whose undirected edge is in ``masked_groups``."""
    if masked_groups.numel() == 0 or groups.numel() == 0:
        return torch.empty(0, dtype=torch.long)
    hit = torch.isin(groups, masked_groups)
    return torch.nonzero(hit, as_tuple=False).reshape(-1)


def undirected(num_nodes: int, pairs, features, labels=None) -> Graph:
    """Build a graph storing both directions of each unordered pair."""
    pairs = torch.as_tensor(pairs, dtype=torch.long).reshape(-1, 2)
    both = torch.cat([pairs, pairs.flip(1)], dim=0)
    both = torch.unique(both, dim=0)
    return Graph(num_nodes, both, features, labels)
