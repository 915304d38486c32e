"""Training losses: feature/structure reconstruction, bootstrapping similarity,
consistency and their weighted sum."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import torch
import torch.nn.functional as F

from .errors import CannotSampleNegative, EmptyMaskSet, NonFiniteLoss, ShapeMismatch

LOSS_NAMES = ("fr", "sample", "sr", "bs", "ca")


@dataclass
class LossWeights:
    fr: float = 1.0
    sample: float = 1.0
    sr: float = 1.0
    bs: float = 1.0
    ca: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be >= 0")


@dataclass
class LossConfig:
    alpha: float = 2.0
    beta: float = 1.0
    margin: float = 1.0
    epsilon: float = 1e-8
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if self.alpha < 1 or self.beta < 1:
            raise ValueError("alpha and beta must be >= 1")


@dataclass
class LossReport:
    fr: float = 0.0
    sample: float = 0.0
    sr: float = 0.0
    bs: float = 0.0
    ca: float = 0.0
    total: float = 0.0

    def as_dict(self) -> dict:
        return asdict(self)


def cosine(x: torch.Tensor, z: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Row-wise cosine similarity; defined as 0 when either norm is below ``eps``.

    Zero rows produce finite values and finite (zero) gradients.
    """
    if x.shape != z.shape:
        raise ShapeMismatch(f"cannot compare shapes {tuple(x.shape)} and {tuple(z.shape)}")
    # cosine is scale invariant, so rescaling rows by a detached max-abs keeps
    # values and gradients while avoiding overflow/underflow in the squared norms
    mx = x.detach().abs().amax(-1, keepdim=True)
    mz = z.detach().abs().amax(-1, keepdim=True)
    xs = x / torch.where(mx > 0, mx, torch.ones_like(mx))
    zs = z / torch.where(mz > 0, mz, torch.ones_like(mz))
    sx = (xs * xs).sum(-1)
    sz = (zs * zs).sum(-1)
    # true norm below eps counts as zero; written as a negation so NaN propagates
    ok = ~((mx.squeeze(-1) * sx.sqrt() < eps) | (mz.squeeze(-1) * sz.sqrt() < eps))
    nx = torch.sqrt(torch.where(ok, sx, torch.ones_like(sx)))
    nz = torch.sqrt(torch.where(ok, sz, torch.ones_like(sz)))
    cos = (xs * zs).sum(-1) / (nx * nz)
    return torch.where(ok, cos, torch.zeros_like(cos))


def scaled_cosine_error(x: torch.Tensor, z: torch.Tensor, gamma: float, eps: float = 1e-8) -> torch.Tensor:
    """(1 - cos(x, z)) ** gamma, row-wise for matrices."""
    if gamma < 1:
        raise ValueError("gamma must be >= 1")
    gap = (1.0 - cosine(x, z, eps)).clamp(0.0, 2.0)
    return gap.pow(gamma)


def _masked(masked_nodes) -> torch.Tensor:
    idx = torch.as_tensor(masked_nodes, dtype=torch.long).reshape(-1)
    if idx.numel() == 0:
        raise EmptyMaskSet("no masked nodes to average over")
    return idx


def feature_reconstruction_loss(x: torch.Tensor, z1: torch.Tensor, masked_nodes, alpha: float,
                                eps: float = 1e-8) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean scaled cosine error over the masked nodes, plus the per-node terms."""
    idx = _masked(masked_nodes)
    per_node = scaled_cosine_error(x[idx], z1[idx], alpha, eps)
    return per_node.mean(), per_node


def sample_negatives(edges: torch.Tensor, num_nodes: int, generator: torch.Generator) -> torch.Tensor:
    """One uniform negative per edge, drawn from V minus both endpoints."""
    if num_nodes < 3:
        raise CannotSampleNegative(f"need at least 3 nodes to draw negatives, got {num_nodes}")
    if edges.shape[0] == 0:
        return torch.empty(0, dtype=torch.long)
    a = torch.minimum(edges[:, 0], edges[:, 1])
    b = torch.maximum(edges[:, 0], edges[:, 1])
    loop = a == b
    # draw from [0, N - 2) (or [0, N - 1) for self-loops) and skip past excluded ids
    span = torch.where(loop, num_nodes - 1, num_nodes - 2)
    u = torch.rand(edges.shape[0], dtype=torch.float64, generator=generator)
    r = torch.floor(u * span.to(torch.float64)).long()
    r = r + (r >= a).long()
    r = r + ((r >= b) & ~loop).long()
    return r


def structure_reconstruction_loss(z2: torch.Tensor, visible_edges: torch.Tensor, negatives: torch.Tensor,
                                  margin: float = 1.0) -> torch.Tensor:
    """Sum over visible edges of max(0, margin - <z_i, z_j> + <z_i, z_j'>)."""
    if z2.shape[0] < 3:
        raise CannotSampleNegative(f"need at least 3 nodes to draw negatives, got {z2.shape[0]}")
    visible_edges = torch.as_tensor(visible_edges, dtype=torch.long).reshape(-1, 2)
    negatives = torch.as_tensor(negatives, dtype=torch.long).reshape(-1)
    if negatives.shape[0] != visible_edges.shape[0]:
        raise ShapeMismatch(f"{negatives.shape[0]} negatives for {visible_edges.shape[0]} edges")
    zi = z2[visible_edges[:, 0]]
    pos = (zi * z2[visible_edges[:, 1]]).sum(-1)
    neg = (zi * z2[negatives]).sum(-1)
    # relu has zero subgradient at the kink
    return F.relu(margin - pos + neg).sum()


def bootstrapping_similarity_loss(h1p: torch.Tensor, h2p: torch.Tensor, h1_star: torch.Tensor,
                                  h2_star: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Negative mean cross-view cosine between projections and momentum targets."""
    shapes = {tuple(t.shape) for t in (h1p, h2p, h1_star, h2_star)}
    if len(shapes) != 1:
        raise ShapeMismatch(f"inputs must share one shape, got {sorted(shapes)}")
    h1_star = h1_star.detach()
    h2_star = h2_star.detach()
    return -(cosine(h1p, h2_star, eps) + cosine(h1_star, h2p, eps)).mean()


def consistency_loss(z1: torch.Tensor, z1_star: torch.Tensor, masked_nodes, beta: float,
                     eps: float = 1e-8) -> torch.Tensor:
    """Mean scaled cosine error between live and momentum reconstructions on masked nodes."""
    idx = _masked(masked_nodes)
    if z1.shape != z1_star.shape:
        raise ShapeMismatch(f"cannot compare shapes {tuple(z1.shape)} and {tuple(z1_star.shape)}")
    return scaled_cosine_error(z1[idx], z1_star.detach()[idx], beta, eps).mean()


def combine(losses: dict, cfg: LossConfig) -> torch.Tensor | float:
    """Weighted sum of the five components; works on tensors or plain floats."""
    total = 0.0
    bad = {}
    for name in LOSS_NAMES:
        value = losses[name]
        v = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
        if not math.isfinite(v):
            bad[name] = v
        total = total + getattr(cfg.weights, name) * value
    if bad:
        raise NonFiniteLoss(f"non-finite loss components: {bad}", diagnostics=bad)
    return total
