"""Pretraining step, training loop, checkpoints and the per-epoch metrics stream."""

from __future__ import annotations

import base64
import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .backbone import Arch, Backbone
from .errors import ConfigError, FormatError, IncompatibleCheckpoint, NonFiniteLoss
from .graph import Graph, MaskPlan, apply_feature_mask, apply_structure_mask, expand_group_mask, undirected_groups, validate_graph
from .masking import AdaptiveSampler, sample_feature_mask, sample_structure_mask, sample_uniform_mask, sampling_loss
from .momentum import EmaShadow, ema_update, init_shadow, momentum_forward
from .objectives import (LOSS_NAMES, LossConfig, LossReport, LossWeights, bootstrapping_similarity_loss, combine,
                         consistency_loss, feature_reconstruction_loss, sample_negatives,
                         structure_reconstruction_loss)

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
MAGIC = b"UGMAECKP"
METRIC_COLUMNS = ("epoch",) + LOSS_NAMES + ("total",)
_DTYPES = {"f4": torch.float32, "f8": torch.float64, "i8": torch.int64, "u1": torch.uint8}
_CODES = {v: k for k, v in _DTYPES.items()}


@dataclass
class TrainConfig:
    p_f: float = 0.5
    p_s: float = 0.3
    epochs: int = 500
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    optimizer: str = "adam"
    seed: int = 0
    loss_config: LossConfig = field(default_factory=LossConfig)
    tau: float = 0.996
    backbone_arch: str = "gat"
    hidden_dim: int = 64
    num_layers: int = 2
    decoder_layers: int = 1
    heads: int = 4
    activation: str = "elu"
    sampler_dim: int = 32
    sampler_heads: int = 4
    adaptive_mask: bool = True
    sample_baseline: bool = False
    checkpoint_every: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if isinstance(self.loss_config, dict):
            self.loss_config = _build(LossConfig, self.loss_config, "loss_config")
        if self.epochs < 1:
            raise ConfigError("epochs: must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate: must be > 0")
        if not 0.0 < self.p_f <= 1.0:
            raise ConfigError(f"p_f: must lie in (0, 1], got {self.p_f}")
        if not 0.0 <= self.p_s < 1.0:
            raise ConfigError(f"p_s: must lie in [0, 1), got {self.p_s}")
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError(f"tau: must lie in [0, 1], got {self.tau}")
        if self.optimizer.lower() not in ("adam", "adamw"):
            raise ConfigError(f"optimizer: unsupported {self.optimizer!r} (adam, adamw)")
        try:
            Arch(self.backbone_arch)
        except ValueError:
            raise ConfigError(f"backbone_arch: unknown {self.backbone_arch!r}") from None
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype: must be float32 or float64, got {self.dtype!r}")

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return _build(cls, data, "")

    def digest(self) -> str:
        return config_digest(self.to_dict())

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig.from_dict({**self.to_dict(), **changes})


def _build(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or '<root>'}: expected an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigError(f"unknown config key(s): {', '.join(where + k for k in unknown)}")
    kwargs = {}
    for key, value in data.items():
        sub = f"{path}.{key}" if path else key
        if key == "loss_config" and isinstance(value, dict):
            value = _build(LossConfig, value, sub)
        elif key == "weights" and isinstance(value, dict):
            value = _build(LossWeights, value, sub)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or '<root>'}: {exc}") from None


def config_digest(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class PretrainState:
    """Everything that changes during pretraining."""

    backbone: Backbone
    sampler: AdaptiveSampler
    shadow_encoder: EmaShadow
    shadow_decoder: EmaShadow
    optimizer: torch.optim.Optimizer
    generator: torch.Generator
    epoch: int = 0

    @property
    def shadows(self) -> tuple[EmaShadow, EmaShadow]:
        return self.shadow_encoder, self.shadow_decoder


def build_state(cfg: TrainConfig, feature_dim: int) -> PretrainState:
    """Fresh model, sampler, shadows and optimizer, all seeded by ``cfg.seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        backbone = Backbone(feature_dim, cfg.hidden_dim, cfg.backbone_arch, num_layers=cfg.num_layers,
                            decoder_layers=cfg.decoder_layers, heads=cfg.heads, activation=cfg.activation)
        sampler = AdaptiveSampler(feature_dim, cfg.sampler_dim, cfg.sampler_heads)
    backbone = backbone.to(cfg.torch_dtype)
    sampler = sampler.to(cfg.torch_dtype)
    params = list(backbone.parameters()) + list(sampler.parameters())
    opt_cls = torch.optim.AdamW if cfg.optimizer.lower() == "adamw" else torch.optim.Adam
    optimizer = opt_cls(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    generator = torch.Generator().manual_seed(cfg.seed)
    return PretrainState(backbone, sampler, init_shadow(backbone.encoder, cfg.tau),
                         init_shadow(backbone.decoder, cfg.tau), optimizer, generator)


@dataclass
class StepOutputs:
    losses: dict
    total: torch.Tensor
    plan: MaskPlan
    visible_edges: torch.Tensor
    tensors: dict


def compute_losses(graph: Graph, backbone: Backbone, sampler: Optional[AdaptiveSampler],
                   shadows: tuple[EmaShadow, EmaShadow], cfg: TrainConfig,
                   rng: torch.Generator) -> StepOutputs:
    """Forward half of a training step: masks, both branches, momentum passes, all losses."""
    x = graph.features.to(cfg.torch_dtype)
    edges = graph.edges
    shadow_enc, shadow_dec = shadows
    lc = cfg.loss_config
    n = graph.num_nodes

    # adaptive feature mask
    if cfg.adaptive_mask and sampler is not None:
        log_p = sampler.log_scores(x)
        masked = sample_feature_mask(log_p.exp(), cfg.p_f, rng, log_p=log_p)
    else:
        log_p = None
        masked = sample_uniform_mask(n, cfg.p_f, rng)

    # random structure mask, one decision per undirected edge
    groups, num_groups = undirected_groups(edges)
    masked_groups = sample_structure_mask(num_groups, cfg.p_s, rng)
    plan = MaskPlan(masked, expand_group_mask(groups, masked_groups), cfg.p_f, cfg.p_s)
    visible = apply_structure_mask(graph, plan)

    # feature branch over the full edge set
    x_tilde = apply_feature_mask(Graph(n, edges, x), plan, backbone.fmask_token)
    h1 = backbone.encode(edges, x_tilde)
    z1 = backbone.decode(edges, backbone.remask(h1, plan.masked_nodes))

    # structure branch over the visible edges
    h2 = backbone.encode(visible, x)
    z2 = backbone.decode(visible, h2)

    # momentum passes
    h1_star = momentum_forward(shadow_enc, edges, x_tilde)
    h2_star = momentum_forward(shadow_enc, visible, x)
    z1_star = momentum_forward(shadow_dec, edges, h1_star)

    h1p = backbone.project(h1)
    h2p = backbone.project(h2)

    fr, per_node = feature_reconstruction_loss(x, z1, plan.masked_nodes, lc.alpha, lc.epsilon)
    if log_p is not None:
        sample = sampling_loss(None, plan.masked_nodes, per_node, log_p=log_p, baseline=cfg.sample_baseline)
    else:
        sample = torch.zeros((), dtype=x.dtype)
    negatives = sample_negatives(visible, n, rng)
    sr = structure_reconstruction_loss(z2, visible, negatives, lc.margin)
    bs = bootstrapping_similarity_loss(h1p, h2p, h1_star, h2_star, lc.epsilon)
    ca = consistency_loss(z1, z1_star, plan.masked_nodes, lc.beta, lc.epsilon)
    losses = {"fr": fr, "sample": sample, "sr": sr, "bs": bs, "ca": ca}
    total = combine(losses, lc)
    tensors = {"x_tilde": x_tilde, "h1": h1, "z1": z1, "h2": h2, "z2": z2, "h1_star": h1_star,
               "h2_star": h2_star, "z1_star": z1_star, "h1p": h1p, "h2p": h2p, "per_node": per_node,
               "negatives": negatives, "log_p": log_p}
    return StepOutputs(losses, total, plan, visible, tensors)


def train_step(graph: Graph, backbone: Backbone, sampler: Optional[AdaptiveSampler],
               shadows: tuple[EmaShadow, EmaShadow], cfg: TrainConfig, rng: torch.Generator,
               optimizer: torch.optim.Optimizer) -> LossReport:
    """One full pretraining step: losses, one optimizer step, then the EMA update."""
    optimizer.zero_grad(set_to_none=False)
    out = compute_losses(graph, backbone, sampler, shadows, cfg, rng)
    out.total.backward()
    optimizer.step()
    ema_update(shadows[0], backbone.encoder, cfg.tau)
    ema_update(shadows[1], backbone.decoder, cfg.tau)
    values = {k: float(v.detach()) for k, v in out.losses.items()}
    return LossReport(total=float(out.total.detach()), **values)


def batch_graphs(graphs: Sequence[Graph]) -> tuple[Graph, torch.Tensor]:
    """Disjoint union of several graphs plus a node -> graph id vector."""
    offsets, edges, feats, owner = 0, [], [], []
    for gid, g in enumerate(graphs):
        edges.append(g.edges + offsets)
        feats.append(g.features)
        owner.append(torch.full((g.num_nodes,), gid, dtype=torch.long))
        offsets += g.num_nodes
    labels = None
    if all(g.labels is not None for g in graphs):
        labels = torch.cat([g.labels for g in graphs])
    return Graph(offsets, torch.cat(edges), torch.cat(feats), labels), torch.cat(owner)


@dataclass
class Checkpoint:
    config: dict
    epoch: int
    backbone: dict
    sampler: dict
    shadow_encoder: dict
    shadow_decoder: dict
    optimizer: dict
    rng_state: torch.Tensor
    feature_dim: int
    version: int = FORMAT_VERSION

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.config)


def make_checkpoint(state: PretrainState, cfg: TrainConfig) -> Checkpoint:
    def clone(sd):
        return {k: v.detach().clone() for k, v in sd.items()}

    opt = state.optimizer.state_dict()
    opt = {"state": {k: {n: (t.clone() if isinstance(t, torch.Tensor) else t) for n, t in s.items()}
                     for k, s in opt["state"].items()},
           "param_groups": opt["param_groups"]}
    return Checkpoint(cfg.to_dict(), state.epoch, clone(state.backbone.state_dict()),
                      clone(state.sampler.state_dict()), clone(state.shadow_encoder.state_dict()),
                      clone(state.shadow_decoder.state_dict()), opt, state.generator.get_state().clone(),
                      state.backbone.feature_dim)


def restore_state(ckpt: Checkpoint, cfg: Optional[TrainConfig] = None) -> PretrainState:
    cfg = cfg or ckpt.train_config
    state = build_state(cfg, ckpt.feature_dim)
    try:
        state.backbone.load_state_dict(ckpt.backbone)
        state.sampler.load_state_dict(ckpt.sampler)
        state.shadow_encoder.load_state_dict(ckpt.shadow_encoder)
        state.shadow_decoder.load_state_dict(ckpt.shadow_decoder)
    except RuntimeError as exc:
        raise IncompatibleCheckpoint(str(exc)) from None
    state.optimizer.load_state_dict(ckpt.optimizer)
    state.generator.set_state(ckpt.rng_state.clone())
    state.epoch = ckpt.epoch
    return state


# ---- checkpoint container ---------------------------------------------------

def _write_record(buf, name: str, t: torch.Tensor):
    t = t.detach().cpu().contiguous()
    code = _CODES.get(t.dtype)
    if code is None:
        raise TypeError(f"cannot serialize {name} with dtype {t.dtype}")
    raw = name.encode()
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)
    buf.write(code.encode())
    buf.write(struct.pack("<B", t.dim()))
    buf.write(struct.pack(f"<{t.dim()}I", *t.shape))
    arr = t.numpy()
    buf.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def _read_record(buf):
    head = buf.read(2)
    if not head:
        return None
    (n,) = struct.unpack("<H", head)
    name = buf.read(n).decode()
    code = buf.read(2).decode()
    (ndim,) = struct.unpack("<B", buf.read(1))
    shape = struct.unpack(f"<{ndim}I", buf.read(4 * ndim))
    dtype = torch.empty(0, dtype=_DTYPES[code]).numpy().dtype.newbyteorder("<")
    count = int(np.prod(shape)) if shape else 1
    arr = np.frombuffer(buf.read(count * dtype.itemsize), dtype=dtype).reshape(shape)
    return name, torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="))).clone()


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write ``ckpt`` atomically as one binary file."""
    opt_state = ckpt.optimizer["state"]
    opt_scalars = {str(k): {n: v for n, v in s.items() if not isinstance(v, torch.Tensor)}
                   for k, s in opt_state.items()}
    opt_steps = {str(k): float(s["step"]) for k, s in opt_state.items()
                 if isinstance(s.get("step"), torch.Tensor)}
    header = {
        "format_version": ckpt.version,
        "config_digest": config_digest(ckpt.config),
        "config": ckpt.config,
        "epoch": ckpt.epoch,
        "feature_dim": ckpt.feature_dim,
        "rng_state": base64.b64encode(ckpt.rng_state.numpy().tobytes()).decode(),
        "optimizer": {"param_groups": ckpt.optimizer["param_groups"], "scalars": opt_scalars,
                      "steps": opt_steps},
    }
    buf = io.BytesIO()
    raw = json.dumps(header, sort_keys=True).encode()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", ckpt.version, len(raw)))
    buf.write(raw)
    for prefix, sd in (("live/", ckpt.backbone), ("sampler/", ckpt.sampler),
                       ("shadow/encoder/", ckpt.shadow_encoder), ("shadow/decoder/", ckpt.shadow_decoder)):
        for name, t in sd.items():
            _write_record(buf, prefix + name, t)
    for k, s in opt_state.items():
        for n, t in s.items():
            if isinstance(t, torch.Tensor) and n != "step":
                _write_record(buf, f"optim/{k}/{n}", t)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise FormatError("not a checkpoint file", path=str(path))
    buf = io.BytesIO(data[len(MAGIC):])
    version, hlen = struct.unpack("<II", buf.read(8))
    if version != FORMAT_VERSION:
        raise IncompatibleCheckpoint(f"checkpoint format {version}, expected {FORMAT_VERSION}")
    header = json.loads(buf.read(hlen))
    if header["config_digest"] != config_digest(header["config"]):
        raise FormatError("config digest does not match stored config", path=str(path))
    parts = {"live/": {}, "sampler/": {}, "shadow/encoder/": {}, "shadow/decoder/": {}}
    opt_state: dict = {}
    while (rec := _read_record(buf)) is not None:
        name, t = rec
        if name.startswith("optim/"):
            _, k, n = name.split("/", 2)
            opt_state.setdefault(int(k), {})[n] = t
            continue
        for prefix, sd in parts.items():
            if name.startswith(prefix):
                sd[name[len(prefix):]] = t
                break
        else:
            raise FormatError(f"unknown record {name!r}", path=str(path))
    opt = header["optimizer"]
    for k, scalars in opt["scalars"].items():
        opt_state.setdefault(int(k), {}).update(scalars)
    for k, step in opt["steps"].items():
        opt_state.setdefault(int(k), {})["step"] = torch.tensor(step)
    rng = torch.from_numpy(np.frombuffer(base64.b64decode(header["rng_state"]), dtype=np.uint8).copy())
    return Checkpoint(header["config"], header["epoch"], parts["live/"], parts["sampler/"],
                      parts["shadow/encoder/"], parts["shadow/decoder/"],
                      {"state": opt_state, "param_groups": opt["param_groups"]}, rng,
                      header["feature_dim"], version)


# ---- training loop ----------------------------------------------------------

def pretrain(graphs, cfg: TrainConfig, out_dir=None, resume: Optional[Checkpoint] = None,
             on_epoch=None) -> Checkpoint:
    """Pretrain on one graph (or the disjoint union of several) for ``cfg.epochs``.

    With ``out_dir``, appends a row per epoch to ``metrics.csv`` and writes
    ``checkpoint.bin`` at the end (and every ``checkpoint_every`` epochs).
    ``on_epoch(epoch, report)`` is called after every step.
    """
    if isinstance(graphs, Graph):
        graph = graphs
    else:
        graphs = list(graphs)
        if not graphs:
            raise ValueError("pretraining needs at least one graph")
        graph = graphs[0] if len(graphs) == 1 else batch_graphs(graphs)[0]
    validate_graph(graph)
    graph = graph.to(cfg.torch_dtype)

    if resume is not None:
        state = restore_state(resume, cfg)
    else:
        state = build_state(cfg, graph.feature_dim)
    if state.backbone.feature_dim != graph.feature_dim:
        raise IncompatibleCheckpoint(
            f"checkpoint expects {state.backbone.feature_dim} features, graph has {graph.feature_dim}")

    metrics = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = out_dir / "metrics.csv"
        fresh = resume is None or not metrics_path.exists()
        metrics = open(metrics_path, "w" if fresh else "a", newline="")
        writer = csv.writer(metrics)
        if fresh:
            writer.writerow(METRIC_COLUMNS)
    try:
        while state.epoch < cfg.epochs:
            try:
                report = train_step(graph, state.backbone, state.sampler, state.shadows, cfg,
                                    state.generator, state.optimizer)
            except NonFiniteLoss as exc:
                exc.diagnostics["epoch"] = state.epoch + 1
                log.error("aborting at epoch %d: %s", state.epoch + 1, exc)
                raise
            state.epoch += 1
            if metrics is not None:
                writer.writerow([state.epoch] + [repr(getattr(report, k)) for k in METRIC_COLUMNS[1:]])
                metrics.flush()
            if on_epoch is not None:
                on_epoch(state.epoch, report)
            if out_dir is not None and cfg.checkpoint_every and state.epoch % cfg.checkpoint_every == 0:
                save_checkpoint(make_checkpoint(state, cfg), out_dir / "checkpoint.bin")
    finally:
        if metrics is not None:
            metrics.close()
    ckpt = make_checkpoint(state, cfg)
    if out_dir is not None:
        save_checkpoint(ckpt, out_dir / "checkpoint.bin")
    return ckpt


def read_metrics(path) -> list[LossReport]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [LossReport(**{k: float(r[k]) for k in METRIC_COLUMNS[1:]}) for r in rows]
