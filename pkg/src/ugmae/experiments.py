"""Pretrain-then-probe runs, ablation variants and 2-D embedding projection."""

from __future__ import annotations

from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .datasets import DatasetSpec
from .evaluation import ProbeResult, embed_nodes, linear_probe
from .graph import Graph
from .trainer import TrainConfig, build_state, pretrain, restore_state

COMPONENTS = ("AM", "SR", "BS", "CA")


def ablated_config(cfg: TrainConfig, component: str) -> TrainConfig:
    """Config with one component switched off.

    AM falls back to uniform random masking; SR, BS and CA get weight zero.
    """
    component = component.upper()
    if component == "AM":
        return cfg.replace(adaptive_mask=False)
    key = {"SR": "sr", "BS": "bs", "CA": "ca"}.get(component)
    if key is None:
        raise ValueError(f"unknown component {component!r}; choose from {', '.join(COMPONENTS)}")
    lc = cfg.to_dict()["loss_config"]
    lc["weights"][key] = 0.0
    return cfg.replace(loss_config=lc)


def parse_components(text: str) -> list[str]:
    items = [c.strip().upper() for c in text.split(",") if c.strip()]
    bad = [c for c in items if c not in COMPONENTS]
    if bad:
        raise ValueError(f"unknown component(s) {', '.join(bad)}; choose from {', '.join(COMPONENTS)}")
    return list(dict.fromkeys(items))


def probe_split(graph: Graph, spec: DatasetSpec) -> dict:
    if graph.labels is None:
        raise ValueError(f"dataset {spec.name!r} has no labels")
    if not spec.split.get("train") or not spec.split.get("test"):
        raise ValueError(f"dataset {spec.name!r} has no train/test split")
    return spec.split


def pretrain_and_probe(graph: Graph, spec: DatasetSpec, cfg: TrainConfig, runs: int = 5,
                       out_dir=None, probe_seed: int = 0) -> ProbeResult:
    """Pretrain ``runs`` times (seeds ``cfg.seed + r``) and probe each encoder once.

    ``per_seed`` holds one accuracy per pretraining run.
    """
    split = probe_split(graph, spec)
    accs = []
    for r in range(runs):
        run_cfg = cfg.replace(seed=cfg.seed + r)
        run_dir = None if out_dir is None else Path(out_dir) / f"seed{run_cfg.seed}"
        ckpt = pretrain(graph, run_cfg, out_dir=run_dir)
        backbone = restore_state(ckpt, run_cfg).backbone
        h = embed_nodes(backbone, graph)
        accs.append(linear_probe(h, graph.labels, split, seeds=[probe_seed]).accuracy_mean)
    return ProbeResult.from_runs(accs, "transductive")


def random_init_probe(graph: Graph, spec: DatasetSpec, cfg: TrainConfig, runs: int = 5,
                      probe_seed: int = 0) -> ProbeResult:
    """Same protocol as :func:`pretrain_and_probe` on untrained encoders."""
    split = probe_split(graph, spec)
    accs = []
    for r in range(runs):
        backbone = build_state(cfg.replace(seed=cfg.seed + r), graph.feature_dim).backbone
        h = embed_nodes(backbone, graph)
        accs.append(linear_probe(h, graph.labels, split, seeds=[probe_seed]).accuracy_mean)
    return ProbeResult.from_runs(accs, "transductive")


def majority_rate(graph: Graph, spec: DatasetSpec) -> float:
    """Test accuracy (%) of always predicting the most frequent training class."""
    split = probe_split(graph, spec)
    train = graph.labels[torch.as_tensor(split["train"])]
    test = graph.labels[torch.as_tensor(split["test"])]
    top = int(torch.bincount(train).argmax())
    return 100.0 * float((test == top).double().mean())


def run_ablations(graph: Graph, spec: DatasetSpec, cfg: TrainConfig, components: Iterable[str],
                  runs: int = 5, out_dir=None) -> list[tuple[str, ProbeResult]]:
    """Full model first, then one row per removed component."""
    variants = [("full", cfg)] + [(f"w/o {c}", ablated_config(cfg, c)) for c in components]
    rows = []
    for name, vcfg in variants:
        sub = None if out_dir is None else Path(out_dir) / "runs" / name.replace("w/o ", "without_")
        rows.append((name, pretrain_and_probe(graph, spec, vcfg, runs, sub)))
    return rows


def project_2d(h) -> np.ndarray:
    """Principal-component projection to two coordinates.

    Two-column input is returned unchanged. Signs are fixed so the largest
    loading of each component is positive, which makes the output
    deterministic.
    """
    h = np.asarray(torch.as_tensor(h).detach().cpu(), dtype=np.float64)
    if h.shape[1] == 2:
        return h.copy()
    if h.shape[1] < 2:
        return np.hstack([h, np.zeros((h.shape[0], 2 - h.shape[1]))])
    centered = h - h.mean(0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:2]
    signs = np.sign(comps[np.arange(2), np.abs(comps).argmax(1)])
    signs[signs == 0] = 1.0
    return centered @ (comps * signs[:, None]).T


def cluster_separation(coords: np.ndarray, labels: Sequence[int]) -> tuple[float, float]:
    """(minimum distance between class centers, mean intra-class radius)."""
    labels = np.asarray(labels)
    classes = np.unique(labels)
    centers = np.stack([coords[labels == c].mean(0) for c in classes])
    radius = np.mean([np.linalg.norm(coords[labels == c] - centers[i], axis=1).mean()
                      for i, c in enumerate(classes)])
    dists = [np.linalg.norm(centers[i] - centers[j]) for i in range(len(classes)) for j in range(i + 1, len(classes))]
    return float(min(dists)), float(radius)
