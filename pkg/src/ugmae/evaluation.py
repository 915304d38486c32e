"""Downstream evaluation: linear probes on frozen node embeddings and
readout + SVM cross-validation for graph classification."""

from __future__ import annotations

import csv
import json
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import Backbone
from .errors import DegenerateSplit, InsufficientData
from .graph import Graph

DEFAULT_SEEDS = (0, 1, 2, 3, 4)


@dataclass
class ProbeResult:
    accuracy_mean: float
    accuracy_std: float
    per_seed: list = field(default_factory=list)
    protocol: str = "transductive"

    @classmethod
    def from_runs(cls, accuracies: Sequence[float], protocol: str) -> "ProbeResult":
        accs = [float(a) for a in accuracies]
        std = statistics.stdev(accs) if len(accs) > 1 else 0.0
        return cls(statistics.fmean(accs), std, accs, protocol)

    def summary(self) -> dict:
        return {"mean": self.accuracy_mean, "std": self.accuracy_std, "protocol": self.protocol,
                "runs": len(self.per_seed)}


def write_probe_results(result: ProbeResult, dataset: str, out_dir, seeds: Optional[Sequence[int]] = None):
    """``probe.csv`` rows {dataset, protocol, seed, accuracy} plus ``summary.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = list(seeds) if seeds is not None else list(range(len(result.per_seed)))
    with open(out / "probe.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["dataset", "protocol", "seed", "accuracy"])
        for s, acc in zip(seeds, result.per_seed):
            w.writerow([dataset, result.protocol, s, repr(acc)])
    (out / "summary.json").write_text(json.dumps(result.summary(), indent=2, sort_keys=True) + "\n")


@torch.no_grad()
def embed_nodes(backbone: Backbone, graph: Graph) -> torch.Tensor:
    """Frozen encoder output on the unmasked graph."""
    dtype = backbone.fmask_token.dtype
    was_training = backbone.training
    backbone.eval()
    try:
        return backbone.encode(graph.edges, graph.features.to(dtype)).detach()
    finally:
        backbone.train(was_training)


def _split_ids(split, n):
    train = torch.as_tensor(split["train"], dtype=torch.long)
    test = torch.as_tensor(split["test"], dtype=torch.long)
    if set(train.tolist()) & set(test.tolist()):
        raise DegenerateSplit("train and test node sets overlap")
    if train.numel() == 0 or test.numel() == 0:
        raise DegenerateSplit("train and test sets must be nonempty")
    return train, test


def fit_logistic(x: torch.Tensor, y: torch.Tensor, num_classes: int, seed: int = 0, steps: int = 1000,
                 lr: float = 0.01, l2: float = 1e-4) -> torch.nn.Linear:
    """Full-batch multinomial logistic regression with an L2 penalty on the weights."""
    g = torch.Generator().manual_seed(seed)
    clf = torch.nn.Linear(x.shape[1], num_classes).to(x.dtype)
    bound = 1.0 / np.sqrt(x.shape[1])
    with torch.no_grad():
        clf.weight.copy_(torch.rand(clf.weight.shape, generator=g, dtype=x.dtype) * 2 * bound - bound)
        clf.bias.zero_()
    opt = torch.optim.Adam(clf.parameters(), lr=lr)
    for _ in range(steps):
        opt.zero_grad()
        loss = F.cross_entropy(clf(x), y) + l2 * clf.weight.pow(2).sum()
        loss.backward()
        opt.step()
    return clf


def linear_probe(h: torch.Tensor, labels: torch.Tensor, split: dict, seeds: Sequence[int] = DEFAULT_SEEDS,
                 protocol: str = "transductive", steps: int = 1000, lr: float = 0.01,
                 l2: float = 1e-4) -> ProbeResult:
    """Train a linear classifier on frozen embeddings, report test accuracy in percent.

    Embeddings are standardized with train-set statistics. Each seed changes
    only the classifier initialization.
    """
    h = h.detach().to(torch.float64)
    labels = torch.as_tensor(labels, dtype=torch.long)
    train, test = _split_ids(split, h.shape[0])
    if torch.unique(labels[train]).numel() < 2:
        raise DegenerateSplit("training split contains a single class")
    mu = h[train].mean(0)
    sd = h[train].std(0, unbiased=False)
    sd = torch.where(sd > 1e-12, sd, torch.ones_like(sd))
    z = (h - mu) / sd
    num_classes = int(labels.max()) + 1
    accs = []
    for seed in seeds:
        clf = fit_logistic(z[train], labels[train], num_classes, seed, steps, lr, l2)
        with torch.no_grad():
            pred = clf(z[test]).argmax(1)
        accs.append(100.0 * float((pred == labels[test]).double().mean()))
    return ProbeResult.from_runs(accs, protocol)


def graph_readout(h: torch.Tensor, mode: str = "sum") -> torch.Tensor:
    """Pool the node rows of one graph into a single vector."""
    if h.shape[0] == 0:
        raise ValueError("cannot read out an empty graph")
    if mode == "sum":
        return h.sum(0)
    if mode == "mean":
        return h.mean(0)
    if mode == "max":
        return h.max(0).values
    raise ValueError(f"unknown readout {mode!r}")


@torch.no_grad()
def embed_graphs(backbone: Backbone, graphs: Sequence[Graph], mode: str = "sum") -> torch.Tensor:
    return torch.stack([graph_readout(embed_nodes(backbone, g), mode) for g in graphs])


def graph_classify(vectors, labels, repeats: int = 5, folds: int = 10, c: float = 1.0, kernel: str = "linear",
                   seed: int = 0, fold_ids: Optional[Sequence[int]] = None) -> ProbeResult:
    """Mean 10-fold CV accuracy of an SVM, repeated with reshuffled folds.

    ``fold_ids`` pins the fold of every sample, and then every repetition uses
    the same folds.
    """
    from sklearn.model_selection import KFold, StratifiedKFold
    from sklearn.pipeline import make_pipeline
    from sklearn.preprocessing import StandardScaler
    from sklearn.svm import SVC

    x = np.asarray(torch.as_tensor(vectors).detach().cpu(), dtype=np.float64)
    y = np.asarray(torch.as_tensor(labels).cpu())
    if x.shape[0] < folds:
        raise InsufficientData(f"{x.shape[0]} graphs cannot fill {folds} folds")
    accs = []
    for r in range(repeats):
        if fold_ids is not None:
            ids = np.asarray(fold_ids)
            splits = [(np.flatnonzero(ids != k), np.flatnonzero(ids == k)) for k in np.unique(ids)]
        else:
            _, counts = np.unique(y, return_counts=True)
            cv = (StratifiedKFold(folds, shuffle=True, random_state=seed + r) if counts.min() >= folds
                  else KFold(folds, shuffle=True, random_state=seed + r))
            splits = list(cv.split(x, y))
        fold_accs = []
        for tr, te in splits:
            if np.unique(y[tr]).size < 2:
                raise DegenerateSplit("a training fold contains a single class")
            model = make_pipeline(StandardScaler(), SVC(C=c, kernel=kernel))
            model.fit(x[tr], y[tr])
            fold_accs.append(100.0 * float((model.predict(x[te]) == y[te]).mean()))
        accs.append(float(np.mean(fold_accs)))
    return ProbeResult.from_runs(accs, "cross-validation")


def inductive_probe(backbone: Backbone, train_graphs: Sequence[Graph], test_graphs: Sequence[Graph],
                    seeds: Sequence[int] = DEFAULT_SEEDS, **kwargs) -> ProbeResult:
    """Fit on nodes of ``train_graphs`` and score on nodes of graphs never seen before."""
    hs, ys = [], []
    for g in list(train_graphs) + list(test_graphs):
        if g.labels is None:
            raise DegenerateSplit("inductive probing needs labelled graphs")
        hs.append(embed_nodes(backbone, g))
        ys.append(g.labels)
    n_train = sum(g.num_nodes for g in train_graphs)
    n_total = sum(h.shape[0] for h in hs)
    split = {"train": list(range(n_train)), "test": list(range(n_train, n_total))}
    return linear_probe(torch.cat(hs), torch.cat(ys), split, seeds, protocol="inductive", **kwargs)
