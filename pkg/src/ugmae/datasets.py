"""Plain-text graph files, citation-network converters and synthetic SBM graphs.

Native on-disk layout (one directory per dataset):

``edges.tsv``
    ``src<TAB>dst`` per line, sorted by ``(src, dst)``. Undirected graphs list
    each edge once with ``src <= dst``.
``features.csv``
    one row of comma-separated decimals per node, no header.
``labels.txt``
    one integer per line (optional).
``split.txt``
    three lines ``train:``, ``val:``, ``test:`` each followed by comma-separated ids.
"""

from __future__ import annotations

import math
import pickle
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .errors import FormatError, InvalidNodeId
from .graph import Graph, validate_graph

EDGES_FILE = "edges.tsv"
FEATURES_FILE = "features.csv"
LABELS_FILE = "labels.txt"
SPLIT_FILE = "split.txt"
SPLIT_NAMES = ("train", "val", "test")

# public node/class counts, checked whenever a converted benchmark is loaded
KNOWN_COUNTS = {"cora": (2708, 7), "citeseer": (3327, 6), "pubmed": (19717, 3)}


@dataclass
class DatasetSpec:
    name: str
    source: str  # "files" or "synthetic"
    params: dict = field(default_factory=dict)
    split: dict = field(default_factory=dict)

    def __post_init__(self):
        seen: set = set()
        for part in SPLIT_NAMES:
            ids = set(int(i) for i in self.split.get(part, []))
            if ids & seen:
                raise ValueError(f"split {part!r} overlaps another split")
            seen |= ids


@dataclass
class SbmParams:
    blocks: int = 3
    nodes_per_block: int = 100
    p_in: float = 0.10
    p_out: float = 0.01
    feature_dim: int = 16
    class_mean_separation: float = 1.0
    feature_noise_std: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p_out <= self.p_in <= 1.0:
            raise ValueError(f"need 0 <= p_out <= p_in <= 1, got p_out={self.p_out}, p_in={self.p_in}")
        if self.blocks < 1 or self.nodes_per_block < 1 or self.feature_dim < 1:
            raise ValueError("blocks, nodes_per_block and feature_dim must be positive")


# ---- native format -----------------------------------------------------------

def _parse_int(token: str, path, line: int) -> int:
    try:
        return int(token)
    except ValueError:
        raise FormatError(f"expected an integer, got {token!r}", path=str(path), line=line) from None


def read_edges(path) -> list[tuple[int, int]]:
    pairs = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            raw = raw.rstrip("\n")
            if not raw.strip():
                continue
            parts = raw.split("\t")
            if len(parts) != 2:
                raise FormatError("expected 'src<TAB>dst'", path=str(path), line=lineno)
            pairs.append((_parse_int(parts[0], path, lineno), _parse_int(parts[1], path, lineno)))
    return pairs


def read_features(path) -> np.ndarray:
    rows = []
    width = None
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                row = np.array(raw.split(","), dtype=np.float32)
            except ValueError:
                raise FormatError("non-numeric feature value", path=str(path), line=lineno) from None
            if width is None:
                width = row.shape[0]
            elif row.shape[0] != width:
                raise FormatError(f"row has {row.shape[0]} values, expected {width}", path=str(path), line=lineno)
            rows.append(row)
    if not rows:
        raise FormatError("no feature rows", path=str(path))
    return np.stack(rows)


def read_labels(path) -> np.ndarray:
    out = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            if raw.strip():
                out.append(_parse_int(raw.strip(), path, lineno))
    return np.asarray(out, dtype=np.int64)


def read_split(path) -> dict:
    split = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            raw = raw.strip()
            if not raw:
                continue
            name, sep, rest = raw.partition(":")
            if not sep or name not in SPLIT_NAMES:
                raise FormatError("expected 'train:', 'val:' or 'test:'", path=str(path), line=lineno)
            ids = [_parse_int(t, path, lineno) for t in rest.split(",") if t.strip()]
            split[name] = ids
    missing = [n for n in SPLIT_NAMES if n not in split]
    if missing:
        raise FormatError(f"missing split line(s): {', '.join(missing)}", path=str(path))
    return split


def degree_onehot(num_nodes: int, edges: torch.Tensor, max_degree: int) -> torch.Tensor:
    """One-hot in-degree features, degrees above ``max_degree`` share the last slot."""
    deg = torch.zeros(num_nodes, dtype=torch.long)
    if edges.shape[0]:
        deg.index_add_(0, edges[:, 1], torch.ones(edges.shape[0], dtype=torch.long))
    deg = deg.clamp(max=max_degree)
    return torch.nn.functional.one_hot(deg, max_degree + 1).float()


def load_graph_files(edges_path, features_path=None, labels_path=None, split_path=None, *,
                     directed: bool = False, features: str = "file", max_degree: int = 64,
                     name: Optional[str] = None) -> tuple[Graph, DatasetSpec]:
    """Read the native format into a validated graph.

    ``features="degree-onehot"`` ignores ``features_path`` and builds one-hot
    degree features capped at ``max_degree``.
    """
    pairs = read_edges(edges_path)
    labels = read_labels(labels_path) if labels_path else None
    if features == "file":
        if features_path is None:
            raise ValueError("features_path is required unless features='degree-onehot'")
        x = torch.from_numpy(read_features(features_path))
        num_nodes = x.shape[0]
    elif features == "degree-onehot":
        x = None
        top = max((max(p) for p in pairs), default=-1) + 1
        num_nodes = len(labels) if labels is not None else top
    else:
        raise ValueError(f"unknown feature mode {features!r}")

    for lineno, (s, d) in enumerate(pairs, 1):
        if not (0 <= s < num_nodes and 0 <= d < num_nodes):
            raise InvalidNodeId(f"{edges_path}:{lineno}: edge ({s}, {d}) references a node outside [0, {num_nodes})")
    e = torch.tensor(pairs, dtype=torch.long).reshape(-1, 2)
    if not directed:
        rev = e[e[:, 0] != e[:, 1]].flip(1)
        e = torch.cat([e, rev], dim=0)
    if x is None:
        x = degree_onehot(num_nodes, e, max_degree)
    if labels is not None and len(labels) != num_nodes:
        raise InvalidNodeId(f"{labels_path}: {len(labels)} labels for {num_nodes} nodes")
    g = Graph(num_nodes, e, x, torch.from_numpy(labels) if labels is not None else None)
    validate_graph(g)

    split = read_split(split_path) if split_path else {}
    for part, ids in split.items():
        bad = [i for i in ids if not 0 <= i < num_nodes]
        if bad:
            raise InvalidNodeId(f"{split_path}: {part} id {bad[0]} outside [0, {num_nodes})")
    name = name or Path(edges_path).parent.name
    spec = DatasetSpec(name, "files", {"edges": str(edges_path), "features": str(features_path),
                                       "labels": str(labels_path), "split": str(split_path)}, split)
    known = KNOWN_COUNTS.get(name.lower())
    if known is not None and g.labels is not None:
        if (num_nodes, g.num_classes) != known:
            raise FormatError(f"{name} should have {known[0]} nodes / {known[1]} classes, "
                              f"found {num_nodes} / {g.num_classes}")
    return g, spec


def load_dir(path, **kwargs) -> tuple[Graph, DatasetSpec]:
    """Load a dataset directory laid out in the native format."""
    path = Path(path)
    opt = lambda f: path / f if (path / f).exists() else None  # noqa: E731
    return load_graph_files(path / EDGES_FILE, opt(FEATURES_FILE), opt(LABELS_FILE), opt(SPLIT_FILE),
                            name=kwargs.pop("name", path.name), **kwargs)


def canonical_edges(g: Graph, directed: bool = False) -> list[tuple[int, int]]:
    e = g.edges
    if not directed:
        e = e[e[:, 0] <= e[:, 1]]
    return sorted(map(tuple, e.tolist()))


def write_graph_files(g: Graph, out_dir, split: Optional[dict] = None, directed: bool = False) -> Path:
    """Write ``g`` in canonical native form; returns the directory."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / EDGES_FILE, "w") as fh:
        fh.writelines(f"{s}\t{d}\n" for s, d in canonical_edges(g, directed))
    np.savetxt(out / FEATURES_FILE, g.features.detach().cpu().numpy().astype(np.float32),
               fmt="%.9g", delimiter=",")
    if g.labels is not None:
        with open(out / LABELS_FILE, "w") as fh:
            fh.writelines(f"{int(v)}\n" for v in g.labels.tolist())
    if split is not None:
        with open(out / SPLIT_FILE, "w") as fh:
            for part in SPLIT_NAMES:
                fh.write(f"{part}:{','.join(str(int(i)) for i in split.get(part, []))}\n")
    return out


# ---- citation-network converters -----------------------------------------------

def _load_pickle(path):
    with open(path, "rb") as fh:
        return pickle.load(fh, encoding="latin1")


def convert_planetoid(raw_dir, name: str, out_dir) -> Path:
    """Convert the Planetoid ``ind.<name>.*`` distribution into the native format.

    Uses the standard public split: the first ``len(y)`` nodes train, the next
    500 validate, the listed test index tests.
    """
    import scipy.sparse as sp

    raw = Path(raw_dir)
    parts = {k: _load_pickle(raw / f"ind.{name}.{k}") for k in ("x", "y", "tx", "ty", "allx", "ally", "graph")}
    test_idx = [int(l) for l in (raw / f"ind.{name}.test.index").read_text().split()]
    test_sorted = np.sort(test_idx)
    if name == "citeseer":
        # isolated test nodes are missing from tx/ty; pad them with zeros
        full = range(test_sorted.min(), test_sorted.max() + 1)
        tx = sp.lil_matrix((len(full), parts["x"].shape[1]))
        tx[test_sorted - test_sorted.min(), :] = parts["tx"]
        ty = np.zeros((len(full), parts["y"].shape[1]))
        ty[test_sorted - test_sorted.min(), :] = parts["ty"]
        parts["tx"], parts["ty"] = tx, ty
    feats = sp.vstack((parts["allx"], parts["tx"])).tolil()
    feats[test_idx, :] = feats[test_sorted, :]
    onehot = np.vstack((parts["ally"], parts["ty"]))
    onehot[test_idx, :] = onehot[test_sorted, :]
    labels = onehot.argmax(1)
    n = feats.shape[0]
    pairs = set()
    for src, nbrs in parts["graph"].items():
        for dst in nbrs:
            if src < n and dst < n:
                pairs.add((min(src, dst), max(src, dst)))
    pairs = sorted(p for p in pairs if p[0] != p[1])
    x = np.asarray(feats.todense(), dtype=np.float32)
    g = Graph(n, torch.tensor(pairs + [(d, s) for s, d in pairs]).reshape(-1, 2), torch.from_numpy(x),
              torch.from_numpy(labels))
    n_train = len(parts["y"])
    test = sorted(int(i) for i in test_sorted)
    held_out = set(test)
    val = [i for i in range(n_train, min(n_train + 500, n)) if i not in held_out]
    split = {"train": list(range(n_train)), "val": val, "test": test}
    return write_graph_files(g, out_dir, split)


def convert_linqs(content_path, cites_path, out_dir) -> Path:
    """Convert a LINQS ``.content``/``.cites`` pair. No split file is written."""
    ids, rows, names = [], [], []
    with open(content_path) as fh:
        for raw in fh:
            parts = raw.strip().split("\t")
            if len(parts) < 3:
                continue
            ids.append(parts[0])
            rows.append([float(v) for v in parts[1:-1]])
            names.append(parts[-1])
    index = {pid: i for i, pid in enumerate(ids)}
    classes = {c: i for i, c in enumerate(sorted(set(names)))}
    pairs = set()
    with open(cites_path) as fh:
        for raw in fh:
            parts = raw.split()
            if len(parts) == 2 and parts[0] in index and parts[1] in index:
                a, b = index[parts[0]], index[parts[1]]
                if a != b:
                    pairs.add((min(a, b), max(a, b)))
    pairs = sorted(pairs)
    g = Graph(len(ids), torch.tensor(pairs + [(d, s) for s, d in pairs]).reshape(-1, 2),
              torch.tensor(rows, dtype=torch.float32), torch.tensor([classes[c] for c in names]))
    return write_graph_files(g, out_dir)


# ---- synthetic graphs --------------------------------------------------------

class BitStream:
    """Platform-independent uniforms and normals from PCG64's raw 64-bit output.

    uniform = (raw >> 11) * 2**-53; normals use Box-Muller on pairs of uniforms.
    """

    def __init__(self, seed: int):
        self._bits = np.random.PCG64(seed)

    def uniform(self, n: int) -> np.ndarray:
        raw = self._bits.random_raw(n).astype(np.uint64)
        return (raw >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)

    def normal(self, n: int) -> np.ndarray:
        m = (n + 1) // 2
        u1 = 1.0 - self.uniform(m)  # (0, 1]
        u2 = self.uniform(m)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * math.pi * u2), r * np.sin(2 * math.pi * u2)])
        return z[:n]


def generate_sbm(params: SbmParams) -> Graph:
    """Undirected SBM graph whose labels are the block memberships.

    Node features are ``mean[label] + noise_std * N(0, I)``. Class means are
    ``separation * e_c`` when ``blocks <= feature_dim``, otherwise random unit
    directions scaled by the separation.
    """
    stream = BitStream(params.seed)
    n = params.blocks * params.nodes_per_block
    labels = np.repeat(np.arange(params.blocks), params.nodes_per_block)
    iu, ju = np.triu_indices(n, k=1)
    prob = np.where(labels[iu] == labels[ju], params.p_in, params.p_out)
    hit = stream.uniform(iu.shape[0]) < prob
    pairs = np.stack([iu[hit], ju[hit]], axis=1)
    edges = np.concatenate([pairs, pairs[:, ::-1]], axis=0)
    order = np.lexsort((edges[:, 1], edges[:, 0]))
    edges = edges[order]

    d = params.feature_dim
    if params.blocks <= d:
        means = np.eye(params.blocks, d)
    else:
        means = stream.normal(params.blocks * d).reshape(params.blocks, d)
        means /= np.linalg.norm(means, axis=1, keepdims=True)
    means = means * params.class_mean_separation
    noise = stream.normal(n * d).reshape(n, d) * params.feature_noise_std
    x = (means[labels] + noise).astype(np.float32)
    return Graph(n, torch.from_numpy(edges.copy()), torch.from_numpy(x), torch.from_numpy(labels))


def stratified_split(labels, per_class_train: int, per_class_val: int, seed: int = 0) -> dict:
    """Per-class train/val counts, everything else in test."""
    labels = np.asarray(labels)
    stream = BitStream(seed + 7919)
    split = {"train": [], "val": [], "test": []}
    for c in np.unique(labels):
        ids = np.flatnonzero(labels == c)
        ids = ids[np.argsort(stream.uniform(ids.shape[0]), kind="stable")]
        split["train"] += ids[:per_class_train].tolist()
        split["val"] += ids[per_class_train:per_class_train + per_class_val].tolist()
        split["test"] += ids[per_class_train + per_class_val:].tolist()
    return {k: sorted(v) for k, v in split.items()}


def sbm_dataset(params: Optional[SbmParams] = None, per_class_train: int = 20,
                per_class_val: int = 30) -> tuple[Graph, DatasetSpec]:
    params = params or SbmParams()
    g = generate_sbm(params)
    split = stratified_split(g.labels.numpy(), per_class_train, per_class_val, params.seed)
    return g, DatasetSpec("sbm", "synthetic", vars(params).copy(), split)


def sbm_graph_collection(num_graphs: int = 60, nodes: int = 20, seed: int = 0, max_degree: int = 10):
    """Two-class graph-classification set: assortative vs. disassortative SBM graphs.

    Features are one-hot degrees. Returns ``(graphs, labels)``.
    """
    graphs, labels = [], []
    for i in range(num_graphs):
        cls = i % 2
        p_in, p_out = (0.5, 0.05) if cls == 0 else (0.2, 0.2)
        g = generate_sbm(SbmParams(blocks=2, nodes_per_block=nodes // 2, p_in=p_in, p_out=p_out,
                                   feature_dim=1, class_mean_separation=0.0, seed=seed * 100003 + i))
        g = Graph(g.num_nodes, g.edges, degree_onehot(g.num_nodes, g.edges, max_degree))
        graphs.append(g)
        labels.append(cls)
    return graphs, torch.tensor(labels)


def parse_dataset_arg(arg: str, **kwargs) -> tuple[Graph, DatasetSpec]:
    """``sbm`` / ``sbm:key=value,...`` for synthetic graphs, otherwise a directory path."""
    if arg == "sbm" or arg.startswith("sbm:"):
        overrides = {}
        if ":" in arg:
            for item in arg.split(":", 1)[1].split(","):
                if not item:
                    continue
                key, _, value = item.partition("=")
                ftype = type(getattr(SbmParams(), key, None))
                if ftype is type(None):
                    raise ValueError(f"unknown SBM parameter {key!r}")
                overrides[key] = ftype(value)
        return sbm_dataset(SbmParams(**overrides))
    path = Path(arg)
    if not path.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {arg}")
    return load_dir(path, **kwargs)
