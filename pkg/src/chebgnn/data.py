"""Synthetic SBM datasets, the line-delimited graph file format, and splits.

File format (JSON Lines, UTF-8).  The optional first line is a header::

    {"schema": "chebgnn.dataset/1", "task": "node-classification",
     "input_dim": 7, "n_classes": 6, "feature_kind": "categorical",
     "splits": {"train": [...], "val": [...], "test": [...]}, "meta": {...}}

Every following line is one graph::

    {"n_nodes": 4, "edges": [0, 1, 1, 2], "weights": [1.0, 2.0],
     "features": [0, 3, 0, 1], "node_labels": [0, 1, 1, 0],
     "graph_label": null, "graph_id": "g17"}

``edges`` is a flat list of undirected pairs (each edge once).
``weights`` is optional (default 1.0).  ``features`` is either one integer
code per node or a list of per-node float rows.

Randomness: graph ``i`` of a generated dataset draws from
``np.random.SeedSequence(seed).spawn(n_graphs)[i]``; shared objects
(pattern library, splits) use separately spawned children of the same root.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .graph import Graph, GraphError, build_graph

DATASET_SCHEMA = "chebgnn.dataset/1"
DEFAULT_FRACTIONS = (10 / 12, 1 / 12, 1 / 12)


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class SbmConfig:
    n_communities: int = 6
    min_size: int = 5
    max_size: int = 35
    p: float = 0.55
    q: float = 0.25
    labeled_per_community: int = 1
    seed: int = 0

    def validate(self) -> None:
        if not (0.0 <= self.q <= self.p <= 1.0):
            raise DatasetError(f"need 0 <= q <= p <= 1, got p={self.p}, q={self.q}")
        if self.n_communities < 1:
            raise DatasetError("n_communities must be >= 1")
        if not (1 <= self.min_size <= self.max_size):
            raise DatasetError(f"invalid community size range [{self.min_size}, {self.max_size}]")
        if not (0 <= self.labeled_per_community <= self.min_size):
            raise DatasetError("labeled_per_community must lie in [0, min_size]")


@dataclass(frozen=True)
class PatternConfig:
    pattern_size: int = 20
    host: SbmConfig = field(default_factory=lambda: SbmConfig(n_communities=5))
    n_patterns: int = 100
    attach_prob: Optional[float] = None  # default host.q / 2
    pattern_p: Optional[float] = None  # default host.p
    vocab: int = 3
    seed: int = 0

    def validate(self) -> None:
        self.host.validate()
        if self.pattern_size < 1:
            raise DatasetError("pattern_size must be >= 1")
        if self.n_patterns < 1 or self.vocab < 1:
            raise DatasetError("n_patterns and vocab must be >= 1")
        for name in ("attach_prob", "pattern_p"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise DatasetError(f"{name} must lie in [0, 1], got {v}")


@dataclass
class Dataset:
    graphs: List[Graph]
    task: str
    input_dim: int
    n_classes: int
    splits: Dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.graphs)

    @property
    def feature_kind(self) -> str:
        return self.graphs[0].feature_kind if self.graphs else "none"

    def subset(self, name: str) -> List[Graph]:
        return [self.graphs[i] for i in self.splits[name]]

    def check_splits(self) -> None:
        idx = np.concatenate([np.asarray(v, dtype=np.int64) for v in self.splits.values()])
        if len(idx) != len(self.graphs) or not np.array_equal(np.sort(idx), np.arange(len(self.graphs))):
            raise DatasetError("splits must be disjoint and cover every graph exactly once")


def _sample_sbm(cfg: SbmConfig, rng: np.random.Generator):
    sizes = rng.integers(cfg.min_size, cfg.max_size + 1, size=cfg.n_communities)
    comm = np.repeat(np.arange(cfg.n_communities), sizes)
    n = len(comm)
    prob = np.where(comm[:, None] == comm[None, :], cfg.p, cfg.q)
    upper = np.triu(rng.random((n, n)) < prob, k=1)
    edges = np.argwhere(upper)
    return comm, edges, sizes


def _relabel(perm_inv: np.ndarray, edges: np.ndarray) -> np.ndarray:
    return perm_inv[edges] if len(edges) else edges.reshape(0, 2)


def _sbm_graph(cfg: SbmConfig, rng: np.random.Generator, graph_id) -> Graph:
    comm, edges, _ = _sample_sbm(cfg, rng)
    n = len(comm)
    feats = np.zeros(n, dtype=np.int64)
    for c in range(cfg.n_communities):
        members = np.flatnonzero(comm == c)
        seeds = rng.choice(members, size=cfg.labeled_per_community, replace=False)
        feats[seeds] = c + 1
    perm = rng.permutation(n)  # new position -> old node
    inv = np.empty(n, dtype=np.int64)
    inv[perm] = np.arange(n)
    return build_graph(
        n,
        _relabel(inv, edges),
        features=feats[perm],
        node_labels=comm[perm],
        graph_id=graph_id,
    )


def gen_cluster_like(
    cfg: SbmConfig, n_graphs: int, fractions: Sequence[float] = DEFAULT_FRACTIONS
) -> Dataset:
    """Semi-supervised community detection on SBM graphs.

    Node feature is ``community + 1`` on the labeled seed nodes and 0 elsewhere;
    the node label is the community id.
    """
    cfg.validate()
    root = np.random.SeedSequence(cfg.seed)
    graph_seeds, split_seed = root.spawn(2)
    graphs = [
        _sbm_graph(cfg, np.random.default_rng(s), f"sbm-{cfg.seed}-{i}")
        for i, s in enumerate(graph_seeds.spawn(n_graphs))
    ]
    ds = Dataset(
        graphs,
        task="node-classification",
        input_dim=cfg.n_communities + 1,
        n_classes=cfg.n_communities,
        splits={},
        meta={"generator": "cluster", "config": asdict(cfg)},
    )
    return split(ds, fractions=fractions, seed=int(split_seed.generate_state(1)[0]))


def _make_patterns(cfg: PatternConfig, rng: np.random.Generator, pattern_p: float):
    out = []
    m = cfg.pattern_size
    for _ in range(cfg.n_patterns):
        edges = np.argwhere(np.triu(rng.random((m, m)) < pattern_p, k=1))
        feats = rng.integers(0, cfg.vocab, size=m)
        out.append((edges, feats))
    return out


def gen_pattern_like(
    cfg: PatternConfig, n_graphs: int, fractions: Sequence[float] = DEFAULT_FRACTIONS
) -> Dataset:
    """Find the embedded pattern: label 1 on pattern nodes, 0 on host nodes."""
    cfg.validate()
    host = cfg.host
    attach = host.q / 2 if cfg.attach_prob is None else cfg.attach_prob
    pattern_p = host.p if cfg.pattern_p is None else cfg.pattern_p
    root = np.random.SeedSequence(cfg.seed)
    graph_seeds, pattern_seed, split_seed = root.spawn(3)
    patterns = _make_patterns(cfg, np.random.default_rng(pattern_seed), pattern_p)

    graphs = []
    for i, s in enumerate(graph_seeds.spawn(n_graphs)):
        rng = np.random.default_rng(s)
        comm, host_edges, _ = _sample_sbm(host, rng)
        nh = len(comm)
        pe, pf = patterns[rng.integers(cfg.n_patterns)]
        m = cfg.pattern_size
        n = nh + m
        att = np.argwhere(rng.random((m, nh)) < attach)
        edges = np.concatenate(
            [host_edges, pe + nh, np.stack([att[:, 0] + nh, att[:, 1]], axis=1)]
        ).reshape(-1, 2)
        feats = np.concatenate([rng.integers(0, cfg.vocab, size=nh), pf])
        labels = np.concatenate([np.zeros(nh, dtype=np.int64), np.ones(m, dtype=np.int64)])
        perm = rng.permutation(n)
        inv = np.empty(n, dtype=np.int64)
        inv[perm] = np.arange(n)
        graphs.append(
            build_graph(
                n,
                _relabel(inv, edges),
                features=feats[perm],
                node_labels=labels[perm],
                graph_id=f"pattern-{cfg.seed}-{i}",
            )
        )
    cfg_meta = asdict(cfg)
    cfg_meta.update(attach_prob=attach, pattern_p=pattern_p)
    ds = Dataset(
        graphs,
        task="node-classification",
        input_dim=cfg.vocab,
        n_classes=2,
        splits={},
        meta={"generator": "pattern", "config": cfg_meta},
    )
    return split(ds, fractions=fractions, seed=int(split_seed.generate_state(1)[0]))


def split(
    ds: Dataset,
    fractions: Optional[Sequence[float]] = None,
    indices: Optional[Dict[str, Sequence[int]]] = None,
    seed: int = 0,
) -> Dataset:
    """Random train/val/test split by fractions, or explicit index lists."""
    n = len(ds.graphs)
    if indices is not None:
        splits = {k: np.asarray(v, dtype=np.int64) for k, v in indices.items()}
    else:
        fractions = DEFAULT_FRACTIONS if fractions is None else tuple(fractions)
        if len(fractions) != 3 or min(fractions) < 0 or not np.isclose(sum(fractions), 1.0):
            raise DatasetError(f"fractions must be 3 non-negative numbers summing to 1, got {fractions}")
        perm = np.random.default_rng(seed).permutation(n)
        n_val = int(round(fractions[1] * n))
        n_test = int(round(fractions[2] * n))
        n_train = n - n_val - n_test
        splits = {
            "train": np.sort(perm[:n_train]),
            "val": np.sort(perm[n_train : n_train + n_val]),
            "test": np.sort(perm[n_train + n_val :]),
        }
    out = Dataset(ds.graphs, ds.task, ds.input_dim, ds.n_classes, splits, dict(ds.meta))
    out.check_splits()
    return out


# ---------------------------------------------------------------------------
# file format


def _graph_record(g: Graph) -> dict:
    rec = {"n_nodes": g.n_nodes, "edges": g.edge_list().ravel().tolist()}
    w = g.edge_weights()
    if not np.all(w == 1.0):
        rec["weights"] = w.tolist()
    if g.features is not None:
        rec["features"] = g.features.tolist()
    if g.node_labels is not None:
        rec["node_labels"] = g.node_labels.tolist()
    if g.graph_label is not None:
        gl = g.graph_label
        rec["graph_label"] = gl.tolist() if isinstance(gl, np.ndarray) else gl
    if g.graph_id is not None:
        rec["graph_id"] = g.graph_id
    return rec


def dataset_header(ds: Dataset) -> dict:
    return {
        "schema": DATASET_SCHEMA,
        "task": ds.task,
        "input_dim": ds.input_dim,
        "n_classes": ds.n_classes,
        "feature_kind": ds.feature_kind,
        "n_graphs": len(ds.graphs),
        "splits": {k: np.asarray(v).tolist() for k, v in ds.splits.items()},
        "meta": ds.meta,
    }


def save_dataset(ds: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(dataset_header(ds), sort_keys=True) + "\n")
        for g in ds.graphs:
            fh.write(json.dumps(_graph_record(g), sort_keys=True) + "\n")


def _parse_graph(rec: dict) -> Graph:
    if not isinstance(rec, dict) or "n_nodes" not in rec or "edges" not in rec:
        raise DatasetError("graph record needs 'n_nodes' and 'edges'")
    flat = rec["edges"]
    if len(flat) % 2:
        raise DatasetError("'edges' must hold an even number of indices")
    return build_graph(
        rec["n_nodes"],
        np.asarray(flat, dtype=np.int64).reshape(-1, 2),
        rec.get("weights"),
        features=rec.get("features"),
        node_labels=rec.get("node_labels"),
        graph_label=rec.get("graph_label"),
        graph_id=rec.get("graph_id"),
    )


def load_dataset(path, task: Optional[str] = None, input_dim: Optional[int] = None) -> Dataset:
    """Read a dataset file.

    Files without a header need ``task``; ``input_dim`` and the class count
    are then inferred and the graphs are split 10/1/1 with seed 0.
    """
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"{path}: no such file")
    header = None
    graphs: List[Graph] = []
    kinds = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            if isinstance(rec, dict) and "schema" in rec:
                if header is not None or graphs:
                    raise DatasetError(f"{path}:{lineno}: header must be the first line")
                if rec["schema"] != DATASET_SCHEMA:
                    raise DatasetError(f"{path}:{lineno}: unsupported schema {rec['schema']!r}")
                header = rec
                continue
            try:
                g = _parse_graph(rec)
            except (GraphError, DatasetError, TypeError, ValueError) as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}") from None
            kinds.add(g.feature_kind)
            if len(kinds) > 1:
                raise DatasetError(f"{path}:{lineno}: mixed feature kinds {sorted(kinds)}")
            width = header["input_dim"] if header else input_dim
            if width is not None and g.features is not None:
                if g.feature_kind == "categorical" and len(g.features) and (
                    g.features.min() < 0 or g.features.max() >= width
                ):
                    raise DatasetError(f"{path}:{lineno}: feature code outside vocabulary of size {width}")
                if g.feature_kind == "dense" and g.features.shape[1] != width:
                    raise DatasetError(f"{path}:{lineno}: feature width {g.features.shape[1]} != {width}")
            graphs.append(g)
    if not graphs:
        raise DatasetError(f"{path}: no graphs")

    if header is not None:
        if task is not None and task != header["task"]:
            raise DatasetError(f"{path}: file task {header['task']!r} != requested {task!r}")
        if input_dim is not None and input_dim != header["input_dim"]:
            raise DatasetError(f"{path}: file input_dim {header['input_dim']} != requested {input_dim}")
        if header.get("n_graphs", len(graphs)) != len(graphs):
            raise DatasetError(f"{path}: header announces {header['n_graphs']} graphs, found {len(graphs)}")
        ds = Dataset(
            graphs,
            header["task"],
            int(header["input_dim"]),
            int(header["n_classes"]),
            {k: np.asarray(v, dtype=np.int64) for k, v in header["splits"].items()},
            header.get("meta", {}),
        )
        ds.check_splits()
        return ds

    if task is None:
        raise DatasetError(f"{path}: file has no header; pass the task explicitly")
    kind = graphs[0].feature_kind
    if input_dim is None:
        if kind == "categorical":
            input_dim = int(max(g.features.max() for g in graphs if g.n_nodes)) + 1
        elif kind == "dense":
            input_dim = int(graphs[0].features.shape[1])
        else:
            raise DatasetError(f"{path}: graphs carry no features")
    if task == "node-classification":
        n_classes = int(max(g.node_labels.max() for g in graphs if g.n_nodes)) + 1
    else:
        first = np.atleast_1d(np.asarray(graphs[0].graph_label, dtype=np.float64))
        n_classes = len(first)
    ds = Dataset(graphs, task, int(input_dim), n_classes, {}, {"source": str(path)})
    return split(ds, seed=0)
