"""Text-attributed graphs, normalized sparse adjacency and sparse-dense products."""

from __future__ import annotations

import io
import json
import threading
import warnings
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

SPLITS = ("train", "val", "test")


class GraphFormatError(ValueError):
    """Raised for malformed node/edge files or invalid graph contents."""

    def __init__(self, message: str, path: str | Path | None = None, line: int | None = None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line


@dataclass
class TextAttributedGraph:
    """Undirected graph whose nodes carry token sequences, labels and a split tag.

    ``edges`` is an (M, 2) int64 array with ``u < v`` per row, sorted and unique.
    ``labels`` uses -1 for unlabeled nodes.
    """

    num_nodes: int
    edges: np.ndarray
    tokens: list[list[str]]
    labels: np.ndarray
    split: np.ndarray

    def __post_init__(self):
        n = int(self.num_nodes)
        self.num_nodes = n
        self.edges = _canonical_edges(np.asarray(self.edges, dtype=np.int64).reshape(-1, 2))
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.split = np.asarray(self.split, dtype="<U5")
        self.tokens = [list(t) for t in self.tokens]
        if len(self.tokens) != n or self.labels.shape != (n,) or self.split.shape != (n,):
            raise GraphFormatError("tokens, labels and split must all have one entry per node")
        if self.edges.size and (self.edges.min() < 0 or self.edges.max() >= n):
            raise GraphFormatError("edge endpoint out of range")
        if np.any(self.edges[:, 0] == self.edges[:, 1]):
            raise GraphFormatError("self-loop edges are not stored")
        bad = ~np.isin(self.split, SPLITS)
        if bad.any():
            raise GraphFormatError(f"unknown split tag {self.split[bad][0]!r}")
        if np.any(self.labels < -1):
            raise GraphFormatError("labels must be >= 0 or -1 for unlabeled")
        if np.any((self.split == "train") & (self.labels < 0)):
            raise GraphFormatError("every train-split node needs a label")

    @property
    def num_edges(self) -> int:
        return int(self.edges.shape[0])

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.num_nodes and self.labels.max() >= 0 else 0

    def ids(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.split == split)

    def train_ids(self) -> np.ndarray:
        return self.ids("train")

    def val_ids(self) -> np.ndarray:
        return self.ids("val")

    def test_ids(self) -> np.ndarray:
        return self.ids("test")

    def without_edges(self) -> "TextAttributedGraph":
        return TextAttributedGraph(self.num_nodes, np.zeros((0, 2), np.int64), self.tokens,
                                   self.labels.copy(), self.split.copy())

    def __eq__(self, other):
        if not isinstance(other, TextAttributedGraph):
            return NotImplemented
        return (self.num_nodes == other.num_nodes
                and np.array_equal(self.edges, other.edges)
                and self.tokens == other.tokens
                and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.split, other.split))

    def to_bytes(self) -> bytes:
        """Binary cache form; ``from_bytes(g.to_bytes()) == g``."""
        buf = io.BytesIO()
        tokens = json.dumps(self.tokens, ensure_ascii=False).encode("utf-8")
        np.savez(buf, num_nodes=np.int64(self.num_nodes), edges=self.edges, labels=self.labels,
                 split=self.split, tokens=np.frombuffer(tokens, dtype=np.uint8))
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "TextAttributedGraph":
        with np.load(io.BytesIO(data), allow_pickle=False) as z:
            tokens = json.loads(z["tokens"].tobytes().decode("utf-8"))
            return cls(int(z["num_nodes"]), z["edges"], tokens, z["labels"], z["split"])


def _canonical_edges(edges: np.ndarray) -> np.ndarray:
    if edges.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    e = np.sort(edges, axis=1)
    return np.unique(e, axis=0)


@dataclass(frozen=True)
class SparseAdjacency:
    """CSR matrix. ``self_loops`` records whether the diagonal was added before normalizing."""

    indptr: np.ndarray
    indices: np.ndarray
    values: np.ndarray
    shape: tuple[int, int]
    self_loops: bool = False

    @property
    def nnz(self) -> int:
        return int(self.indices.shape[0])

    @cached_property
    def csr(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.values, self.indices, self.indptr), shape=self.shape)

    def to_dense(self) -> np.ndarray:
        return self.csr.toarray()

    def neighbors(self, i: int) -> np.ndarray:
        """Column ids of row ``i`` excluding the diagonal."""
        cols = self.indices[self.indptr[i]:self.indptr[i + 1]]
        return cols[cols != i] if self.self_loops else cols

    def laplacian(self) -> sp.csr_matrix:
        return (sp.identity(self.shape[0], format="csr") - self.csr).tocsr()


def normalized_from_edges(n: int, edges: np.ndarray, add_self_loops: bool = False,
                          dtype=np.float64) -> SparseAdjacency:
    """Build D^-1/2 A D^-1/2 from an undirected (u, v) edge array."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    rows = np.concatenate([edges[:, 0], edges[:, 1]])
    cols = np.concatenate([edges[:, 1], edges[:, 0]])
    if add_self_loops:
        loop = np.arange(n, dtype=np.int64)
        rows = np.concatenate([rows, loop])
        cols = np.concatenate([cols, loop])
    deg = np.bincount(rows, minlength=n).astype(np.float64)
    order = np.lexsort((cols, rows))
    rows, cols = rows[order], cols[order]
    with np.errstate(divide="ignore"):
        inv_sqrt = np.where(deg > 0, 1.0 / np.sqrt(deg), 0.0)
    values = (inv_sqrt[rows] * inv_sqrt[cols]).astype(dtype)
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=n), out=indptr[1:])
    return SparseAdjacency(indptr, cols, values, (n, n), add_self_loops)


def build_normalized_adjacency(graph: TextAttributedGraph, add_self_loops: bool = False,
                               dtype=np.float64) -> SparseAdjacency:
    return normalized_from_edges(graph.num_nodes, graph.edges, add_self_loops, dtype)


class SpmmCounter:
    """Thread-safe running total of sparse-dense multiply-adds."""

    def __init__(self):
        self._lock = threading.Lock()
        self._total = 0

    def add(self, n: int) -> None:
        with self._lock:
            self._total += int(n)

    @property
    def total(self) -> int:
        with self._lock:
            return self._total

    def reset(self) -> None:
        with self._lock:
            self._total = 0


SPMM_COUNTER = SpmmCounter()


def spmm(adj: SparseAdjacency, x: np.ndarray, counter: SpmmCounter | None = None) -> np.ndarray:
    """Return ``adj @ x`` and charge ``nnz * x.cols`` multiply-adds to ``counter``."""
    x = np.asarray(x)
    if x.ndim != 2 or adj.shape[1] != x.shape[0]:
        raise ValueError(f"spmm: adjacency {adj.shape} incompatible with dense {x.shape}")
    (counter or SPMM_COUNTER).add(adj.nnz * x.shape[1])
    return np.asarray(adj.csr @ x)


# --
# File IO

def load_graph(nodes_path: str | Path, edges_path: str | Path,
               num_classes: int | None = None) -> TextAttributedGraph:
    """Parse the TSV node file and space-separated edge file.

    Self-loops and duplicate undirected edges in the edge file are dropped; a warning
    reports how many.
    """
    tokens: list[list[str]] = []
    labels: list[int] = []
    splits: list[str] = []
    with open(nodes_path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            parts = line.split("\t", 3)
            if len(parts) != 4:
                raise GraphFormatError("expected node_id<TAB>label<TAB>split<TAB>text",
                                       nodes_path, lineno)
            node_id, label, split, text = parts
            try:
                nid = int(node_id)
            except ValueError:
                raise GraphFormatError(f"bad node id {node_id!r}", nodes_path, lineno) from None
            if nid != lineno - 1:
                raise GraphFormatError(f"node id {nid} must equal line index {lineno - 1}",
                                       nodes_path, lineno)
            if label == "-":
                lab = -1
            else:
                try:
                    lab = int(label)
                except ValueError:
                    raise GraphFormatError(f"bad label {label!r}", nodes_path, lineno) from None
                if lab < 0 or (num_classes is not None and lab >= num_classes):
                    raise GraphFormatError(f"label {lab} out of range", nodes_path, lineno)
            if split not in SPLITS:
                raise GraphFormatError(f"unknown split tag {split!r}", nodes_path, lineno)
            if split == "train" and lab < 0:
                raise GraphFormatError("train node without label", nodes_path, lineno)
            tokens.append(text.split())
            labels.append(lab)
            splits.append(split)

    n = len(tokens)
    pairs = []
    dropped = 0
    seen = set()
    with open(edges_path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise GraphFormatError("expected 'src dst'", edges_path, lineno)
            try:
                u, v = int(parts[0]), int(parts[1])
            except ValueError:
                raise GraphFormatError(f"bad edge {line!r}", edges_path, lineno) from None
            if not (0 <= u < n and 0 <= v < n):
                raise GraphFormatError(f"edge endpoint out of range for N={n}: {line!r}",
                                       edges_path, lineno)
            key = (min(u, v), max(u, v))
            if u == v or key in seen:
                dropped += 1
                continue
            seen.add(key)
            pairs.append(key)
    if dropped:
        warnings.warn(f"dropped {dropped} self-loop/duplicate edge(s) from {edges_path}",
                      stacklevel=2)
    edges = np.array(pairs, dtype=np.int64).reshape(-1, 2)
    return TextAttributedGraph(n, edges, tokens, np.array(labels, dtype=np.int64),
                               np.array(splits, dtype="<U5"))


def save_graph(graph: TextAttributedGraph, nodes_path: str | Path, edges_path: str | Path) -> None:
    with open(nodes_path, "w", encoding="utf-8", newline="\n") as fh:
        for i in range(graph.num_nodes):
            label = "-" if graph.labels[i] < 0 else str(int(graph.labels[i]))
            fh.write(f"{i}\t{label}\t{graph.split[i]}\t{' '.join(graph.tokens[i])}\n")
    with open(edges_path, "w", encoding="utf-8", newline="\n") as fh:
        for u, v in graph.edges:
            fh.write(f"{u} {v}\n")


def load_graph_dir(path: str | Path, num_classes: int | None = None) -> TextAttributedGraph:
    path = Path(path)
    return load_graph(path / "nodes.tsv", path / "edges.tsv", num_classes)


def save_graph_dir(graph: TextAttributedGraph, path: str | Path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    save_graph(graph, path / "nodes.tsv", path / "edges.tsv")


# --
# Synthetic data

CLASS_TOKEN_SHARE = 0.7


def min_nodes_for_split(num_classes: int, train_per_class: int) -> int:
    return num_classes * train_per_class + 2


def synthetic_graph(num_nodes: int, num_classes: int, intra_p: float, inter_p: float,
                    tokens_per_node: int = 16, vocab_per_class: int = 50,
                    shared_vocab: int = 200, seed: int = 0, train_per_class: int = 20,
                    num_val: int = 500) -> TextAttributedGraph:
    """Stochastic block model graph with class-correlated bag-of-words text.

    Node ``i`` belongs to class ``i % num_classes``. Each node gets
    ``round(0.7 * tokens_per_node)`` tokens from its class vocabulary and the rest from
    a shared vocabulary, in shuffled order. Splits: ``train_per_class`` train nodes per
    class, then ``min(num_val, rest // 2)`` validation nodes, the remainder test.
    """
    if not (0.0 <= intra_p <= 1.0 and 0.0 <= inter_p <= 1.0):
        raise ValueError("edge probabilities must lie in [0, 1]")
    for name, val in [("num_nodes", num_nodes), ("num_classes", num_classes),
                      ("tokens_per_node", tokens_per_node), ("vocab_per_class", vocab_per_class),
                      ("shared_vocab", shared_vocab), ("train_per_class", train_per_class)]:
        if val < 1:
            raise ValueError(f"{name} must be positive")
    smallest_class = num_nodes // num_classes
    need = min_nodes_for_split(num_classes, train_per_class)
    if smallest_class < train_per_class or num_nodes < need:
        raise ValueError(
            f"num_nodes={num_nodes} too small for {train_per_class} train nodes per class "
            f"x {num_classes} classes plus val/test; need at least "
            f"{need} nodes")

    rng = np.random.default_rng(seed)
    labels = np.arange(num_nodes, dtype=np.int64) % num_classes

    iu, ju = np.triu_indices(num_nodes, k=1)
    probs = np.where(labels[iu] == labels[ju], intra_p, inter_p)
    keep = rng.random(iu.shape[0]) < probs
    edges = np.stack([iu[keep], ju[keep]], axis=1)

    n_class_tok = int(round(CLASS_TOKEN_SHARE * tokens_per_node))
    tokens = []
    for i in range(num_nodes):
        own = rng.integers(0, vocab_per_class, size=n_class_tok)
        shared = rng.integers(0, shared_vocab, size=tokens_per_node - n_class_tok)
        words = [f"c{labels[i]}w{j}" for j in own] + [f"sw{j}" for j in shared]
        order = rng.permutation(len(words))
        tokens.append([words[k] for k in order])

    split = np.full(num_nodes, "test", dtype="<U5")
    perm = rng.permutation(num_nodes)
    rest = []
    taken = np.zeros(num_classes, dtype=np.int64)
    for i in perm:
        c = labels[i]
        if taken[c] < train_per_class:
            split[i] = "train"
            taken[c] += 1
        else:
            rest.append(i)
    n_val = min(num_val, len(rest) // 2)
    split[np.array(rest[:n_val], dtype=np.int64)] = "val"
    return TextAttributedGraph(num_nodes, edges, tokens, labels, split)


def random_edges_graph(num_nodes: int, num_edges: int, seed: int = 0,
                       num_classes: int = 2) -> TextAttributedGraph:
    """Uniform random simple graph with exactly ``num_edges`` edges and placeholder text."""
    max_edges = num_nodes * (num_nodes - 1) // 2
    if num_edges > max_edges:
        raise ValueError(f"at most {max_edges} edges fit on {num_nodes} nodes")
    rng = np.random.default_rng(seed)
    chosen: set[tuple[int, int]] = set()
    while len(chosen) < num_edges:
        u, v = rng.integers(0, num_nodes, size=2)
        if u != v:
            chosen.add((min(u, v), max(u, v)))
    labels = np.arange(num_nodes) % num_classes
    split = np.where(np.arange(num_nodes) < 2 * num_classes, "train", "test")
    return TextAttributedGraph(num_nodes, np.array(sorted(chosen), dtype=np.int64),
                               [[f"t{i}"] for i in range(num_nodes)], labels, split)


def from_edge_list(num_nodes: int, edges: Sequence[tuple[int, int]],
                   tokens: Sequence[Sequence[str]] | None = None,
                   labels: Sequence[int] | None = None,
                   split: Sequence[str] | None = None) -> TextAttributedGraph:
    """Convenience constructor for small hand-built graphs."""
    if tokens is None:
        tokens = [[f"n{i}"] for i in range(num_nodes)]
    if labels is None:
        labels = [i % 2 for i in range(num_nodes)]
    if split is None:
        split = ["train"] * num_nodes
    return TextAttributedGraph(num_nodes, np.array(edges, dtype=np.int64).reshape(-1, 2),
                               [list(t) for t in tokens], np.array(labels), np.array(split))
