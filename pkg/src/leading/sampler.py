"""Target batching, fan-out neighbor sampling and the encoding-redundancy profiler."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .graph import SparseAdjacency, TextAttributedGraph, build_normalized_adjacency, \
    normalized_from_edges


@dataclass(frozen=True)
class FanoutSpec:
    """Per-hop neighbor caps, e.g. ``FanoutSpec((10, 5))``."""

    hops: tuple[int, ...]

    def __post_init__(self):
        hops = tuple(int(h) for h in self.hops)
        if not hops or any(h < 1 for h in hops):
            raise ValueError(f"fanout must be a nonempty list of positive ints, got {self.hops!r}")
        object.__setattr__(self, "hops", hops)

    @classmethod
    def parse(cls, text: str) -> "FanoutSpec":
        try:
            return cls(tuple(int(p) for p in text.split(",") if p.strip()))
        except ValueError as exc:
            raise ValueError(f"bad fanout {text!r}: {exc}") from None

    @classmethod
    def of(cls, fanout) -> "FanoutSpec":
        if isinstance(fanout, FanoutSpec):
            return fanout
        if isinstance(fanout, str):
            return cls.parse(fanout)
        return cls(tuple(fanout))

    def __len__(self):
        return len(self.hops)

    def __str__(self):
        return ",".join(map(str, self.hops))


@dataclass
class SubgraphBatch:
    """Sampled computation subgraph. Local rows ``[0, T)`` are the targets."""

    target_ids: np.ndarray
    neighbor_ids: np.ndarray
    local_index: dict[int, int]
    local_adj: SparseAdjacency
    sampled_edges: np.ndarray

    @property
    def num_targets(self) -> int:
        return int(self.target_ids.shape[0])

    @property
    def num_neighbors(self) -> int:
        return int(self.neighbor_ids.shape[0])

    @property
    def global_ids(self) -> np.ndarray:
        return np.concatenate([self.target_ids, self.neighbor_ids])

    def __len__(self):
        return self.num_targets + self.num_neighbors


def derive_seed(*keys: int | str) -> int:
    """Stable 63-bit seed from a tuple of ints/strings (e.g. run seed, epoch, batch)."""
    words = []
    for k in keys:
        if isinstance(k, str):
            words.extend(k.encode("utf-8"))
        else:
            words.append(int(k))
    return int(np.random.SeedSequence(words).generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def batch_seed(run_seed: int, epoch: int, batch_index: int) -> int:
    return derive_seed(run_seed, epoch, batch_index)


def epoch_batches(node_ids: Sequence[int], batch_size: int, shuffle: bool = False,
                  seed: int = 0) -> list[np.ndarray]:
    ids = np.asarray(node_ids, dtype=np.int64)
    if ids.size == 0:
        raise ValueError("epoch_batches: node_ids is empty")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if shuffle:
        ids = ids[np.random.default_rng(seed).permutation(ids.size)]
    return [ids[i:i + batch_size] for i in range(0, ids.size, batch_size)]


def sample_subgraph(graph: TextAttributedGraph, adj: SparseAdjacency, targets: Sequence[int],
                    fanout, seed: int = 0) -> SubgraphBatch:
    """Expand ``targets`` hop by hop, sampling without replacement.

    At hop ``h`` every node first discovered at hop ``h - 1`` (targets at hop 0) draws
    ``min(fanout[h], degree)`` distinct neighbors. Traversed edges form the local graph,
    normalized by local degree. Targets met during expansion stay in their target slot.
    """
    fanout = FanoutSpec.of(fanout)
    rng = np.random.default_rng(seed)
    target_ids = np.asarray(list(dict.fromkeys(int(t) for t in targets)), dtype=np.int64)
    if target_ids.size == 0:
        raise ValueError("sample_subgraph: targets is empty")
    local = {int(t): i for i, t in enumerate(target_ids)}
    neighbors: list[int] = []
    edges: set[tuple[int, int]] = set()

    frontier = list(target_ids)
    for cap in fanout.hops:
        nxt = []
        for u in frontier:
            nbrs = adj.neighbors(int(u))
            if nbrs.size == 0:
                continue
            if nbrs.size > cap:
                nbrs = nbrs[np.sort(rng.choice(nbrs.size, size=cap, replace=False))]
            for v in nbrs:
                v = int(v)
                if v not in local:
                    local[v] = len(local)
                    neighbors.append(v)
                    nxt.append(v)
                a, b = local[int(u)], local[v]
                edges.add((min(a, b), max(a, b)))
        frontier = nxt
        if not frontier:
            break

    n_local = len(local)
    local_edges = np.array(sorted(edges), dtype=np.int64).reshape(-1, 2)
    local_adj = normalized_from_edges(n_local, local_edges, adj.self_loops, adj.values.dtype)
    return SubgraphBatch(target_ids, np.array(neighbors, dtype=np.int64), local, local_adj,
                         local_edges)


def full_graph_batch(adj: SparseAdjacency, order: Sequence[int] | None = None,
                     num_targets: int | None = None) -> SubgraphBatch:
    """Whole graph as one batch. ``order`` lists global ids, the first ``num_targets`` are targets."""
    n = adj.shape[0]
    order = np.arange(n, dtype=np.int64) if order is None else np.asarray(order, dtype=np.int64)
    if sorted(order.tolist()) != list(range(n)):
        raise ValueError("order must be a permutation of all node ids")
    t = n if num_targets is None else int(num_targets)
    if np.array_equal(order, np.arange(n)):
        local_adj = adj
    else:
        local_adj = sp_permute(adj, order)
    rows = np.repeat(np.arange(n), np.diff(local_adj.indptr))
    mask = rows < local_adj.indices
    edges = np.stack([rows[mask], local_adj.indices[mask]], axis=1)
    return SubgraphBatch(order[:t], order[t:], {int(g): i for i, g in enumerate(order)},
                         local_adj, edges)


def sp_permute(adj: SparseAdjacency, order: np.ndarray) -> SparseAdjacency:
    """Symmetric permutation: local row ``i`` is global row ``order[i]``."""
    m = adj.csr[order][:, order].tocsr()
    m.sort_indices()
    return SparseAdjacency(m.indptr.astype(np.int64), m.indices.astype(np.int64), m.data,
                           adj.shape, adj.self_loops)


# --
# Redundancy profiler

@dataclass
class RedundancyReport:
    """Per-node encoder invocation counts summed over ``epochs`` epochs."""

    schedule: str
    epochs: int
    batch_size: int
    fanout: tuple[int, ...]
    target_count: np.ndarray
    neighbor_count: np.ndarray
    target_slots: int
    counting_rule: str = "a node is counted at most once per batch"

    @property
    def num_nodes(self) -> int:
        return int(self.target_count.shape[0])

    @property
    def mean_target(self) -> float:
        return float(self.target_count.mean()) / self.epochs

    @property
    def mean_neighbor(self) -> float:
        return float(self.neighbor_count.mean()) / self.epochs

    @property
    def mean_total(self) -> float:
        return self.mean_target + self.mean_neighbor

    def encoder_invocations(self) -> dict[str, int]:
        return {"with_grad": int(self.target_count.sum()) if self.schedule == "leading"
                else int(self.target_count.sum() + self.neighbor_count.sum()),
                "no_grad": int(self.neighbor_count.sum()) if self.schedule == "leading" else 0,
                "total": int(self.target_count.sum() + self.neighbor_count.sum())}

    def to_dict(self) -> dict:
        return {
            "schedule": self.schedule,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "fanout": list(self.fanout),
            "num_nodes": self.num_nodes,
            "counting_rule": self.counting_rule,
            "target_slots": self.target_slots,
            "target_count": self.target_count.tolist(),
            "neighbor_count": self.neighbor_count.tolist(),
            "mean_target_per_epoch": self.mean_target,
            "mean_neighbor_per_epoch": self.mean_neighbor,
            "mean_total_per_epoch": self.mean_total,
            "encoder_invocations": self.encoder_invocations(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


def pipeline2_batches(num_nodes: int, batch_size: int, run_seed: int, epoch: int) -> list[np.ndarray]:
    """One seeded permutation of all nodes per epoch, cut into refresh batches."""
    return epoch_batches(np.arange(num_nodes), batch_size, shuffle=True,
                         seed=derive_seed(run_seed, "pipeline2", epoch))


def target_batches(node_ids, batch_size: int, run_seed: int, epoch: int) -> list[np.ndarray]:
    return epoch_batches(node_ids, batch_size, shuffle=True,
                         seed=derive_seed(run_seed, "pipeline1", epoch))


def profile_encoding_redundancy(graph: TextAttributedGraph, batch_size: int, fanout, epochs: int = 1,
                                schedule: str = "coupled", seed: int = 0,
                                adj: SparseAdjacency | None = None,
                                pipeline2_batch: int | None = None,
                                target_ids=None) -> RedundancyReport:
    """Count encoder invocations per node over ``epochs`` epochs.

    Targets default to every node once per epoch; pass ``target_ids`` (e.g. the train
    split) to replay a trainer's schedule. ``coupled`` charges one encoding per node per
    batch it appears in as a sampled neighbor. ``leading`` charges neighbor encodings to
    the pipeline-2 sweep over all nodes instead.
    """
    if schedule not in ("coupled", "leading"):
        raise ValueError(f"unknown schedule {schedule!r}")
    fanout = FanoutSpec.of(fanout)
    if adj is None:
        adj = build_normalized_adjacency(graph)
    n = graph.num_nodes
    tcount = np.zeros(n, dtype=np.int64)
    ncount = np.zeros(n, dtype=np.int64)
    slots = 0
    targets_all = np.arange(n) if target_ids is None else np.asarray(target_ids, dtype=np.int64)
    for epoch in range(epochs):
        batches = target_batches(targets_all, batch_size, seed, epoch)
        for b, targets in enumerate(batches):
            tcount[targets] += 1
            slots += targets.size
            if schedule == "coupled":
                sub = sample_subgraph(graph, adj, targets, fanout, batch_seed(seed, epoch, b))
                ncount[sub.neighbor_ids] += 1
        if schedule == "leading":
            for refresh in pipeline2_batches(n, pipeline2_batch or batch_size, seed, epoch):
                ncount[refresh] += 1
    return RedundancyReport(schedule, epochs, batch_size, fanout.hops, tcount, ncount, slots)
