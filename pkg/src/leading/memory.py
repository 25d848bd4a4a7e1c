"""Embedding memory bank: the latest encoder output for every node."""

from __future__ import annotations

import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import archive
from .encoder import EncoderParams, encode
from .graph import TextAttributedGraph


@dataclass
class StalenessReport:
    per_node: np.ndarray
    mean: float
    max: int


class MemoryBank:
    """N x d table with per-row version counters and last-write step stamps.

    Writes replace rows under a lock, so concurrent readers always see whole rows.
    """

    def __init__(self, table: np.ndarray, version: np.ndarray | None = None,
                 last_update_step: np.ndarray | None = None):
        self.table = np.array(table, copy=True)
        n = self.table.shape[0]
        self.version = np.zeros(n, np.int64) if version is None else np.array(version, np.int64)
        self.last_update_step = (np.zeros(n, np.int64) if last_update_step is None
                                 else np.array(last_update_step, np.int64))
        self._lock = threading.Lock()

    @property
    def num_nodes(self) -> int:
        return self.table.shape[0]

    @property
    def dim(self) -> int:
        return self.table.shape[1]

    def _check_ids(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64).reshape(-1)
        if ids.size and (ids.min() < 0 or ids.max() >= self.num_nodes):
            bad = ids[(ids < 0) | (ids >= self.num_nodes)][0]
            raise IndexError(f"node id {bad} outside bank of {self.num_nodes} rows")
        return ids

    def write(self, ids: Sequence[int], embeddings: np.ndarray, step: int = 0) -> None:
        ids = self._check_ids(ids)
        emb = np.asarray(embeddings)
        if emb.shape != (ids.size, self.dim):
            raise ValueError(f"write: expected embeddings of shape {(ids.size, self.dim)}, "
                             f"got {emb.shape}")
        if np.unique(ids).size != ids.size:
            raise ValueError("write: duplicate node id in one call")
        with self._lock:
            self.table[ids] = emb
            self.version[ids] += 1
            self.last_update_step[ids] = step

    def read(self, ids: Sequence[int]) -> np.ndarray:
        ids = self._check_ids(ids)
        with self._lock:
            return self.table[ids].copy()

    def staleness_report(self, current_step: int) -> StalenessReport:
        with self._lock:
            per = current_step - self.last_update_step
        return StalenessReport(per, float(per.mean()) if per.size else 0.0,
                               int(per.max()) if per.size else 0)

    def snapshot(self) -> "MemoryBank":
        with self._lock:
            return MemoryBank(self.table, self.version, self.last_update_step)

    def tensors(self) -> dict[str, np.ndarray]:
        with self._lock:
            return {"table": self.table.copy(), "version": self.version.copy(),
                    "last_update_step": self.last_update_step.copy()}

    def save(self, path: str | Path) -> None:
        archive.save(path, self.tensors())

    @classmethod
    def load(cls, path: str | Path) -> "MemoryBank":
        t = archive.load(path)
        return cls(t["table"], t["version"], t["last_update_step"])


def init_bank(params: EncoderParams, graph: TextAttributedGraph) -> MemoryBank:
    """Fill the bank with one no-gradient pass of the initial encoder; versions start at 1."""
    bank = MemoryBank(encode(params, graph.tokens))
    bank.version[:] = 1
    return bank
