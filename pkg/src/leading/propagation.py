"""Lazy implicit propagation: warm-started forward and backward recursions.

Forward, per call ``k``::

    X_0 = feat_memory[batch]            # X_L from the previous call
    X_{l+1} = (1 - a) * A @ X_l + a * X_in

Backward, per call::

    G_L = grad_memory[batch]            # G_0 from the previous call
    G_l = (1 - a) * A @ G_{l+1} + a * dLoss/dX_L
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .graph import SparseAdjacency, SpmmCounter, spmm
from .sampler import SubgraphBatch


@dataclass(frozen=True)
class PropagationConfig:
    alpha: float = 0.1
    num_layers: int = 4
    warm_start: bool = True

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")


@dataclass
class LazyState:
    feat_memory: np.ndarray
    grad_memory: np.ndarray
    iteration: int = 0

    @classmethod
    def zeros(cls, num_nodes: int, dim: int, dtype=np.float64) -> "LazyState":
        return cls(np.zeros((num_nodes, dim), dtype), np.zeros((num_nodes, dim), dtype))

    def tensors(self) -> dict[str, np.ndarray]:
        return {"feat_memory": self.feat_memory, "grad_memory": self.grad_memory,
                "iteration": np.int64(self.iteration)}

    @classmethod
    def from_tensors(cls, t: dict[str, np.ndarray]) -> "LazyState":
        return cls(t["feat_memory"], t["grad_memory"], int(t["iteration"]))


def reset_state(state: LazyState) -> None:
    state.feat_memory[:] = 0
    state.grad_memory[:] = 0
    state.iteration = 0


def snapshot_state(state: LazyState) -> LazyState:
    return copy.deepcopy(state)


def _check(batch: SubgraphBatch, m: np.ndarray, what: str, state: LazyState):
    if m.ndim != 2 or m.shape[0] != len(batch):
        raise ValueError(f"{what} has shape {m.shape}, batch has {len(batch)} local rows")
    if m.shape[1] != state.feat_memory.shape[1]:
        raise ValueError(f"{what} has width {m.shape[1]}, state has {state.feat_memory.shape[1]}")


def forward_propagate(state: LazyState, batch: SubgraphBatch, x_in: np.ndarray,
                      cfg: PropagationConfig, counter: SpmmCounter | None = None) -> np.ndarray:
    """Run ``cfg.num_layers`` warm-started steps on the batch; persist and return local X_L."""
    _check(batch, x_in, "x_in", state)
    ids = batch.global_ids
    x = state.feat_memory[ids] if cfg.warm_start else np.zeros_like(x_in)
    a = cfg.alpha
    for _ in range(cfg.num_layers):
        x = (1 - a) * spmm(batch.local_adj, x, counter) + a * x_in
    state.feat_memory[ids] = x
    state.iteration += 1
    return x


def backward_propagate(state: LazyState, batch: SubgraphBatch, grad_xL: np.ndarray,
                       cfg: PropagationConfig, counter: SpmmCounter | None = None,
                       all_rows: bool = False) -> np.ndarray:
    """Adjoint recursion; returns G_0 for the target rows (all local rows with ``all_rows``)."""
    _check(batch, grad_xL, "grad_xL", state)
    ids = batch.global_ids
    g = state.grad_memory[ids] if cfg.warm_start else np.zeros_like(grad_xL)
    a = cfg.alpha
    for _ in range(cfg.num_layers):
        g = (1 - a) * spmm(batch.local_adj, g, counter) + a * grad_xL
    state.grad_memory[ids] = g
    return g if all_rows else g[:batch.num_targets]


def exact_fixed_point(adj: SparseAdjacency, x_in: np.ndarray, alpha: float) -> np.ndarray:
    """Dense solve of (I - (1 - alpha) A) X = alpha X_in."""
    assert 0.0 < alpha <= 1.0
    n = adj.shape[0]
    system = np.eye(n) - (1 - alpha) * adj.to_dense()
    return np.linalg.solve(system, alpha * np.asarray(x_in, dtype=np.float64))


def unrolled(adj: SparseAdjacency, x_in: np.ndarray, alpha: float, num_layers: int,
             x0: np.ndarray | None = None, counter: SpmmCounter | None = None) -> np.ndarray:
    """Stateless ``num_layers``-step propagation starting from ``x0`` (zeros by default)."""
    x = np.zeros_like(x_in) if x0 is None else x0
    for _ in range(num_layers):
        x = (1 - alpha) * spmm(adj, x, counter) + alpha * x_in
    return x


def converge(adj: SparseAdjacency, x_in: np.ndarray, alpha: float, tol: float = 1e-10,
             max_iter: int = 10_000, counter: SpmmCounter | None = None) -> np.ndarray:
    """Iterate the propagation map from zero until the update falls below ``tol`` (max-norm)."""
    x = np.zeros_like(x_in)
    for _ in range(max_iter):
        nxt = (1 - alpha) * spmm(adj, x, counter) + alpha * x_in
        done = np.max(np.abs(nxt - x), initial=0.0) <= tol
        x = nxt
        if done:
            break
    return x
