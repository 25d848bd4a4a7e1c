"""Toy differentiable text encoder: hashed token table, mean pooling, two-layer MLP.

Row contractions go through ``np.einsum`` rather than BLAS ``matmul`` so that every
output row is bit-identical regardless of which other rows share the batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
MASK64 = (1 << 64) - 1

ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int = 4096
    d_emb: int = 32
    hidden: int = 32
    d_out: int = 16
    activation: str = "relu"
    init_seed: int = 1
    init_scale: float = 0.1
    dtype: str = "float64"

    def __post_init__(self):
        for name in ("vocab_size", "d_emb", "hidden", "d_out"):
            if getattr(self, name) < 1:
                raise ValueError(f"EncoderConfig.{name} must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")


@dataclass
class EncoderParams:
    """Weights of the encoder. Gradients use the same container."""

    token_table: np.ndarray
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    activation: str = "relu"

    NAMES = ("token_table", "W1", "b1", "W2", "b2")

    def tensors(self) -> dict[str, np.ndarray]:
        return {n: getattr(self, n) for n in self.NAMES}

    @classmethod
    def from_tensors(cls, tensors: dict[str, np.ndarray], activation: str = "relu") -> "EncoderParams":
        return cls(*(tensors[n] for n in cls.NAMES), activation=activation)

    def copy(self) -> "EncoderParams":
        return EncoderParams(*(getattr(self, n).copy() for n in self.NAMES), activation=self.activation)

    def zeros_like(self) -> "EncoderParams":
        return EncoderParams(*(np.zeros_like(getattr(self, n)) for n in self.NAMES),
                             activation=self.activation)

    @property
    def vocab_size(self) -> int:
        return self.token_table.shape[0]

    @property
    def d_out(self) -> int:
        return self.W2.shape[1]

    def all_finite(self) -> bool:
        return all(np.isfinite(getattr(self, n)).all() for n in self.NAMES)


@dataclass
class ActivationCache:
    """What ``backward`` needs to replay one batch."""

    token_index: list[np.ndarray]
    pooled: np.ndarray
    pre: np.ndarray
    post: np.ndarray

    @property
    def rows(self) -> int:
        return self.pooled.shape[0]


def init_params(config: EncoderConfig) -> EncoderParams:
    rng = np.random.default_rng(config.init_seed)
    s = config.init_scale
    dt = np.dtype(config.dtype)

    def u(*shape):
        return rng.uniform(-s, s, size=shape).astype(dt) if s > 0 else np.zeros(shape, dt)

    return EncoderParams(
        token_table=u(config.vocab_size, config.d_emb),
        W1=u(config.d_emb, config.hidden),
        b1=np.zeros(config.hidden, dt),
        W2=u(config.hidden, config.d_out),
        b2=np.zeros(config.d_out, dt),
        activation=config.activation,
    )


def fnv1a_64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & MASK64
    return h


@lru_cache(maxsize=1 << 18)
def hash_token(token: str, vocab_size: int) -> int:
    if vocab_size < 1:
        raise ValueError("vocab_size must be >= 1")
    return fnv1a_64(token.encode("utf-8")) % vocab_size


def token_indices(token_sequences: Sequence[Sequence[str]], vocab_size: int) -> list[np.ndarray]:
    return [np.fromiter((hash_token(t, vocab_size) for t in seq), dtype=np.int64, count=len(seq))
            for seq in token_sequences]


def _pool(table: np.ndarray, index: list[np.ndarray]) -> np.ndarray:
    pooled = np.zeros((len(index), table.shape[1]), dtype=table.dtype)
    for i, idx in enumerate(index):
        if idx.size:
            pooled[i] = table[idx].sum(axis=0) / idx.size
    return pooled


def _act(pre: np.ndarray, kind: str) -> np.ndarray:
    return np.maximum(pre, 0) if kind == "relu" else np.tanh(pre)


def _act_grad(pre: np.ndarray, post: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return (pre > 0).astype(pre.dtype)
    return 1 - post * post


def _forward(params: EncoderParams, index: list[np.ndarray]):
    pooled = _pool(params.token_table, index)
    pre = np.einsum("ij,jk->ik", pooled, params.W1) + params.b1
    post = _act(pre, params.activation)
    out = np.einsum("ij,jk->ik", post, params.W2) + params.b2
    return out, pooled, pre, post


def encode(params: EncoderParams, token_sequences: Sequence[Sequence[str]]) -> np.ndarray:
    """No-gradient forward pass, one output row per token sequence."""
    out, *_ = _forward(params, token_indices(token_sequences, params.vocab_size))
    return out


def encode_with_cache(params: EncoderParams, token_sequences: Sequence[Sequence[str]]):
    index = token_indices(token_sequences, params.vocab_size)
    out, pooled, pre, post = _forward(params, index)
    return out, ActivationCache(index, pooled, pre, post)


def backward(params: EncoderParams, cache: ActivationCache, grad_output: np.ndarray) -> EncoderParams:
    """Gradients of ``sum(grad_output * output)`` with respect to every parameter."""
    g = np.asarray(grad_output, dtype=params.W2.dtype)
    if g.shape != (cache.rows, params.d_out):
        raise ValueError(f"grad_output shape {g.shape} does not match cache "
                         f"({cache.rows}, {params.d_out})")
    gW2 = np.einsum("ij,ik->jk", cache.post, g)
    gb2 = g.sum(axis=0)
    g_post = np.einsum("ik,jk->ij", g, params.W2)
    g_pre = g_post * _act_grad(cache.pre, cache.post, params.activation)
    gW1 = np.einsum("ij,ik->jk", cache.pooled, g_pre)
    gb1 = g_pre.sum(axis=0)
    g_pooled = np.einsum("ik,jk->ij", g_pre, params.W1)
    g_table = np.zeros_like(params.token_table)
    for i, idx in enumerate(cache.token_index):
        if idx.size:
            np.add.at(g_table, idx, g_pooled[i] / idx.size)
    return EncoderParams(g_table, gW1, gb1, gW2, gb2, activation=params.activation)


LossClosure = Callable[[np.ndarray], "tuple[float, np.ndarray]"]


def finite_difference_check(params: EncoderParams, token_sequences, loss_closure: LossClosure,
                            epsilon: float = 1e-5, fraction: float = 0.05, seed: int = 0,
                            analytic: EncoderParams | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_closure(output) -> (loss, d loss / d output)``. A random ``fraction`` of the
    coordinates of each tensor (at least one) is perturbed by ``+-epsilon``. Pass
    ``analytic`` to check externally supplied gradients instead of ``backward``.
    """
    if analytic is None:
        out, cache = encode_with_cache(params, token_sequences)
        _, g_out = loss_closure(out)
        analytic = backward(params, cache, g_out)
    rng = np.random.default_rng(seed)
    probe = params.copy()
    worst = 0.0
    for name in EncoderParams.NAMES:
        flat = getattr(probe, name).reshape(-1)
        grad = getattr(analytic, name).reshape(-1)
        k = max(1, int(round(fraction * flat.size)))
        for j in rng.choice(flat.size, size=min(k, flat.size), replace=False):
            orig = flat[j]
            flat[j] = orig + epsilon
            f_plus, _ = loss_closure(encode(probe, token_sequences))
            flat[j] = orig - epsilon
            f_minus, _ = loss_closure(encode(probe, token_sequences))
            flat[j] = orig
            numeric = (f_plus - f_minus) / (2 * epsilon)
            err = abs(grad[j] - numeric) / max(1e-8, abs(numeric))
            worst = max(worst, float(err))
    return worst
