"""Training regimes: LEADING (two-pipeline, lazy propagation), coupled and cascaded baselines.

All three share the target batch schedule, the neighbor sampler seeds, the classifier
head and the optimizer, so their loss streams are directly comparable.
"""

from __future__ import annotations

import json
import logging
import threading
from dataclasses import asdict, dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .encoder import ActivationCache, EncoderConfig, EncoderParams, backward, encode, \
    encode_with_cache, init_params
from .graph import SparseAdjacency, SpmmCounter, TextAttributedGraph, build_normalized_adjacency
from .memory import MemoryBank, init_bank
from .propagation import LazyState, PropagationConfig, backward_propagate, converge, \
    exact_fixed_point, forward_propagate, unrolled
from .sampler import FanoutSpec, SubgraphBatch, batch_seed, derive_seed, full_graph_batch, \
    pipeline2_batches, sample_subgraph, target_batches

log = logging.getLogger(__name__)

MODES = ("leading", "coupled", "cascaded")
SCHEDULES = ("sequential", "concurrent")
BANK_WRITE_NOTE = "pipeline-1 bank writes store the forward values computed before the optimizer step"


class NonFiniteError(FloatingPointError):
    """A gradient or parameter tensor contains NaN or inf."""


# --
# Configuration

@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-3
    encoder_lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass(frozen=True)
class DownstreamConfig:
    """Post-fine-tuning classifier: propagate embeddings, then fit a linear head.

    ``num_layers = 0`` propagates to the fixed point; otherwise runs that many steps from zero.
    """

    alpha: float = 0.1
    num_layers: int = 0
    lr: float = 0.01
    max_epochs: int = 500
    patience: int = 20
    init_scale: float = 0.1
    standardize: bool = True


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "leading"
    epochs: int = 50
    batch_size: int = 10
    pipeline2_batch: int = 0
    fanout: str = "10,5"
    seed: int = 0
    precision: str = "float64"
    schedule: str = "sequential"
    self_loops: bool = False
    head_init_scale: float = 0.1
    eval_every: int = 1
    run_downstream: bool = True
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    propagation: PropagationConfig = field(default_factory=PropagationConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    downstream: DownstreamConfig = field(default_factory=DownstreamConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")
        if self.batch_size < 1 or self.epochs < 0 or self.pipeline2_batch < 0:
            raise ValueError("batch_size must be >= 1, epochs and pipeline2_batch >= 0")
        FanoutSpec.of(self.fanout)

    @property
    def fanout_spec(self) -> FanoutSpec:
        return FanoutSpec.of(self.fanout)

    @property
    def p2_batch(self) -> int:
        return self.pipeline2_batch or self.batch_size

    def to_dict(self) -> dict:
        return asdict(self)


# --
# Head, loss, optimizer

@dataclass
class HeadParams:
    Wc: np.ndarray
    bc: np.ndarray

    NAMES = ("Wc", "bc")

    @classmethod
    def init(cls, d_in: int, num_classes: int, scale: float, seed: int, dtype=np.float64):
        rng = np.random.default_rng(seed)
        W = (rng.uniform(-scale, scale, size=(d_in, num_classes)) if scale > 0
             else np.zeros((d_in, num_classes)))
        return cls(W.astype(dtype), np.zeros(num_classes, dtype))

    def tensors(self) -> dict[str, np.ndarray]:
        return {"Wc": self.Wc, "bc": self.bc}

    def logits(self, x: np.ndarray) -> np.ndarray:
        return np.einsum("ij,jk->ik", x, self.Wc) + self.bc

    def backward(self, x: np.ndarray, grad_logits: np.ndarray):
        """Returns (head grads, d loss / d x)."""
        grads = {"Wc": np.einsum("ij,ik->jk", x, grad_logits), "bc": grad_logits.sum(axis=0)}
        return grads, np.einsum("ik,jk->ij", grad_logits, self.Wc)


def cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient with respect to the logits."""
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if n == 0:
        raise ValueError("cross_entropy: empty batch")
    if labels.shape != (n,) or labels.min() < 0 or labels.max() >= k:
        raise ValueError("cross_entropy: labels must be in [0, num_classes)")
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(lse - z[rows, labels]))
    grad = np.exp(z - lse[:, None])
    grad[rows, labels] -= 1
    return loss, grad / n


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(opt: OptimizerState, params: dict[str, np.ndarray],
              grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Bias-corrected adaptive-moment update. Returns new arrays; inputs are not modified."""
    for name, g in grads.items():
        if name not in params or params[name].shape != np.shape(g):
            raise ValueError(f"adam_step: gradient {name!r} does not match its parameter")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient in tensor {name!r}")
    opt.step += 1
    b1, b2 = opt.beta1, opt.beta2
    c1 = 1 - b1 ** opt.step
    c2 = 1 - b2 ** opt.step
    out = {}
    for name, p in params.items():
        g = grads[name]
        m = b1 * opt.m.get(name, 0.0) + (1 - b1) * g
        v = b2 * opt.v.get(name, 0.0) + (1 - b2) * g * g
        opt.m[name], opt.v[name] = m, v
        out[name] = (p - opt.lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)).astype(p.dtype)
    return out


# --
# Metrics

@dataclass
class RunMetrics:
    epochs: list[dict] = field(default_factory=list)
    enc_with_grad: int = 0
    enc_no_grad: int = 0
    peak_cache_rows: int = 0
    spmm_madds: int = 0
    losses: list[float] = field(default_factory=list)
    final: dict = field(default_factory=dict)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e, sort_keys=False) + "\n" for e in self.epochs)


class TrainResult(NamedTuple):
    params: EncoderParams
    head: HeadParams
    bank: MemoryBank | None
    state: LazyState | None
    metrics: RunMetrics


# --
# Embedding generation and downstream evaluation

def generate_embeddings(params: EncoderParams, graph: TextAttributedGraph) -> np.ndarray:
    return encode(params, graph.tokens)


def propagate_full(adj: SparseAdjacency, x: np.ndarray, alpha: float, num_layers: int = 0,
                   counter: SpmmCounter | None = None) -> np.ndarray:
    """Whole-graph propagation: ``num_layers`` steps from zero, or the fixed point when 0."""
    if num_layers > 0:
        return unrolled(adj, x, alpha, num_layers, counter=counter)
    if adj.shape[0] <= 2000:
        return exact_fixed_point(adj, x, alpha).astype(x.dtype)
    return converge(adj, x, alpha, counter=counter)


def _accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    if labels.size == 0:
        return float("nan")
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def train_downstream(embeddings: np.ndarray, graph: TextAttributedGraph,
                     cfg: DownstreamConfig = DownstreamConfig(), seed: int = 0,
                     adj: SparseAdjacency | None = None) -> float:
    """APPNP-style downstream model; returns test accuracy at the best validation epoch."""
    return downstream_details(embeddings, graph, cfg, seed, adj)["test_acc"]


def downstream_details(embeddings, graph, cfg: DownstreamConfig = DownstreamConfig(), seed: int = 0,
                       adj: SparseAdjacency | None = None) -> dict:
    if adj is None:
        adj = build_normalized_adjacency(graph)
    x = propagate_full(adj, np.asarray(embeddings, dtype=np.float64), cfg.alpha, cfg.num_layers,
                       counter=SpmmCounter())
    if cfg.standardize:
        sd = x.std(axis=0)
        x = (x - x.mean(axis=0)) / np.where(sd > 0, sd, 1.0)
    tr, va, te = graph.train_ids(), graph.val_ids(), graph.test_ids()
    y = graph.labels
    head = HeadParams.init(x.shape[1], max(graph.num_classes, 2), cfg.init_scale,
                           derive_seed(seed, "downstream"))
    opt = OptimizerState(lr=cfg.lr)
    best_val, best_test, best_epoch, since = -1.0, float("nan"), 0, 0
    for epoch in range(cfg.max_epochs):
        _, gl = cross_entropy(head.logits(x[tr]), y[tr])
        grads, _ = head.backward(x[tr], gl)
        new = adam_step(opt, head.tensors(), grads)
        head = HeadParams(new["Wc"], new["bc"])
        logits = head.logits(x)
        val = _accuracy(logits[va], y[va]) if va.size else _accuracy(logits[tr], y[tr])
        if val > best_val:
            best_val, best_epoch, since = val, epoch, 0
            best_test = _accuracy(logits[te], y[te])
        else:
            since += 1
            if since >= cfg.patience:
                break
    return {"val_acc": best_val, "test_acc": best_test, "best_epoch": best_epoch}


# --
# Training loop

class _Run:
    """Mutable state of one training run."""

    def __init__(self, graph: TextAttributedGraph, cfg: TrainConfig):
        if graph.train_ids().size == 0:
            raise ValueError("graph has no labeled train nodes")
        self.graph = graph
        self.cfg = cfg
        self.dtype = np.dtype(cfg.precision)
        self.adj = build_normalized_adjacency(graph, cfg.self_loops, self.dtype)
        enc_cfg = replace(cfg.encoder, dtype=cfg.precision,
                          init_seed=derive_seed(cfg.seed, "encoder"))
        self.params = init_params(enc_cfg)
        self.num_classes = max(graph.num_classes, 2)
        self.head = HeadParams.init(enc_cfg.d_out, self.num_classes, cfg.head_init_scale,
                                    derive_seed(cfg.seed, "head"), self.dtype)
        o = cfg.optim
        self.enc_opt = OptimizerState(o.encoder_lr, o.beta1, o.beta2, o.eps)
        self.head_opt = OptimizerState(o.lr, o.beta1, o.beta2, o.eps)
        self.counter = SpmmCounter()
        self.metrics = RunMetrics()
        self.live_cache_rows = 0
        self.global_step = 0
        self.bank: MemoryBank | None = None
        self.state: LazyState | None = None
        self._count_lock = threading.Lock()
        if cfg.mode == "leading":
            self.bank = init_bank(self.params, graph)
        if cfg.mode in ("leading", "coupled"):
            self.state = LazyState.zeros(graph.num_nodes, enc_cfg.d_out, self.dtype)

    # bookkeeping

    def _cache_open(self, cache: ActivationCache):
        self.live_cache_rows += cache.rows
        self.metrics.peak_cache_rows = max(self.metrics.peak_cache_rows, self.live_cache_rows)

    def _cache_close(self, cache: ActivationCache):
        self.live_cache_rows -= cache.rows

    def _count(self, with_grad: int = 0, no_grad: int = 0):
        with self._count_lock:
            self.metrics.enc_with_grad += with_grad
            self.metrics.enc_no_grad += no_grad

    def _tokens(self, ids) -> list[list[str]]:
        return [self.graph.tokens[i] for i in ids]

    def _apply(self, enc_grads: EncoderParams | None, head_grads: dict):
        if enc_grads is not None:
            new = adam_step(self.enc_opt, self.params.tensors(), enc_grads.tensors())
            self.params = EncoderParams.from_tensors(new, self.params.activation)
        new = adam_step(self.head_opt, self.head.tensors(), head_grads)
        self.head = HeadParams(new["Wc"], new["bc"])

    def _head_loss(self, x_targets: np.ndarray, targets: np.ndarray):
        loss, gl = cross_entropy(self.head.logits(x_targets), self.graph.labels[targets])
        head_grads, g_x = self.head.backward(x_targets, gl)
        return loss, head_grads, g_x

    # one optimizer step per mode

    def refresh(self, ids: np.ndarray):
        """Pipeline 2: encode without gradients and cache."""
        params = self.params
        x = encode(params, self._tokens(ids))
        self._count(no_grad=len(ids))
        self.bank.write(ids, x, self.global_step)

    def leading_step(self, sub: SubgraphBatch) -> float:
        t = sub.num_targets
        x1, cache = encode_with_cache(self.params, self._tokens(sub.target_ids))
        self._count(with_grad=t)
        self._cache_open(cache)
        self.bank.write(sub.target_ids, x1, self.global_step)
        x_in = np.concatenate([x1, self.bank.read(sub.neighbor_ids)], axis=0)
        pcfg = self.cfg.propagation
        x_out = forward_propagate(self.state, sub, x_in, pcfg, self.counter)
        loss, head_grads, g_t = self._head_loss(x_out[:t], sub.target_ids)
        g_xl = np.zeros_like(x_out)
        g_xl[:t] = g_t
        g_targets = backward_propagate(self.state, sub, g_xl, pcfg, self.counter)
        enc_grads = backward(self.params, cache, g_targets)
        self._cache_close(cache)
        self._apply(enc_grads, head_grads)
        return loss

    def coupled_step(self, sub: SubgraphBatch) -> float:
        t = sub.num_targets
        x_in, cache = encode_with_cache(self.params, self._tokens(sub.global_ids))
        self._count(with_grad=len(sub))
        self._cache_open(cache)
        pcfg = self.cfg.propagation
        x_out = forward_propagate(self.state, sub, x_in, pcfg, self.counter)
        loss, head_grads, g_t = self._head_loss(x_out[:t], sub.target_ids)
        g_xl = np.zeros_like(x_out)
        g_xl[:t] = g_t
        g_all = backward_propagate(self.state, sub, g_xl, pcfg, self.counter, all_rows=True)
        enc_grads = backward(self.params, cache, g_all)
        self._cache_close(cache)
        self._apply(enc_grads, head_grads)
        return loss

    def cascaded_step(self, targets: np.ndarray) -> float:
        x, cache = encode_with_cache(self.params, self._tokens(targets))
        self._count(with_grad=len(targets))
        self._cache_open(cache)
        loss, head_grads, g_x = self._head_loss(x, targets)
        enc_grads = backward(self.params, cache, g_x)
        self._cache_close(cache)
        self._apply(enc_grads, head_grads)
        return loss

    # epochs

    def run(self) -> TrainResult:
        cfg = self.cfg
        train_ids = self.graph.train_ids()
        for epoch in range(cfg.epochs):
            batches = target_batches(train_ids, cfg.batch_size, cfg.seed, epoch)
            if cfg.mode == "leading":
                losses = self._leading_epoch(epoch, batches)
            else:
                losses = []
                for b, targets in enumerate(batches):
                    self.global_step += 1
                    if cfg.mode == "coupled":
                        sub = sample_subgraph(self.graph, self.adj, targets, cfg.fanout_spec,
                                              batch_seed(cfg.seed, epoch, b))
                        losses.append(self.coupled_step(sub))
                    else:
                        losses.append(self.cascaded_step(targets))
            self.metrics.losses.extend(losses)
            self._end_epoch(epoch, losses)
        self.metrics.spmm_madds = self.counter.total
        self._finish()
        return TrainResult(self.params, self.head, self.bank, self.state, self.metrics)

    def _leading_epoch(self, epoch: int, batches: list[np.ndarray]) -> list[float]:
        cfg = self.cfg
        refresh = pipeline2_batches(self.graph.num_nodes, cfg.p2_batch, cfg.seed, epoch)
        # spread the pipeline-2 sweep over this epoch's pipeline-1 iterations
        owner = [j * len(batches) // len(refresh) for j in range(len(refresh))]
        worker = None
        if cfg.schedule == "concurrent":
            worker = threading.Thread(target=lambda: [self.refresh(r) for r in refresh],
                                      name=f"pipeline2-epoch{epoch}", daemon=True)
            worker.start()
        losses = []
        for i, targets in enumerate(batches):
            self.global_step += 1
            if worker is None:
                for j in range(len(refresh)):
                    if owner[j] == i:
                        self.refresh(refresh[j])
            sub = sample_subgraph(self.graph, self.adj, targets, cfg.fanout_spec,
                                  batch_seed(cfg.seed, epoch, i))
            losses.append(self.leading_step(sub))
        if worker is not None:
            worker.join()
        return losses

    def evaluate(self) -> dict:
        emb = generate_embeddings(self.params, self.graph)
        if self.cfg.mode == "cascaded":
            x = emb
        else:
            p = self.cfg.propagation
            x = propagate_full(self.adj, emb, p.alpha, 0 if p.warm_start else p.num_layers,
                               counter=SpmmCounter())
        logits = self.head.logits(x)
        y = self.graph.labels
        va, te = self.graph.val_ids(), self.graph.test_ids()
        return {"val_acc": _accuracy(logits[va], y[va]), "test_acc": _accuracy(logits[te], y[te])}

    def _end_epoch(self, epoch: int, losses: list[float]):
        rec = {"epoch": epoch, "loss": float(np.mean(losses)) if losses else float("nan")}
        if self.cfg.eval_every and (epoch + 1) % self.cfg.eval_every == 0:
            rec.update(self.evaluate())
        else:
            rec.update({"val_acc": None, "test_acc": None})
        m = self.metrics
        rec.update({"enc_with_grad": m.enc_with_grad, "enc_no_grad": m.enc_no_grad,
                    "peak_cache_rows": m.peak_cache_rows, "spmm_madds": self.counter.total})
        m.epochs.append(rec)
        log.info("epoch %d loss %.4f val %s", epoch, rec["loss"], rec["val_acc"])

    def _finish(self):
        final = {"mode": self.cfg.mode, "steps": self.global_step}
        final.update({f"head_{k}": v for k, v in self.evaluate().items()})
        if self.cfg.run_downstream:
            d = downstream_details(generate_embeddings(self.params, self.graph), self.graph,
                                   self.cfg.downstream, self.cfg.seed,
                                   build_normalized_adjacency(self.graph, self.cfg.self_loops))
            final.update({"val_acc": d["val_acc"], "test_acc": d["test_acc"]})
        if self.cfg.mode == "leading":
            final["bank_write"] = BANK_WRITE_NOTE
        self.metrics.final = final


def _train(graph: TextAttributedGraph, cfg: TrainConfig, mode: str) -> TrainResult:
    if cfg.mode != mode:
        cfg = replace(cfg, mode=mode)
    return _Run(graph, cfg).run()


def train_leading(graph: TextAttributedGraph, cfg: TrainConfig = TrainConfig()) -> TrainResult:
    return _train(graph, cfg, "leading")


def train_coupled(graph: TextAttributedGraph, cfg: TrainConfig = TrainConfig()) -> TrainResult:
    return _train(graph, cfg, "coupled")


def train_cascaded(graph: TextAttributedGraph, cfg: TrainConfig = TrainConfig()) -> TrainResult:
    return _train(graph, cfg, "cascaded")


def train(graph: TextAttributedGraph, cfg: TrainConfig) -> TrainResult:
    return _train(graph, cfg, cfg.mode)


# --
# Full-batch objective used by the end-to-end gradient check

def full_batch_objective(graph: TextAttributedGraph, head: HeadParams, cfg: PropagationConfig,
                         adj: SparseAdjacency | None = None, targets=None):
    """Loss closure over the encoder output of *all* nodes (in node order).

    Propagation starts from zero memories on every call, so the returned gradient is the
    exact gradient of the L-step model.
    """
    if adj is None:
        adj = build_normalized_adjacency(graph)
    targets = graph.train_ids() if targets is None else np.asarray(targets)
    rest = np.setdiff1d(np.arange(graph.num_nodes), targets)
    order = np.concatenate([targets, rest])
    batch = full_graph_batch(adj, order, len(targets))
    inverse = np.argsort(order)
    zero_cfg = replace(cfg, warm_start=False)
    t = len(targets)

    def closure(out: np.ndarray):
        x_in = out[order]
        state = LazyState.zeros(graph.num_nodes, out.shape[1], out.dtype)
        x_l = forward_propagate(state, batch, x_in, zero_cfg, SpmmCounter())
        loss, gl = cross_entropy(head.logits(x_l[:t]), graph.labels[targets])
        _, g_t = head.backward(x_l[:t], gl)
        g_xl = np.zeros_like(x_l)
        g_xl[:t] = g_t
        g0 = backward_propagate(state, batch, g_xl, zero_cfg, SpmmCounter(), all_rows=True)
        return loss, g0[inverse]

    return closure
