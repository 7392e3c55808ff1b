"""Combining expert adapters: Average, TIES, Static and the input-aware router.

All weighted strategies share one code path. For each adapted projection
the experts' A factors are concatenated column-wise and their B factors
row-wise, so that

    sum_e w_e * (s/r) * x A_e B_e  ==  (s/r) * ((x A_cat) * repeat(w, r)) B_cat

and the per-expert weights only change how the rank blocks are scaled.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .backbone import (BackboneWeights, FrozenError, Vocab, batch_loss, forward,
                       length_batches, mean_loss, serialize_session, tensors_hash)
from .lora import EXPERT_ORDER, ExpertKind, LoraAdapter, build_examples, derive_seed
from .numerics import Tensor

log = logging.getLogger(__name__)

STRATEGIES = ("average", "ties", "static", "dynamic")
DEFAULT_LR_GRID = (1e-4, 1e-3, 1e-2)


class StrategyError(ValueError):
    pass


@dataclass
class ExpertSet:
    adapters: dict[ExpertKind, LoraAdapter]

    def __post_init__(self):
        self.adapters = {ExpertKind(k): v for k, v in self.adapters.items()}
        if ExpertKind.MERGED in self.adapters:
            raise StrategyError("the merged-knowledge baseline never joins the expert set")
        missing = [k.value for k in EXPERT_ORDER if k not in self.adapters]
        if missing:
            raise StrategyError(f"expert set is missing {missing}")
        first = self.ordered[0]
        for a in self.ordered[1:]:
            if (a.rank, a.scale, a.keys) != (first.rank, first.scale, first.keys):
                raise StrategyError("experts differ in rank, scale or adapted projections")
            for key in first.keys:
                if a.A[key].shape != first.A[key].shape or a.B[key].shape != first.B[key].shape:
                    raise StrategyError(f"experts disagree on shapes at {key}")

    @property
    def ordered(self) -> list[LoraAdapter]:
        return [self.adapters[k] for k in EXPERT_ORDER]

    @property
    def K(self) -> int:
        return len(EXPERT_ORDER)

    @property
    def keys(self):
        return self.ordered[0].keys

    @property
    def rank(self) -> int:
        return self.ordered[0].rank

    @property
    def multiplier(self) -> float:
        return self.ordered[0].multiplier

    def checksums(self) -> dict[str, str]:
        return {k.value: self.adapters[k].checksum() for k in EXPERT_ORDER}

    def verify_frozen(self) -> None:
        for k, a in self.adapters.items():
            if a.trainable:
                raise FrozenError(f"expert {k.value} is not frozen")


class _Stack:
    """Concatenated expert factors for the weighted strategies."""

    def __init__(self, experts: ExpertSet):
        self.K = experts.K
        self.rank = experts.rank
        self.multiplier = experts.multiplier
        self.A = {k: Tensor(np.concatenate([a.A[k].data for a in experts.ordered], axis=1))
                  for k in experts.keys}
        self.B = {k: Tensor(np.concatenate([a.B[k].data for a in experts.ordered], axis=0))
                  for k in experts.keys}
        dt = next(iter(self.A.values())).dtype
        self.expand = np.kron(np.eye(self.K, dtype=dt), np.ones((1, self.rank), dtype=dt))

    def delta(self, layer: int, name: str, x: Tensor, w: Tensor) -> Tensor | None:
        key = (layer, name)
        if key not in self.A:
            return None
        xa = nx.matmul(x, self.A[key])
        wr = nx.matmul(w, self.expand)  # [B|1, K*r]
        wr = wr.reshape(wr.shape[0], 1, wr.shape[1])
        out = nx.matmul(nx.mul(xa, wr), self.B[key])
        m = self.multiplier
        return out if m == 1.0 else nx.mul(out, m)


class AverageFusion:
    name = "average"

    def __init__(self, experts: ExpertSet):
        self.stack = _Stack(experts)
        dt = self.stack.expand.dtype
        self.w = Tensor(np.full((1, self.stack.K), 1.0 / self.stack.K, dtype=dt))

    def layer_context(self, layer, h, pool):
        return self.w

    def delta(self, layer, name, x, ctx):
        return self.stack.delta(layer, name, x, ctx)


@dataclass
class StaticCoeffs:
    gamma: Tensor  # [L, K]

    @classmethod
    def init(cls, layers: int, K: int = 3, dtype=np.float32) -> "StaticCoeffs":
        return cls(Tensor(np.full((layers, K), 1.0 / K, dtype=dtype), requires_grad=True))

    def parameters(self) -> list[Tensor]:
        return [self.gamma]

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {"gamma": self.gamma.data}

    def checksum(self) -> str:
        return tensors_hash(self.named_arrays())


class StaticFusion:
    name = "static"

    def __init__(self, experts: ExpertSet, coeffs: StaticCoeffs):
        self.stack = _Stack(experts)
        self.coeffs = coeffs

    def layer_context(self, layer, h, pool):
        return nx.getitem(self.coeffs.gamma, slice(layer, layer + 1))

    def delta(self, layer, name, x, ctx):
        return self.stack.delta(layer, name, x, ctx)


@dataclass
class RouterParams:
    W: Tensor  # [L, d, K]
    b: Tensor  # [L, K]

    @classmethod
    def zeros(cls, layers: int, d_model: int, K: int = 3, dtype=np.float32) -> "RouterParams":
        return cls(Tensor(np.zeros((layers, d_model, K), dtype=dtype), requires_grad=True),
                   Tensor(np.zeros((layers, K), dtype=dtype), requires_grad=True))

    @property
    def K(self) -> int:
        return self.b.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.W, self.b]

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {"W": self.W.data, "b": self.b.data}

    def checksum(self) -> str:
        return tensors_hash(self.named_arrays())


def route_weights(H_prev: Tensor, prompt_length: int, router: RouterParams, layer: int) -> Tensor:
    """α = softmax(W z + b), z = mean of the first ``prompt_length`` rows of ``H_prev`` [T, d]."""
    if prompt_length < 1:
        raise ValueError("prompt length must be at least 1")
    T = H_prev.shape[0]
    pool = np.zeros((1, T), dtype=H_prev.dtype)
    pool[0, :min(prompt_length, T)] = 1.0 / min(prompt_length, T)
    z = nx.matmul(Tensor(pool), H_prev)  # [1, d]
    W = nx.getitem(router.W, layer)
    b = nx.getitem(router.b, slice(layer, layer + 1))
    return nx.softmax_rows(nx.add(nx.matmul(z, W), b)).reshape(router.K)


@dataclass
class RouteTrace:
    session_id: int
    z: list[np.ndarray] = field(default_factory=list)
    alpha: list[np.ndarray] = field(default_factory=list)

    def rows(self) -> list[tuple[int, float, float, float]]:
        return [(l, *(float(x) for x in a)) for l, a in enumerate(self.alpha)]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["layer", "alpha_base", "alpha_high", "alpha_fine"])
            for row in self.rows():
                w.writerow([row[0]] + [repr(x) for x in row[1:]])


class DynamicFusion:
    name = "dynamic"

    def __init__(self, experts: ExpertSet, router: RouterParams, record: bool = False):
        if router.K != experts.K:
            raise StrategyError(f"router has {router.K} outputs for {experts.K} experts")
        self.stack = _Stack(experts)
        self.router = router
        self.record = record
        self.records: list[tuple[np.ndarray, np.ndarray]] = []

    def layer_context(self, layer, h, pool):
        B, T, d = h.shape
        z = nx.matmul(Tensor(pool[:, None, :]), h).reshape(B, d)
        W = nx.getitem(self.router.W, layer)
        b = nx.getitem(self.router.b, slice(layer, layer + 1))
        alpha = nx.softmax_rows(nx.add(nx.matmul(z, W), b))
        if self.record:
            self.records.append((z.data.copy(), alpha.data.copy()))
        return alpha

    def delta(self, layer, name, x, ctx):
        return self.stack.delta(layer, name, x, ctx)


class TiesFusion:
    name = "ties"

    def __init__(self, merged: dict[tuple[int, str], np.ndarray]):
        self.merged = {k: Tensor(v) for k, v in merged.items()}

    def layer_context(self, layer, h, pool):
        return None

    def delta(self, layer, name, x, ctx):
        w = self.merged.get((layer, name))
        return None if w is None else nx.matmul(x, w)


# ---------------------------------------------------------------- TIES


@dataclass
class TiesConfig:
    density: float = 0.2

    def __post_init__(self):
        if not 0.0 < self.density <= 1.0:
            raise ValueError("density must be in (0, 1]")


def ties_merge_arrays(deltas: Sequence[np.ndarray], config: TiesConfig) -> np.ndarray:
    """Trim, elect sign (ties positive), disjoint mean, for one parameter matrix."""
    shape = deltas[0].shape
    for d in deltas:
        if d.shape != shape:
            raise nx.DimensionError(f"TIES shape mismatch: {shape} vs {d.shape}")
    stacked = np.stack([np.asarray(d) for d in deltas])  # [K, ...]
    K = stacked.shape[0]
    flat = stacked.reshape(K, -1)
    n = flat.shape[1]
    keep = math.ceil(config.density * n)
    trimmed = np.zeros_like(flat)
    for e in range(K):
        if keep >= n:
            trimmed[e] = flat[e]
        else:
            top = np.argsort(-np.abs(flat[e]), kind="stable")[:keep]
            trimmed[e, top] = flat[e, top]
    elected = np.where(trimmed.sum(axis=0) >= 0, 1.0, -1.0)
    agree = (np.sign(trimmed) == elected) & (trimmed != 0)
    count = agree.sum(axis=0)
    total = np.where(agree, trimmed, 0).sum(axis=0)
    merged = np.where(count > 0, total / np.maximum(count, 1), 0).astype(flat.dtype)
    return merged.reshape(shape)


def ties_merge(expert_deltas: Sequence[dict], config: TiesConfig | None = None) -> dict:
    """Merge K per-projection dense deltas."""
    config = config or TiesConfig()
    keys = sorted(expert_deltas[0])
    for d in expert_deltas[1:]:
        if sorted(d) != keys:
            raise nx.DimensionError("experts adapt different projections")
    return {k: ties_merge_arrays([d[k] for d in expert_deltas], config) for k in keys}


def dense_deltas(adapter: LoraAdapter) -> dict:
    return {k: adapter.dense_delta(k) for k in adapter.keys}


def average_merge(experts: ExpertSet) -> dict:
    """Mean of dense deltas; equivalent to averaging expert outputs."""
    per = [dense_deltas(a) for a in experts.ordered]
    return {k: np.mean(np.stack([d[k] for d in per]), axis=0) for k in per[0]}


def merge_experts(experts: ExpertSet, strategy: str = "ties", density: float = 0.2) -> dict:
    if strategy == "average":
        return average_merge(experts)
    if strategy == "ties":
        return ties_merge([dense_deltas(a) for a in experts.ordered], TiesConfig(density))
    raise StrategyError(f"unknown merge strategy {strategy!r}")


# ---------------------------------------------------------------- building mixes


def make_fusion(strategy: str, experts: ExpertSet | None = None, router: RouterParams | None = None,
                coeffs: StaticCoeffs | None = None, merged: dict | None = None, record: bool = False):
    if strategy == "average":
        if experts is None:
            raise StrategyError("average fusion needs the expert set")
        return AverageFusion(experts)
    if strategy == "static":
        if experts is None or coeffs is None:
            raise StrategyError("static fusion needs experts and learned coefficients")
        return StaticFusion(experts, coeffs)
    if strategy == "dynamic":
        if experts is None or router is None:
            raise StrategyError("dynamic fusion needs experts and a router")
        return DynamicFusion(experts, router, record)
    if strategy == "ties":
        if merged is None:
            raise StrategyError("ties fusion needs a pre-merged delta")
        return TiesFusion(merged)
    raise StrategyError(f"unknown strategy {strategy!r}")


def fused_forward(tokens, backbone: BackboneWeights, mix, prompt_lengths=None):
    return forward(tokens, backbone, mix, prompt_lengths)


# ---------------------------------------------------------------- fusion training


@dataclass
class FusionTrainConfig:
    epochs: int = 1
    batch_size: int = 8
    lr_grid: tuple[float, ...] = DEFAULT_LR_GRID
    p_max: int = 6

    @classmethod
    def from_dict(cls, d: dict) -> "FusionTrainConfig":
        d = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        if "lr_grid" in d:
            d["lr_grid"] = tuple(float(x) for x in d["lr_grid"])
        return cls(**d)


@dataclass
class FusionTrainResult:
    params: object  # RouterParams | StaticCoeffs
    lr: float
    val_losses: dict[float, float]
    initial_val_loss: float
    hashes_before: dict[str, str]
    hashes_after: dict[str, str]


def frozen_hashes(backbone: BackboneWeights, experts: ExpertSet) -> dict[str, str]:
    out = {"backbone": backbone.content_hash()}
    out.update({f"expert_{k}": v for k, v in experts.checksums().items()})
    return out


def select_lr(val_losses: dict[float, float]) -> float:
    """Lowest validation loss; ties go to the smaller learning rate."""
    best = None
    for lr in sorted(val_losses):
        if best is None or val_losses[lr] < val_losses[best]:
            best = lr
    return best


def _train_fusion(mode: str, train_sessions, val_sessions, backbone: BackboneWeights,
                  experts: ExpertSet, vocab: Vocab, hp: FusionTrainConfig, seed: int,
                  log_every: int = 0) -> FusionTrainResult:
    if not backbone.frozen:
        raise FrozenError("fusion training requires a frozen backbone")
    backbone.verify_frozen()
    experts.verify_frozen()
    before = frozen_hashes(backbone, experts)
    train = build_examples(train_sessions, "raw", vocab, p_max=hp.p_max)
    val = build_examples(val_sessions, "raw", vocab, p_max=hp.p_max)
    cfg = backbone.config
    dt = cfg.np_dtype

    def fresh():
        if mode == "dynamic":
            return RouterParams.zeros(cfg.layers, cfg.d_model, experts.K, dt)
        return StaticCoeffs.init(cfg.layers, experts.K, dt)

    def mix_for(p):
        return DynamicFusion(experts, p) if mode == "dynamic" else StaticFusion(experts, p)

    init_loss = mean_loss(val, backbone, mix_for(fresh()))
    results = {}
    losses = {}
    fseed = derive_seed(seed, f"fusion-{mode}")
    for lr in hp.lr_grid:
        p = fresh()
        params = p.parameters()
        state = nx.AdamState.for_params(params, lr=lr)
        rng = np.random.default_rng([fseed, 1])
        mix = mix_for(p)
        for epoch in range(hp.epochs):
            for step, idx in enumerate(length_batches(len(train), hp.batch_size, rng)):
                loss = batch_loss([train[i] for i in idx], backbone, mix)
                nx.zero_grad(params)
                nx.backward(loss)
                nx.adam_step(params, [q.grad for q in params], state)
                if log_every and step % log_every == 0:
                    log.info("%s lr=%g epoch %d step %d loss %.4f", mode, lr, epoch, step, float(loss.data))
        nx.zero_grad(params)
        for q in params:
            q.requires_grad = False
        losses[lr] = mean_loss(val, backbone, mix_for(p))
        results[lr] = p
        log.info("%s lr=%g val loss %.5f", mode, lr, losses[lr])
    after = frozen_hashes(backbone, experts)
    if after != before:
        changed = [k for k in before if before[k] != after[k]]
        raise FrozenError(f"frozen parameters changed during fusion training: {changed}")
    lr = select_lr(losses)
    return FusionTrainResult(results[lr], lr, losses, init_loss, before, after)


def train_router(train_sessions, val_sessions, backbone, experts, vocab,
                 hp: FusionTrainConfig | None = None, seed: int = 0, log_every: int = 0) -> FusionTrainResult:
    return _train_fusion("dynamic", train_sessions, val_sessions, backbone, experts, vocab,
                         hp or FusionTrainConfig(), seed, log_every)


def train_static(train_sessions, val_sessions, backbone, experts, vocab,
                 hp: FusionTrainConfig | None = None, seed: int = 0, log_every: int = 0) -> FusionTrainResult:
    return _train_fusion("static", train_sessions, val_sessions, backbone, experts, vocab,
                         hp or FusionTrainConfig(), seed, log_every)


def fusion_eval_loss(sessions, backbone, mix, vocab, p_max: int = 6) -> float:
    return mean_loss(build_examples(sessions, "raw", vocab, p_max=p_max), backbone, mix)


def route_trace(session, backbone: BackboneWeights, experts: ExpertSet, router: RouterParams,
                vocab: Vocab) -> RouteTrace:
    """Per-layer routing weights for one session's raw prompt."""
    prompt = serialize_session(session, "raw", vocab)
    mix = DynamicFusion(experts, router, record=True)
    with nx.no_grad():
        forward([prompt.tokens], backbone, mix, [prompt.prompt_length])
    trace = RouteTrace(session.session_id)
    for z, a in mix.records:
        trace.z.append(z[0])
        trace.alpha.append(a[0])
    return trace


def write_traces_csv(traces: Sequence[RouteTrace], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["session_id", "layer", "alpha_base", "alpha_high", "alpha_fine"])
        for t in traces:
            for row in t.rows():
                w.writerow([t.session_id, row[0]] + [repr(x) for x in row[1:]])
