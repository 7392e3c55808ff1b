"""Low-rank adapters and knowledge-specific expert training."""

from __future__ import annotations

import enum
import logging
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .backbone import (DEFAULT_P_MAX, PROJECTIONS, BackboneWeights, Example, FrozenError,
                       ModelConfig, Vocab, batch_loss, length_batches, mean_loss,
                       serialize_session, target_permutations, tensors_hash)
from .numerics import Tensor

log = logging.getLogger(__name__)


class ExpertKind(str, enum.Enum):
    BASE = "base"
    HIGH = "high"
    FINE = "fine"
    MERGED = "merged"

    @property
    def variant(self) -> str:
        return {"base": "raw", "high": "high", "fine": "fine", "merged": "merged"}[self.value]


# fusion order of the expert set; MERGED is a baseline and never fused
EXPERT_ORDER = (ExpertKind.BASE, ExpertKind.HIGH, ExpertKind.FINE)


@dataclass
class LoraAdapter:
    rank: int
    scale: float
    A: dict[tuple[int, str], Tensor]
    B: dict[tuple[int, str], Tensor]
    kind: str = ""

    @property
    def multiplier(self) -> float:
        return self.scale / self.rank

    @property
    def keys(self) -> list[tuple[int, str]]:
        return sorted(self.A)

    def parameters(self) -> list[Tensor]:
        return [t for k in self.keys for t in (self.A[k], self.B[k])]

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for l, name in self.keys:
            out[f"l{l}.{name}.A"] = self.A[(l, name)].data
            out[f"l{l}.{name}.B"] = self.B[(l, name)].data
        return out

    def checksum(self) -> str:
        return tensors_hash(self.named_arrays())

    def dense_delta(self, key) -> np.ndarray:
        """(s/r)·A·B for one adapted projection."""
        return (self.A[key].data @ self.B[key].data) * self.A[key].dtype.type(self.multiplier)

    def freeze(self) -> None:
        for t in self.parameters():
            t.requires_grad = False

    @property
    def trainable(self) -> bool:
        return any(t.requires_grad for t in self.parameters())

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], rank: int, scale: float, kind: str = ""):
        A, B = {}, {}
        for name, arr in arrays.items():
            layer, proj, which = name.split(".")
            key = (int(layer[1:]), proj)
            (A if which == "A" else B)[key] = Tensor(arr.copy())
        return cls(rank, scale, A, B, kind)


def derive_seed(global_seed: int, label: str) -> int:
    return int(np.random.SeedSequence([global_seed, zlib.crc32(label.encode())]).generate_state(1)[0])


def init_adapter(config: ModelConfig, seed: int, rank: int = 16, scale: float = 16.0,
                 projections=PROJECTIONS, layers=None, kind: str = "") -> LoraAdapter:
    """Gaussian A (std 0.02), zero B, on every requested projection."""
    if rank < 1:
        raise ValueError("rank must be at least 1")
    layers = range(config.layers) if layers is None else layers
    rng = np.random.default_rng(seed)
    dt = config.np_dtype
    A, B = {}, {}
    for l in layers:
        for name in projections:
            d_in, d_out = config.proj_shape(name)
            if rank >= min(d_in, d_out):
                raise ValueError(f"rank {rank} is not low-rank for a {d_in}x{d_out} projection")
            A[(l, name)] = Tensor(rng.normal(0.0, 0.02, size=(d_in, rank)).astype(dt), requires_grad=True)
            B[(l, name)] = Tensor(np.zeros((rank, d_out), dtype=dt), requires_grad=True)
    return LoraAdapter(rank, float(scale), A, B, kind)


def lora_delta(H: Tensor, adapter: LoraAdapter, layer: int, name: str = "q") -> Tensor:
    key = (layer, name)
    if key not in adapter.A:
        raise KeyError(f"projection {key} is not adapted")
    A, B = adapter.A[key], adapter.B[key]
    if H.shape[-1] != A.shape[0]:
        raise nx.DimensionError(f"input width {H.shape[-1]} does not match adapter {A.shape}")
    out = nx.matmul(nx.matmul(H, A), B)
    m = adapter.multiplier
    return out if m == 1.0 else nx.mul(out, m)


class SingleAdapter:
    """Forward hook applying one adapter at full weight."""

    def __init__(self, adapter: LoraAdapter):
        self.adapter = adapter

    def layer_context(self, layer, h, pool):
        return None

    def delta(self, layer, name, x, ctx):
        if (layer, name) not in self.adapter.A:
            return None
        return lora_delta(x, self.adapter, layer, name)


# ---------------------------------------------------------------- data


def session_prompt(session, variant: str, vocab: Vocab, knowledge=None):
    rules = knowledge.rules() if variant in ("high", "merged") else None
    reasoning = knowledge.reasoning(session.session_id) if variant in ("fine", "merged") else None
    return serialize_session(session, variant, vocab, rules, reasoning)


def build_examples(sessions, variant: str, vocab: Vocab, knowledge=None,
                   p_max: int = DEFAULT_P_MAX, all_permutations: bool = True) -> list[Example]:
    """One example per (session, bundle permutation)."""
    if variant != "raw" and knowledge is None:
        raise ValueError(f"variant {variant!r} needs a knowledge store")
    out = []
    for s in sessions:
        prompt = session_prompt(s, variant, vocab, knowledge)
        targets = target_permutations(s.bundles, vocab, p_max)
        if not all_permutations:
            targets = targets[:1]
        out += [Example.from_parts(prompt, t, s.session_id) for t in targets]
    return out


@dataclass
class TrainConfig:
    epochs: int = 3
    lr: float = 2e-4
    batch_size: int = 8
    rank: int = 16
    scale: float = 16.0
    p_max: int = DEFAULT_P_MAX

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class TrainResult:
    adapter: LoraAdapter
    history: list[float] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)
    backbone_hash: str = ""


def _check_knowledge(kind: ExpertKind, knowledge) -> None:
    if kind == ExpertKind.BASE:
        return
    if knowledge is None:
        raise ValueError(f"{kind.value} expert needs distilled knowledge")
    if kind in (ExpertKind.HIGH, ExpertKind.MERGED) and not knowledge.has_high:
        raise ValueError(f"{kind.value} expert needs high-level rules")
    if kind in (ExpertKind.FINE, ExpertKind.MERGED) and not knowledge.fine_grained:
        raise ValueError(f"{kind.value} expert needs fine-grained reasoning")


def train_expert(kind, train_sessions, knowledge, backbone: BackboneWeights, vocab: Vocab,
                 hp: TrainConfig | None = None, seed: int = 0, log_every: int = 0) -> TrainResult:
    """Fit one adapter on its own input variant; loss on target tokens only."""
    kind = ExpertKind(kind)
    hp = hp or TrainConfig()
    if not backbone.frozen:
        raise FrozenError("expert training requires a frozen backbone")
    backbone.verify_frozen()
    _check_knowledge(kind, knowledge)
    examples = build_examples(train_sessions, kind.variant, vocab,
                              None if kind == ExpertKind.BASE else knowledge, hp.p_max)
    if not examples:
        raise ValueError("empty training split")
    eseed = derive_seed(seed, kind.value)
    adapter = init_adapter(backbone.config, eseed, hp.rank, hp.scale, kind=kind.value)
    params = adapter.parameters()
    state = nx.AdamState.for_params(params, lr=hp.lr)
    rng = np.random.default_rng([eseed, 1])
    mix = SingleAdapter(adapter)
    history, epoch_losses = [], []
    for epoch in range(hp.epochs):
        losses = []
        for step, idx in enumerate(length_batches(len(examples), hp.batch_size, rng)):
            loss = batch_loss([examples[i] for i in idx], backbone, mix)
            nx.zero_grad(params)
            nx.backward(loss)
            nx.adam_step(params, [p.grad for p in params], state)
            losses.append(float(loss.data))
            if log_every and step % log_every == 0:
                log.info("%s epoch %d step %d loss %.4f", kind.value, epoch, step, losses[-1])
        history += losses
        epoch_losses.append(float(np.mean(losses)))
    nx.zero_grad(params)
    backbone.verify_frozen()
    adapter.freeze()
    return TrainResult(adapter, history, epoch_losses, backbone.content_hash())


def expert_eval_loss(adapter: LoraAdapter | None, kind, sessions, knowledge,
                     backbone: BackboneWeights, vocab: Vocab, p_max: int = DEFAULT_P_MAX) -> float:
    kind = ExpertKind(kind)
    if not sessions:
        raise ValueError("empty split")
    _check_knowledge(kind, knowledge)
    examples = build_examples(sessions, kind.variant, vocab,
                              None if kind == ExpertKind.BASE else knowledge, p_max)
    mix = SingleAdapter(adapter) if adapter is not None else None
    return mean_loss(examples, backbone, mix)
