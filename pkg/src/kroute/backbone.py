"""Symbolic vocabulary, session/bundle serializers and the frozen decoder.

The decoder is a small pre-norm transformer (RMSNorm gains, no biases,
learned absolute positions, output head tied to the token embedding).
Every linear projection goes through ``_proj`` so that adapters can add
their low-rank updates on top of the frozen weight.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from . import numerics as nx
from .numerics import Tensor

PAD, BOS, EOS, SEP, B_OPEN, B_CLOSE, KH, KF = range(8)
RESERVED = ("PAD", "BOS", "EOS", "SEP", "B_OPEN", "B_CLOSE", "KH", "KF")
VARIANTS = ("raw", "high", "fine", "merged")
PROJECTIONS = ("q", "k", "v", "o", "ff_in", "ff_out")
DEFAULT_P_MAX = 6


class VocabError(KeyError):
    pass


class ContextLengthError(ValueError):
    pass


class FrozenError(RuntimeError):
    pass


# ---------------------------------------------------------------- vocabulary


@dataclass
class Vocab:
    tokens: list[str]
    token_to_id: dict[str, int] = field(init=False)

    def __post_init__(self):
        self.token_to_id = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        try:
            return self.token_to_id[token]
        except KeyError:
            raise VocabError(f"unknown token {token!r}") from None

    def ids(self, tokens: Sequence[str]) -> list[int]:
        return [self.id(t) for t in tokens]

    def item(self, item_id: int) -> int:
        return self.id(f"ITEM_{item_id}")

    def cat(self, category: int) -> int:
        return self.id(f"CAT_{category}")

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def item_of(self, token_id: int) -> int | None:
        tok = self.tokens[token_id]
        return int(tok[5:]) if tok.startswith("ITEM_") else None

    def to_json(self) -> str:
        return json.dumps(self.token_to_id, indent=0)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "Vocab":
        mapping = json.loads(Path(path).read_text())
        tokens = [None] * len(mapping)
        for tok, i in mapping.items():
            tokens[i] = tok
        if any(t is None for t in tokens):
            raise ValueError("vocabulary ids are not dense")
        return cls(tokens)


def build_vocab(n_items: int, n_categories: int, n_intents: int, n_rules: int,
                max_size: int | None = None) -> Vocab:
    tokens = list(RESERVED)
    tokens += [f"CAT_{c}" for c in range(n_categories)]
    tokens += [f"INTENT_{k}" for k in range(n_intents)]
    tokens += [f"RULE_{j}" for j in range(n_rules)]
    tokens += [f"ITEM_{i}" for i in range(n_items)]
    if max_size is not None and len(tokens) > max_size:
        raise ValueError(f"vocabulary of {len(tokens)} tokens exceeds ceiling {max_size}")
    return Vocab(tokens)


def vocab_for_world(world, max_size: int | None = None) -> Vocab:
    cfg = world.config
    return build_vocab(cfg.n_items, cfg.n_categories, cfg.n_intents, world.n_rules, max_size)


# ---------------------------------------------------------------- serializers


@dataclass
class SerializedInput:
    tokens: list[int]
    prompt_length: int
    variant: str


@dataclass
class TargetSequence:
    tokens: list[int]
    permutation_index: int


def serialize_session(session, variant: str, vocab: Vocab,
                      rules: Sequence[str] | None = None,
                      reasoning: Sequence[str] | None = None) -> SerializedInput:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    need_rules = variant in ("high", "merged")
    need_reasoning = variant in ("fine", "merged")
    if need_rules != (rules is not None) or need_reasoning != (reasoning is not None):
        raise ValueError(f"variant {variant!r} got mismatched knowledge "
                         f"(rules={rules is not None}, reasoning={reasoning is not None})")
    toks = [BOS]
    if need_rules:
        toks += [KH] + vocab.ids(rules)
    if need_reasoning:
        toks += [KF] + vocab.ids(reasoning)
    if variant != "raw":
        toks.append(SEP)
    for it in session.items:
        toks += [vocab.item(it.id), vocab.cat(it.category)]
    toks.append(SEP)
    return SerializedInput(toks, len(toks), variant)


def n_permutations(n_bundles: int, p_max: int = DEFAULT_P_MAX) -> int:
    return min(math.factorial(n_bundles), p_max)


def canonical_bundles(bundles) -> list[list[int]]:
    return sorted(sorted(int(i) for i in b) for b in bundles)


def serialize_bundles(bundles, permutation_index: int, vocab: Vocab,
                      p_max: int = DEFAULT_P_MAX) -> TargetSequence:
    for b in bundles:
        if len(b) < 2:
            raise ValueError("a bundle is a subset of at least two items")
    canon = canonical_bundles(bundles)
    limit = n_permutations(len(canon), p_max)
    if not 0 <= permutation_index < limit:
        raise ValueError(f"permutation index {permutation_index} outside [0, {limit})")
    order = next(itertools.islice(itertools.permutations(range(len(canon))),
                                  permutation_index, None))
    toks = []
    for j in order:
        toks.append(B_OPEN)
        toks += [vocab.item(i) for i in canon[j]]
        toks.append(B_CLOSE)
    toks.append(EOS)
    return TargetSequence(toks, permutation_index)


def target_permutations(bundles, vocab: Vocab, p_max: int = DEFAULT_P_MAX) -> list[TargetSequence]:
    return [serialize_bundles(bundles, p, vocab, p_max)
            for p in range(n_permutations(len(bundles), p_max))]


# ---------------------------------------------------------------- model


@dataclass
class ModelConfig:
    layers: int = 4
    d_model: int = 128
    heads: int = 4
    d_ff: int = 256
    max_len: int = 256
    vocab_size: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def proj_shape(self, name: str) -> tuple[int, int]:
        if name == "ff_in":
            return self.d_model, self.d_ff
        if name == "ff_out":
            return self.d_ff, self.d_model
        return self.d_model, self.d_model

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class BackboneWeights:
    config: ModelConfig
    params: dict[str, Tensor]
    frozen: bool = False
    frozen_hash: str | None = None

    def names(self) -> list[str]:
        return sorted(self.params)

    def tensors(self) -> list[Tensor]:
        return [self.params[n] for n in self.names()]

    def content_hash(self) -> str:
        return tensors_hash({n: self.params[n].data for n in self.names()})

    def freeze(self) -> None:
        for t in self.params.values():
            t.requires_grad = False
        self.frozen = True
        self.frozen_hash = self.content_hash()

    def verify_frozen(self) -> None:
        if not self.frozen:
            raise FrozenError("backbone is not frozen")
        if self.content_hash() != self.frozen_hash:
            raise FrozenError("frozen backbone weights changed")

    def astype(self, dtype) -> "BackboneWeights":
        cfg = ModelConfig(**{**asdict(self.config), "dtype": np.dtype(dtype).name})
        out = BackboneWeights(cfg, {n: Tensor(t.data.astype(dtype)) for n, t in self.params.items()})
        if self.frozen:
            out.freeze()
        return out


def tensors_hash(arrays: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        h.update(name.encode())
        h.update(str(a.shape).encode())
        h.update(str(a.dtype).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def init_backbone(config: ModelConfig, seed: int) -> BackboneWeights:
    rng = np.random.default_rng([seed, 7])
    dt = config.np_dtype
    d = config.d_model
    std = 0.02
    resid_std = std / math.sqrt(2 * config.layers)

    def normal(shape, s=std):
        return Tensor(rng.normal(0.0, s, size=shape).astype(dt), requires_grad=True)

    params = {
        "tok_emb": normal((config.vocab_size, d)),
        "pos_emb": normal((config.max_len, d)),
        "final_norm": Tensor(np.ones(d, dtype=dt), requires_grad=True),
    }
    for l in range(config.layers):
        params[f"l{l}.norm1"] = Tensor(np.ones(d, dtype=dt), requires_grad=True)
        params[f"l{l}.norm2"] = Tensor(np.ones(d, dtype=dt), requires_grad=True)
        for name in PROJECTIONS:
            s = resid_std if name in ("o", "ff_out") else std
            params[f"l{l}.{name}"] = normal(config.proj_shape(name), s)
    return BackboneWeights(config, params)


class AdapterMix(Protocol):
    """What ``forward`` needs from an adapter or a fused set of experts."""

    def layer_context(self, layer: int, h: Tensor, pool: np.ndarray | None): ...

    def delta(self, layer: int, name: str, x: Tensor, ctx) -> Tensor | None: ...


def pooling_weights(prompt_lengths: Sequence[int], T: int, dtype) -> np.ndarray:
    """[B, T] rows averaging the first prompt_length positions."""
    w = np.zeros((len(prompt_lengths), T), dtype=dtype)
    for b, n in enumerate(prompt_lengths):
        if n < 1:
            raise ValueError("prompt length must be at least 1")
        n = min(n, T)
        w[b, :n] = 1.0 / n
    return w


_mask_cache: dict[tuple[int, str], np.ndarray] = {}


def _causal_mask(T: int, dtype) -> np.ndarray:
    key = (T, np.dtype(dtype).name)
    m = _mask_cache.get(key)
    if m is None:
        m = np.triu(np.full((T, T), -1e9, dtype=dtype), k=1)
        _mask_cache[key] = m
    return m


def _proj(x: Tensor, w: BackboneWeights, layer: int, name: str, mix, ctx) -> Tensor:
    out = nx.matmul(x, w.params[f"l{layer}.{name}"])
    if mix is not None:
        d = mix.delta(layer, name, x, ctx)
        if d is not None:
            out = nx.add(out, d)
    return out


def forward(tokens, weights: BackboneWeights, mix: AdapterMix | None = None,
            prompt_lengths: Sequence[int] | None = None) -> Tensor:
    """Logits for every position: ``[B, T, V]`` (``[T, V]`` for a 1-D input)."""
    if isinstance(tokens, SerializedInput):
        prompt_lengths = [tokens.prompt_length]
        tokens = tokens.tokens
    ids = np.asarray(tokens, dtype=np.int64)
    squeeze = ids.ndim == 1
    if squeeze:
        ids = ids[None, :]
    cfg = weights.config
    B, T = ids.shape
    if T > cfg.max_len:
        raise ContextLengthError(f"sequence of {T} tokens exceeds max context {cfg.max_len}")
    if prompt_lengths is None:
        prompt_lengths = [T] * B
    dt = cfg.np_dtype
    pool = pooling_weights(prompt_lengths, T, dt) if mix is not None else None
    p = weights.params
    H, dh = cfg.heads, cfg.d_model // cfg.heads
    scale = 1.0 / math.sqrt(dh)
    mask = _causal_mask(T, dt)

    h = nx.add(nx.embedding(p["tok_emb"], ids), nx.getitem(p["pos_emb"], slice(0, T)))
    for l in range(cfg.layers):
        ctx = mix.layer_context(l, h, pool) if mix is not None else None
        x = nx.rms_norm(h, p[f"l{l}.norm1"])
        q = _proj(x, weights, l, "q", mix, ctx).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        k = _proj(x, weights, l, "k", mix, ctx).reshape(B, T, H, dh).transpose(0, 2, 3, 1)
        v = _proj(x, weights, l, "v", mix, ctx).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        att = nx.softmax_rows(nx.add(nx.mul(nx.matmul(q, k), scale), mask))
        a = nx.matmul(att, v).transpose(0, 2, 1, 3).reshape(B, T, cfg.d_model)
        h = nx.add(h, _proj(a, weights, l, "o", mix, ctx))
        x = nx.rms_norm(h, p[f"l{l}.norm2"])
        f = nx.gelu(_proj(x, weights, l, "ff_in", mix, ctx))
        h = nx.add(h, _proj(f, weights, l, "ff_out", mix, ctx))
    h = nx.rms_norm(h, p["final_norm"])
    logits = nx.matmul(h, nx.transpose(p["tok_emb"], (1, 0)))
    return logits.reshape(T, cfg.vocab_size) if squeeze else logits


# ---------------------------------------------------------------- batching / LM loss


@dataclass
class Example:
    """A prompt followed by a target; loss covers the target positions only."""

    tokens: list[int]
    prompt_length: int
    session_id: int = -1

    @classmethod
    def from_parts(cls, prompt: SerializedInput, target: TargetSequence, session_id: int = -1):
        return cls(prompt.tokens + target.tokens, prompt.prompt_length, session_id)


def collate(examples: Sequence[Example], all_positions: bool = False):
    """Right-pad to a batch; returns (ids, targets, mask, prompt_lengths)."""
    T = max(len(e.tokens) for e in examples)
    B = len(examples)
    ids = np.full((B, T), PAD, dtype=np.int64)
    for b, e in enumerate(examples):
        ids[b, :len(e.tokens)] = e.tokens
    targets = np.full((B, T - 1), PAD, dtype=np.int64)
    targets[:, :] = ids[:, 1:]
    mask = np.zeros((B, T - 1), dtype=bool)
    for b, e in enumerate(examples):
        start = 0 if all_positions else e.prompt_length - 1
        mask[b, start:len(e.tokens) - 1] = True
    return ids[:, :-1], targets, mask, [e.prompt_length for e in examples]


def batch_loss(examples: Sequence[Example], weights: BackboneWeights, mix=None,
               all_positions: bool = False) -> Tensor:
    ids, targets, mask, plens = collate(examples, all_positions)
    logits = forward(ids, weights, mix, plens)
    return nx.masked_next_token_nll(logits, targets, mask)


def mean_loss(examples: Sequence[Example], weights: BackboneWeights, mix=None,
              all_positions: bool = False, batch_size: int = 32) -> float:
    """Token-weighted mean NLL without recording a tape."""
    if not examples:
        raise ValueError("empty split")
    total = 0.0
    count = 0
    with nx.no_grad():
        for i in range(0, len(examples), batch_size):
            chunk = examples[i:i + batch_size]
            ids, targets, mask, plens = collate(chunk, all_positions)
            logits = forward(ids, weights, mix, plens)
            n = int(mask.sum())
            total += float(nx.masked_next_token_nll(logits, targets, mask).data) * n
            count += n
    return total / count


def length_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


@dataclass
class PretrainResult:
    weights: BackboneWeights
    initial_loss: float
    final_loss: float
    history: list[float]


def pretrain_backbone(corpus: Sequence[Example], config: ModelConfig, seed: int,
                      epochs: int = 2, lr: float = 1e-3, batch_size: int = 16,
                      log_every: int = 0) -> PretrainResult:
    """Next-token LM training over all positions, then freeze."""
    if not corpus:
        raise ValueError("empty corpus")
    longest = max(len(e.tokens) for e in corpus)
    if longest > config.max_len:
        raise ContextLengthError(f"corpus example of {longest} tokens exceeds max context")
    weights = init_backbone(config, seed)
    params = weights.tensors()
    state = nx.AdamState.for_params(params, lr=lr)
    rng = np.random.default_rng([seed, 11])
    initial = mean_loss(corpus, weights, all_positions=True)
    history = []
    for epoch in range(epochs):
        for step, idx in enumerate(length_batches(len(corpus), batch_size, rng)):
            loss = batch_loss([corpus[i] for i in idx], weights, all_positions=True)
            nx.zero_grad(params)
            nx.backward(loss)
            nx.adam_step(params, [p.grad for p in params], state)
            history.append(float(loss.data))
            if log_every and step % log_every == 0:
                print(f"pretrain epoch {epoch} step {step} loss {history[-1]:.4f}", flush=True)
    nx.zero_grad(params)
    final = mean_loss(corpus, weights, all_positions=True)
    weights.freeze()
    return PretrainResult(weights, initial, final, history)
