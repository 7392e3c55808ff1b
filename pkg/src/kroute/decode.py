"""Autoregressive decoding, bundle parsing and majority-vote test-time scaling."""

from __future__ import annotations

import json
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .backbone import B_CLOSE, B_OPEN, EOS, PAD, BackboneWeights, SerializedInput, Vocab, forward
from .lora import session_prompt

TTS_TEMPERATURE = 0.7
TTS_N = 8


@dataclass
class DecodeConfig:
    temperature: float = 0.0
    n_samples: int = 1
    max_new_tokens: int = 40
    seed: int = 0

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.n_samples < 1:
            raise ValueError("need at least one sample")

    @classmethod
    def tts(cls, n: int = TTS_N, temperature: float = TTS_TEMPERATURE, seed: int = 0, **kw):
        return cls(temperature=temperature, n_samples=n, seed=seed, **kw)


@dataclass
class Candidate:
    tokens: list[int]
    logprob: float
    sample_index: int
    truncated: bool = False


@dataclass
class ModelBundle:
    """A frozen backbone plus whatever adapter hook sits on top of it."""

    backbone: BackboneWeights
    vocab: Vocab
    mix: object = None
    variant: str = "raw"
    knowledge: object = None

    def prompt(self, session) -> SerializedInput:
        return session_prompt(session, self.variant, self.vocab, self.knowledge)


def _sample_rng(seed: int, sample_index: int, session_id: int) -> np.random.Generator:
    return np.random.default_rng([seed + sample_index, session_id])


def decode_batch(prompts: Sequence[SerializedInput], model: ModelBundle, temperature: float,
                 rngs: Sequence[np.random.Generator | None], sample_indices: Sequence[int],
                 max_new_tokens: int = 40) -> list[Candidate]:
    """Decode equal-length prompts in lockstep; one generator per row.

    Greedy when ``temperature == 0`` (ties go to the lowest token id).
    Log-probabilities are taken under the sampling distribution; greedy
    runs score under the untempered softmax.
    """
    if len({len(p.tokens) for p in prompts}) != 1:
        raise ValueError("decode_batch needs prompts of equal length")
    B = len(prompts)
    plen = len(prompts[0].tokens)
    cfg = model.backbone.config
    budget = min(max_new_tokens, cfg.max_len - plen)
    seqs = np.full((B, plen + budget), PAD, dtype=np.int64)
    for b, p in enumerate(prompts):
        seqs[b, :plen] = p.tokens
    done = np.zeros(B, dtype=bool)
    logps = np.zeros(B, dtype=np.float64)
    n_gen = np.zeros(B, dtype=np.int64)
    plens = [p.prompt_length for p in prompts]
    with nx.no_grad():
        for step in range(budget):
            cur = plen + step
            logits = forward(seqs[:, :cur], model.backbone, model.mix, plens).data[:, -1, :]
            logits = logits.astype(np.float64)
            for b in range(B):
                if done[b]:
                    continue
                row = logits[b]
                if temperature == 0:
                    tok = int(np.argmax(row))
                    lp = nx.log_softmax_np(row)[tok]
                else:
                    lsm = nx.log_softmax_np(row / temperature)
                    cdf = np.cumsum(np.exp(lsm))
                    u = rngs[b].random() * cdf[-1]
                    tok = int(min(np.searchsorted(cdf, u, side="right"), len(cdf) - 1))
                    lp = lsm[tok]
                seqs[b, cur] = tok
                logps[b] += lp
                n_gen[b] += 1
                if tok == EOS:
                    done[b] = True
            if done.all():
                break
    out = []
    for b in range(B):
        toks = seqs[b, plen:plen + n_gen[b]].tolist()
        out.append(Candidate(toks, float(logps[b]), int(sample_indices[b]), not done[b]))
    return out


def decode(prompt: SerializedInput, model: ModelBundle, config: DecodeConfig | None = None,
           sample_index: int = 0, session_id: int = 0) -> Candidate:
    config = config or DecodeConfig()
    rng = _sample_rng(config.seed, sample_index, session_id) if config.temperature > 0 else None
    return decode_batch([prompt], model, config.temperature, [rng], [sample_index],
                        config.max_new_tokens)[0]


# ---------------------------------------------------------------- parsing


@dataclass
class ParseReport:
    dropped_items: int = 0
    dropped_bundles: int = 0
    unclosed: int = 0
    stray_tokens: int = 0


def parse_bundles(tokens: Sequence[int], session_items, vocab: Vocab) -> tuple[list[list[int]], ParseReport]:
    """Collect B_OPEN ... B_CLOSE blocks; never raises on malformed output."""
    allowed = set(session_items)
    report = ParseReport()
    bundles: list[list[int]] = []
    current: list[int] | None = None
    for t in tokens:
        if t == EOS:
            break
        if t == B_OPEN:
            if current is not None:
                report.unclosed += 1
            current = []
        elif t == B_CLOSE:
            if current is None:
                report.stray_tokens += 1
                continue
            if len(current) >= 2:
                bundles.append(current)
            else:
                report.dropped_bundles += 1
            current = None
        elif current is not None:
            item = vocab.item_of(t) if 0 <= t < len(vocab) else None
            if item is None:
                report.stray_tokens += 1
            elif item not in allowed:
                report.dropped_items += 1
            elif item not in current:
                current.append(item)
        else:
            report.stray_tokens += 1
    if current is not None:
        report.unclosed += 1
    return bundles, report


def normalize(bundles) -> tuple[tuple[int, ...], ...]:
    """Sort items within bundles, drop duplicates, sort bundles."""
    return tuple(sorted({tuple(sorted(set(int(i) for i in b))) for b in bundles if len(set(b)) >= 2}))


def bundle_key(normed) -> str:
    return json.dumps([list(b) for b in normed])


@dataclass
class VoteEntry:
    bundles: tuple
    logprob: float
    sample_index: int


def majority_vote(entries: Sequence[VoteEntry]):
    """Most frequent normalized set; ties by higher mean log-prob, then lower sample index."""
    if not entries:
        raise ValueError("majority vote over no candidates")
    groups: dict[str, list[VoteEntry]] = defaultdict(list)
    for e in entries:
        groups[bundle_key(e.bundles)].append(e)

    def rank(key):
        g = groups[key]
        return (-len(g), -float(np.mean([e.logprob for e in g])), min(e.sample_index for e in g))

    best = min(groups, key=rank)
    return groups[best][0].bundles, len(groups[best])


@dataclass
class TTSReport:
    session_id: int
    bundles: tuple
    n_candidates: int
    vote_count: int
    truncated: bool
    candidate_keys: dict[str, int] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"session_id": self.session_id, "bundles": [list(b) for b in self.bundles],
                "n_candidates": self.n_candidates, "vote_count": self.vote_count,
                "truncated": self.truncated}


def _reduce(session, cands: list[Candidate], vocab: Vocab) -> TTSReport:
    entries = []
    for c in cands:
        parsed, _ = parse_bundles(c.tokens, session.item_ids, vocab)
        entries.append(VoteEntry(normalize(parsed), c.logprob, c.sample_index))
    winner, count = majority_vote(entries)
    keys = Counter(bundle_key(e.bundles) for e in entries)
    win_key = bundle_key(winner)
    truncated = any(c.truncated for c, e in zip(cands, entries) if bundle_key(e.bundles) == win_key)
    return TTSReport(session.session_id, winner, len(cands), count, truncated, dict(keys))


def tts_generate(session, model: ModelBundle, config: DecodeConfig | None = None) -> TTSReport:
    """N seeded decodes, parse, normalize, vote. N=1 means one greedy decode."""
    return generate_many([session], model, config)[0]


def generate_many(sessions, model: ModelBundle, config: DecodeConfig | None = None,
                  max_rows: int = 96) -> list[TTSReport]:
    """tts_generate over many sessions, batching rows whose prompts share a length.

    Rows of one forward pass never interact, so grouping by prompt length
    gives the same tokens as decoding each session alone.
    """
    config = config or DecodeConfig()
    greedy = config.n_samples == 1 or config.temperature == 0
    n_rows = 1 if greedy else config.n_samples
    rows = []
    for s in sessions:
        p = model.prompt(s)
        for i in range(n_rows):
            rows.append((len(p.tokens), s, p, i))
    by_len: dict[int, list] = defaultdict(list)
    for r in rows:
        by_len[r[0]].append(r)
    cands: dict[int, list[Candidate]] = defaultdict(list)
    for length in sorted(by_len):
        group = by_len[length]
        for j in range(0, len(group), max_rows):
            chunk = group[j:j + max_rows]
            temp = 0.0 if greedy else config.temperature
            rngs = [None if greedy else _sample_rng(config.seed, i, s.session_id)
                    for _, s, _, i in chunk]
            out = decode_batch([p for _, _, p, _ in chunk], model, temp, rngs,
                               [i for *_, i in chunk], config.max_new_tokens)
            for (_, s, _, _), c in zip(chunk, out):
                cands[s.session_id].append(c)
    reports = []
    for s in sessions:
        cs = sorted(cands[s.session_id], key=lambda c: c.sample_index)
        if greedy and config.n_samples > 1:
            # zero temperature: every candidate is the greedy sequence
            cs = [Candidate(cs[0].tokens, cs[0].logprob, i, cs[0].truncated)
                  for i in range(config.n_samples)]
        reports.append(_reduce(s, cs, model.vocab))
    return reports


def write_predictions(path, reports: Sequence[TTSReport]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in reports:
            fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")


def read_predictions(path) -> dict[int, list[list[int]]]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                out[int(d["session_id"])] = [list(map(int, b)) for b in d["bundles"]]
    return out
