"""Synthetic bundle world: items, intent pools, sessions and the oracle teacher.

Each intent owns a pool of compatible items spanning one or two
categories. A session activates 1-3 intents, draws one bundle per intent
from items that belong to that intent's pool and to no other active
intent's pool, then mixes in distractors that belong to no active pool.
Knowing a session's intents is therefore enough to recover its bundles
exactly, while the raw item list leaves the grouping ambiguous.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

MIN_SIZE_RULE = 0
INTENT_ALIGN_RULE = 1
FIRST_PAIR_RULE = 2


class ConfigError(ValueError):
    pass


class KnowledgeParseError(ValueError):
    pass


@dataclass
class WorldConfig:
    n_items: int = 150
    n_categories: int = 10
    n_intents: int = 30
    n_sessions: int = 1150
    pool_size: int = 8
    # P(1 intent), P(2), P(3); one bundle per intent
    intents_per_session: tuple[float, ...] = (0.55, 0.35, 0.10)
    # P(size=2), P(3), P(4), P(5)
    bundle_sizes: tuple[float, ...] = (0.2, 0.3, 0.3, 0.2)
    distractor_rate: float = 0.25
    two_category_rate: float = 0.6
    seed: int = 0

    def __post_init__(self):
        self.intents_per_session = tuple(float(p) for p in self.intents_per_session)
        self.bundle_sizes = tuple(float(p) for p in self.bundle_sizes)

    def validate(self) -> None:
        if self.n_intents < self.n_categories:
            raise ConfigError("need at least one intent per category")
        for name in ("n_items", "n_categories", "n_intents", "n_sessions", "pool_size"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("intents_per_session", "bundle_sizes"):
            probs = np.asarray(getattr(self, name))
            if (probs < 0).any() or not math.isclose(probs.sum(), 1.0, abs_tol=1e-9):
                raise ConfigError(f"{name} must be a normalized distribution")
        if not 0.0 <= self.distractor_rate < 1.0:
            raise ConfigError("distractor_rate must be in [0, 1)")
        if self.pool_size < self.max_bundle_size:
            raise ConfigError(
                f"intent pools ({self.pool_size}) smaller than max bundle size ({self.max_bundle_size})")
        if self.n_items < self.n_categories:
            raise ConfigError("need at least one item per category")

    @property
    def max_bundle_size(self) -> int:
        return 1 + len(self.bundle_sizes)

    @property
    def max_intents(self) -> int:
        return len(self.intents_per_session)

    @classmethod
    def from_dict(cls, d: dict) -> "WorldConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass(frozen=True)
class Item:
    id: int
    title: tuple[str, ...]
    category: int


@dataclass
class Session:
    session_id: int
    ts: int
    items: list[Item]
    bundles: list[list[int]]
    intents: list[int]

    @property
    def item_ids(self) -> list[int]:
        return [it.id for it in self.items]

    def to_json(self) -> dict:
        return {
            "session_id": self.session_id,
            "ts": self.ts,
            "items": [{"id": it.id, "title": list(it.title), "category": it.category}
                      for it in self.items],
            "bundles": [list(b) for b in self.bundles],
            "intents": list(self.intents),
        }

    @classmethod
    def from_json(cls, d: dict) -> "Session":
        items = [Item(int(it["id"]), tuple(it.get("title", ())), int(it["category"]))
                 for it in d["items"]]
        return cls(int(d["session_id"]), int(d["ts"]), items,
                   [sorted(int(i) for i in b) for b in d["bundles"]],
                   [int(k) for k in d.get("intents", [])])


@dataclass
class World:
    config: WorldConfig
    items: list[Item]
    intent_categories: list[tuple[int, ...]]
    intent_pools: list[list[int]]
    compatible_pairs: list[tuple[int, int]] = field(default_factory=list)

    @property
    def n_rules(self) -> int:
        return FIRST_PAIR_RULE + len(self.compatible_pairs)

    def pools_of(self, item_id: int) -> list[int]:
        return [k for k, pool in enumerate(self.intent_pools) if item_id in pool]

    def to_json(self) -> dict:
        return {
            "config": asdict(self.config),
            "items": [{"id": it.id, "title": list(it.title), "category": it.category}
                      for it in self.items],
            "intent_categories": [list(c) for c in self.intent_categories],
            "intent_pools": [list(p) for p in self.intent_pools],
            "compatible_pairs": [list(p) for p in self.compatible_pairs],
        }

    @classmethod
    def from_json(cls, d: dict) -> "World":
        return cls(
            config=WorldConfig.from_dict(d["config"]),
            items=[Item(int(it["id"]), tuple(it["title"]), int(it["category"])) for it in d["items"]],
            intent_categories=[tuple(c) for c in d["intent_categories"]],
            intent_pools=[list(p) for p in d["intent_pools"]],
            compatible_pairs=[tuple(p) for p in d["compatible_pairs"]],
        )


_WORDS = ("pro", "mini", "max", "lite", "plus", "air", "ultra", "neo", "core", "flex",
          "edge", "nova", "prime", "volt", "zen", "arc")


def generate_world(config: WorldConfig, seed: int | None = None) -> World:
    config.validate()
    rng = np.random.default_rng(config.seed if seed is None else seed)

    cats = np.arange(config.n_items) % config.n_categories
    rng.shuffle(cats)
    items = []
    for i, c in enumerate(cats):
        words = rng.choice(len(_WORDS), size=2, replace=False)
        items.append(Item(i, (f"cat{int(c)}", _WORDS[words[0]], _WORDS[words[1]]), int(c)))
    by_cat = [[it.id for it in items if it.category == c] for c in range(config.n_categories)]

    intent_categories: list[tuple[int, ...]] = []
    intent_pools: list[list[int]] = []
    for k in range(config.n_intents):
        # the first intents cover every category once so each item has a host pool
        c1 = k if k < config.n_categories else int(rng.integers(config.n_categories))
        if rng.random() < config.two_category_rate and config.n_categories > 1:
            c2 = int(rng.integers(config.n_categories - 1))
            c2 = c2 + 1 if c2 >= c1 else c2
            catset = tuple(sorted((c1, c2)))
        else:
            catset = (c1,)
        candidates = sorted(i for c in catset for i in by_cat[c])
        size = min(config.pool_size, len(candidates))
        if size < config.max_bundle_size:
            raise ConfigError("intent pool smaller than max bundle size; add items per category")
        pool = sorted(int(i) for i in rng.choice(candidates, size=size, replace=False))
        intent_categories.append(catset)
        intent_pools.append(pool)

    # every item joins at least one pool whose categories include it
    covered = {i for p in intent_pools for i in p}
    for it in items:
        if it.id in covered:
            continue
        hosts = [k for k, cs in enumerate(intent_categories) if it.category in cs]
        k = int(rng.choice(hosts))
        intent_pools[k] = sorted(intent_pools[k] + [it.id])

    pairs = sorted({cs for cs in intent_categories if len(cs) == 2})
    return World(config, items, intent_categories, intent_pools, [tuple(p) for p in pairs])


def _bundle_sizes(config: WorldConfig, rng: np.random.Generator, k: int) -> list[int]:
    return [2 + int(rng.choice(len(config.bundle_sizes), p=config.bundle_sizes)) for _ in range(k)]


def generate_sessions(world: World, config: WorldConfig | None = None,
                      seed: int | None = None) -> list[Session]:
    """Sample sessions with disjoint, intent-pure bundles plus distractors."""
    config = config or world.config
    config.validate()
    rng = np.random.default_rng([config.seed if seed is None else seed, 1])
    item_by_id = {it.id: it for it in world.items}
    pool_sets = [set(p) for p in world.intent_pools]
    sessions = []
    sid = 0
    while len(sessions) < config.n_sessions:
        k = 1 + int(rng.choice(config.max_intents, p=config.intents_per_session))
        intents = sorted(int(x) for x in rng.choice(len(pool_sets), size=k, replace=False))
        sizes = _bundle_sizes(config, rng, k)
        bundles = []
        ok = True
        for x, size in zip(intents, sizes):
            others = set().union(*(pool_sets[y] for y in intents if y != x))
            exclusive = sorted(pool_sets[x] - others)
            if len(exclusive) < size:
                ok = False
                break
            bundles.append(sorted(int(i) for i in rng.choice(exclusive, size=size, replace=False)))
        if not ok:
            continue
        active = set().union(*(pool_sets[x] for x in intents))
        n_bundled = sum(sizes)
        n_distract = int(rng.binomial(n_bundled, config.distractor_rate / (1 - config.distractor_rate)))
        # hard distractors first: items sharing a pool with a bundled item
        bundled = {i for b in bundles for i in b}
        near = sorted({i for b in bundled for y in world.pools_of(b) for i in pool_sets[y]}
                      - active)
        far = sorted(set(item_by_id) - active - set(near))
        distract: list[int] = []
        for _ in range(n_distract):
            src = near if (near and rng.random() < 0.5) or not far else far
            pick = int(src[int(rng.integers(len(src)))])
            src.remove(pick)
            distract.append(pick)
        ids = sorted(bundled) + distract
        order = rng.permutation(len(ids))
        sess_items = [item_by_id[ids[j]] for j in order]
        sessions.append(Session(sid, sid, sess_items, sorted(bundles), intents))
        sid += 1
    return sessions


def split_chronological(sessions: list[Session]) -> tuple[list[Session], list[Session], list[Session]]:
    """7:1:2 split by timestamp; floors on the boundaries, remainder to test."""
    n = len(sessions)
    if n < 10:
        raise ValueError(f"need at least 10 sessions to split, got {n}")
    ordered = sorted(sessions, key=lambda s: (s.ts, s.session_id))
    n_train = (7 * n) // 10
    n_val = n // 10
    return ordered[:n_train], ordered[n_train:n_train + n_val], ordered[n_train + n_val:]


# ---------------------------------------------------------------- knowledge


@dataclass
class KnowledgeRecord:
    kind: str  # "high-level" | "fine-grained"
    session_id: int | None
    payload: list[str]

    def to_json(self) -> dict:
        return {"kind": self.kind, "session_id": self.session_id, "payload": list(self.payload)}


@dataclass
class KnowledgeStore:
    high_level: list[KnowledgeRecord] = field(default_factory=list)
    fine_grained: dict[int, KnowledgeRecord] = field(default_factory=dict)

    @classmethod
    def from_records(cls, records: list[KnowledgeRecord]) -> "KnowledgeStore":
        store = cls()
        for r in records:
            store.add(r)
        return store

    def add(self, record: KnowledgeRecord) -> None:
        if record.kind == "high-level":
            self.high_level.append(record)
        else:
            self.fine_grained[int(record.session_id)] = record

    def rules(self) -> list[str]:
        return [tok for r in self.high_level for tok in r.payload]

    def reasoning(self, session_id: int) -> list[str]:
        try:
            return list(self.fine_grained[session_id].payload)
        except KeyError:
            raise KeyError(f"no fine-grained knowledge for session {session_id}") from None

    def records(self) -> list[KnowledgeRecord]:
        return list(self.high_level) + [self.fine_grained[k] for k in sorted(self.fine_grained)]

    @property
    def has_high(self) -> bool:
        return bool(self.high_level)


def oracle_distill_high_level(world: World) -> list[KnowledgeRecord]:
    """The world's true global rules as RULE tokens."""
    payload = [f"RULE_{MIN_SIZE_RULE}", f"RULE_{INTENT_ALIGN_RULE}"]
    payload += [f"RULE_{FIRST_PAIR_RULE + j}" for j in range(len(world.compatible_pairs))]
    return [KnowledgeRecord("high-level", None, payload)]


def oracle_distill_fine_grained(session: Session) -> KnowledgeRecord:
    return KnowledgeRecord("fine-grained", session.session_id,
                           [f"INTENT_{k}" for k in sorted(session.intents)])


def oracle_knowledge(world: World, sessions: list[Session]) -> KnowledgeStore:
    records = oracle_distill_high_level(world)
    records += [oracle_distill_fine_grained(s) for s in sessions]
    return KnowledgeStore.from_records(records)


def recover_bundles_from_intents(world: World, session: Session, intents: list[int]) -> list[list[int]]:
    """Independent partition oracle: each intent's session items form one bundle."""
    ids = set(session.item_ids)
    out = []
    for k in intents:
        b = sorted(ids & set(world.intent_pools[k]))
        if len(b) >= 2:
            out.append(b)
    return sorted(out)


# ---------------------------------------------------------------- files


def write_jsonl(path: str | Path, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_jsonl(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def save_sessions(path, sessions: list[Session]) -> None:
    write_jsonl(path, (s.to_json() for s in sessions))


def load_sessions(path) -> list[Session]:
    return [Session.from_json(d) for d in read_jsonl(path)]


def save_world(path, world: World) -> None:
    Path(path).write_text(json.dumps(world.to_json(), sort_keys=True, indent=1))


def load_world(path) -> World:
    return World.from_json(json.loads(Path(path).read_text()))


def save_knowledge(path, store: KnowledgeStore) -> None:
    write_jsonl(path, (r.to_json() for r in store.records()))


def load_knowledge_jsonl(path, vocab=None, aliases: dict[str, str] | None = None) -> KnowledgeStore:
    """Parse and validate a knowledge file.

    With a vocabulary, every payload token must be known after applying
    ``aliases``; unknown tokens are rejected.
    """
    aliases = aliases or {}
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise KnowledgeParseError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(d, dict) or set(d) - {"kind", "session_id", "payload"}:
                raise KnowledgeParseError(f"line {lineno}: unexpected fields")
            kind = d.get("kind")
            sid = d.get("session_id")
            payload = d.get("payload")
            if kind not in ("high-level", "fine-grained"):
                raise KnowledgeParseError(f"line {lineno}: bad kind {kind!r}")
            if not isinstance(payload, list) or not all(isinstance(t, str) for t in payload):
                raise KnowledgeParseError(f"line {lineno}: payload must be a list of strings")
            if kind == "fine-grained" and not isinstance(sid, int):
                raise KnowledgeParseError(f"line {lineno}: fine-grained record needs an integer session_id")
            if kind == "high-level" and sid is not None:
                raise KnowledgeParseError(f"line {lineno}: high-level records are global, session_id must be null")
            toks = [aliases.get(t, t) for t in payload]
            if vocab is not None:
                unknown = [t for t in toks if t not in vocab.token_to_id]
                if unknown:
                    raise KnowledgeParseError(f"line {lineno}: unknown tokens {unknown}")
            records.append(KnowledgeRecord(kind, sid, toks))
    if not records:
        log.warning("knowledge file %s is empty", path)
    return KnowledgeStore.from_records(records)


REFLECTION_TEMPLATE = """\
Task: category-level bundle rules.

Items in one shopping session:
{SESSION_ITEMS}

1. List the bundles you would predict for these items. A bundle has two
   or more session items.
2. Reference bundles for the session:
{GROUND_TRUTH}
   Note each place your list differs from the reference and what led to it.
3. Output rules that would have avoided those differences, one per line,
   each prefixed with "RULE:". A rule may mention categories but not
   specific item ids.
"""

COT_TEMPLATE = """\
Task: session-level bundle rationales.

Items in one shopping session (id, title, category):
{SESSION_ITEMS}

Reference bundles for the session:
{GROUND_TRUTH}

For each reference bundle, state the shopping goal it serves and how the
titles and categories of its items support that goal. One line per bundle,
prefixed with "INTENT:", followed by the bundle's item ids.
"""


def emit_prompt_templates(out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "reflection_prompt.txt", out / "cot_prompt.txt"]
    paths[0].write_text(REFLECTION_TEMPLATE, encoding="utf-8")
    paths[1].write_text(COT_TEMPLATE, encoding="utf-8")
    return paths
