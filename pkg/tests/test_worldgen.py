import json

import numpy as np
import pytest

from kroute import worldgen as wg
from kroute.backbone import vocab_for_world


@pytest.fixture(scope="module")
def world():
    return wg.generate_world(wg.WorldConfig(seed=0))


@pytest.fixture(scope="module")
def sessions(world):
    return wg.generate_sessions(world)


def test_world_is_deterministic(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    wg.save_world(a, wg.generate_world(wg.WorldConfig(seed=3)))
    wg.save_world(b, wg.generate_world(wg.WorldConfig(seed=3)))
    assert a.read_bytes() == b.read_bytes()
    wg.save_world(b, wg.generate_world(wg.WorldConfig(seed=4)))
    assert a.read_bytes() != b.read_bytes()


def test_every_item_in_a_pool(world):
    pooled = set().union(*map(set, world.intent_pools))
    assert pooled == {it.id for it in world.items}


def test_pools_span_at_most_two_categories(world):
    cat = {it.id: it.category for it in world.items}
    for pool, cats in zip(world.intent_pools, world.intent_categories):
        assert 1 <= len(cats) <= 2
        assert {cat[i] for i in pool} <= set(cats)


def test_small_pools_rejected():
    with pytest.raises(wg.ConfigError, match="smaller than max bundle size"):
        wg.generate_world(wg.WorldConfig(pool_size=3))


@pytest.mark.parametrize("bad", [{"bundle_sizes": (0.5, 0.6, 0.0, 0.0)}, {"n_sessions": 0},
                                 {"intents_per_session": (0.5, -0.5, 1.0)}, {"distractor_rate": 1.0}])
def test_bad_config_rejected(bad):
    with pytest.raises(wg.ConfigError):
        wg.generate_world(wg.WorldConfig(**bad))


def test_session_shapes(world, sessions):
    assert len(sessions) == 1150
    sizes = [len(b) for s in sessions for b in s.bundles]
    assert min(sizes) >= 2 and max(sizes) <= 5
    assert abs(np.mean(sizes) - 3.5) <= 0.3
    for s in sessions:
        ids = set(s.item_ids)
        assert 1 <= len(s.bundles) <= 3
        flat = [i for b in s.bundles for i in b]
        assert len(flat) == len(set(flat))
        assert set(flat) <= ids
        assert len(ids) == len(s.items)
    assert [s.ts for s in sessions] == sorted(s.ts for s in sessions)


def test_intent_tokens_recover_the_partition(world, sessions):
    for s in sessions:
        rec = wg.oracle_distill_fine_grained(s)
        intents = [int(t.split("_")[1]) for t in rec.payload]
        assert wg.recover_bundles_from_intents(world, s, intents) == sorted(sorted(b) for b in s.bundles)


def test_sessions_deterministic(world):
    a = [s.to_json() for s in wg.generate_sessions(world)]
    b = [s.to_json() for s in wg.generate_sessions(world)]
    assert a == b


@pytest.mark.parametrize("n,sizes", [(1150, (805, 115, 230)), (10, (7, 1, 2)), (37, (25, 3, 9))])
def test_split_sizes(world, n, sizes):
    sess = wg.generate_sessions(world, wg.WorldConfig(n_sessions=n))
    parts = wg.split_chronological(sess)
    assert tuple(map(len, parts)) == sizes
    assert max(s.ts for s in parts[0]) <= min(s.ts for s in parts[1])
    assert max(s.ts for s in parts[1]) <= min(s.ts for s in parts[2])


def test_split_sorts_by_timestamp(sessions):
    shuffled = list(reversed(sessions[:20]))
    train, val, test = wg.split_chronological(shuffled)
    assert [s.ts for s in train + val + test] == sorted(s.ts for s in shuffled)


def test_split_needs_ten_sessions(sessions):
    with pytest.raises(ValueError):
        wg.split_chronological(sessions[:9])


def test_high_level_rules(world):
    (rec,) = wg.oracle_distill_high_level(world)
    assert rec.session_id is None
    assert f"RULE_{wg.MIN_SIZE_RULE}" in rec.payload
    pair_rules = [t for t in rec.payload if int(t.split("_")[1]) >= wg.FIRST_PAIR_RULE]
    assert len(pair_rules) == len(world.compatible_pairs)
    assert wg.oracle_distill_high_level(world)[0].payload == rec.payload


def test_fine_grained_sorted():
    s = wg.Session(7, 0, [], [[1, 2]], [4, 1])
    assert wg.oracle_distill_fine_grained(s).payload == ["INTENT_1", "INTENT_4"]
    assert wg.oracle_distill_fine_grained(wg.Session(8, 1, [], [[1, 2]], [3])).payload == ["INTENT_3"]
    t = wg.Session(9, 2, [], [[5, 6]], [1, 4])
    assert wg.oracle_distill_fine_grained(t).payload == wg.oracle_distill_fine_grained(s).payload


def test_knowledge_roundtrip(tmp_path, world, sessions):
    store = wg.oracle_knowledge(world, sessions[:5])
    p = tmp_path / "k.jsonl"
    wg.save_knowledge(p, store)
    back = wg.load_knowledge_jsonl(p, vocab_for_world(world))
    assert back.rules() == store.rules()
    assert back.reasoning(sessions[3].session_id) == store.reasoning(sessions[3].session_id)


def _write(tmp_path, rows):
    p = tmp_path / "k.jsonl"
    p.write_text("".join(json.dumps(r) + "\n" for r in rows))
    return p


def test_load_two_lines(tmp_path):
    p = _write(tmp_path, [{"kind": "high-level", "session_id": None, "payload": ["RULE_0"]},
                          {"kind": "fine-grained", "session_id": 3, "payload": ["INTENT_2"]}])
    assert len(wg.load_knowledge_jsonl(p).records()) == 2


def test_load_rejects_scoped_high_level(tmp_path):
    p = _write(tmp_path, [{"kind": "high-level", "session_id": None, "payload": ["RULE_0"]},
                          {"kind": "high-level", "session_id": 4, "payload": ["RULE_1"]}])
    with pytest.raises(wg.KnowledgeParseError, match="line 2"):
        wg.load_knowledge_jsonl(p)


def test_load_rejects_unscoped_fine_grained(tmp_path):
    p = _write(tmp_path, [{"kind": "fine-grained", "session_id": None, "payload": ["INTENT_0"]}])
    with pytest.raises(wg.KnowledgeParseError, match="line 1"):
        wg.load_knowledge_jsonl(p)


def test_load_bad_json_reports_line(tmp_path):
    p = tmp_path / "k.jsonl"
    p.write_text('{"kind": "high-level", "session_id": null, "payload": []}\n{oops\n')
    with pytest.raises(wg.KnowledgeParseError, match="line 2"):
        wg.load_knowledge_jsonl(p)


def test_load_unknown_tokens_and_aliases(tmp_path, world):
    vocab = vocab_for_world(world)
    p = _write(tmp_path, [{"kind": "fine-grained", "session_id": 1, "payload": ["gpu-build"]}])
    with pytest.raises(wg.KnowledgeParseError, match="unknown"):
        wg.load_knowledge_jsonl(p, vocab)
    store = wg.load_knowledge_jsonl(p, vocab, aliases={"gpu-build": "INTENT_0"})
    assert store.reasoning(1) == ["INTENT_0"]


def test_load_empty_file_warns(tmp_path, caplog):
    p = tmp_path / "k.jsonl"
    p.write_text("")
    store = wg.load_knowledge_jsonl(p)
    assert store.records() == []
    assert "empty" in caplog.text


def test_prompt_templates(tmp_path):
    paths = wg.emit_prompt_templates(tmp_path / "a")
    assert len(paths) == 2
    for p in paths:
        text = p.read_text()
        assert "{SESSION_ITEMS}" in text and "{GROUND_TRUTH}" in text
    again = wg.emit_prompt_templates(tmp_path / "b")
    assert [p.read_bytes() for p in paths] == [p.read_bytes() for p in again]
    reflection = (tmp_path / "a" / "reflection_prompt.txt").read_text().lower()
    assert "ground truth" in reflection or "ground-truth" in reflection
    assert "compar" in reflection


def test_sessions_jsonl_roundtrip(tmp_path, sessions):
    p = tmp_path / "s.jsonl"
    wg.save_sessions(p, sessions[:10])
    assert [s.to_json() for s in wg.load_sessions(p)] == [s.to_json() for s in sessions[:10]]
    row = json.loads(p.read_text().splitlines()[0])
    assert set(row) == {"session_id", "ts", "items", "bundles", "intents"}
    assert set(row["items"][0]) == {"id", "title", "category"}
