import numpy as np
import pytest

from kroute import numerics as nx
from kroute.backbone import KF, KH, FrozenError, ModelConfig, forward, init_backbone
from kroute.lora import (EXPERT_ORDER, ExpertKind, LoraAdapter, SingleAdapter, TrainConfig,
                         build_examples, derive_seed, expert_eval_loss, init_adapter, lora_delta,
                         train_expert)

HP = TrainConfig(epochs=2, lr=5e-3, batch_size=8, rank=4, scale=4.0)


def test_fresh_adapter_is_zero(tiny_config):
    ad = init_adapter(tiny_config, seed=1, rank=4, scale=4)
    rng = np.random.default_rng(0)
    for key in ad.keys:
        d_in, d_out = tiny_config.proj_shape(key[1])
        H = nx.tensor(rng.normal(size=(5, d_in)).astype(np.float32))
        out = lora_delta(H, ad, *key).data
        assert out.shape == (5, d_out)
        np.testing.assert_array_equal(out, 0.0)


def test_fresh_adapter_leaves_forward_unchanged(tiny_backbone, tiny_config):
    ad = init_adapter(tiny_config, seed=2, rank=4, scale=4)
    ids = [1, 10, 11, 12, 3]
    np.testing.assert_array_equal(forward(ids, tiny_backbone, SingleAdapter(ad)).data,
                                  forward(ids, tiny_backbone).data)


def test_default_shapes_and_determinism():
    cfg = ModelConfig(vocab_size=20)
    ad = init_adapter(cfg, seed=3)
    assert ad.A[(0, "q")].shape == (128, 16) and ad.B[(0, "q")].shape == (16, 128)
    assert ad.A[(0, "ff_in")].shape == (128, 16) and ad.B[(0, "ff_in")].shape == (16, 256)
    assert ad.multiplier == 1.0
    assert len(ad.keys) == cfg.layers * 6
    np.testing.assert_array_equal(ad.A[(2, "v")].data, init_adapter(cfg, seed=3).A[(2, "v")].data)
    assert abs(float(np.std(np.concatenate([a.data.ravel() for a in ad.A.values()]))) - 0.02) < 1e-3


def test_rank_must_be_low(tiny_config):
    with pytest.raises(ValueError):
        init_adapter(tiny_config, seed=0, rank=16)
    with pytest.raises(ValueError):
        init_adapter(tiny_config, seed=0, rank=0)


def test_multiplier_one_gives_plain_product():
    rng = np.random.default_rng(4)
    A = rng.normal(size=(6, 3))
    B = rng.normal(size=(3, 5))
    H = rng.normal(size=(4, 6))
    ad = LoraAdapter(3, 3.0, {(0, "q"): nx.tensor(A)}, {(0, "q"): nx.tensor(B)})
    np.testing.assert_allclose(lora_delta(nx.tensor(H), ad, 0).data, H @ A @ B, rtol=1e-12)
    ad2 = LoraAdapter(3, 6.0, ad.A, ad.B)
    np.testing.assert_allclose(lora_delta(nx.tensor(H), ad2, 0).data, 2 * H @ A @ B, rtol=1e-12)


def test_identity_factor_recovers_dense_update():
    rng = np.random.default_rng(5)
    d = 6
    dW = rng.normal(size=(d, d))
    H = rng.normal(size=(3, d))
    ad = LoraAdapter(d, float(d), {(0, "o"): nx.tensor(np.eye(d))}, {(0, "o"): nx.tensor(dW)})
    np.testing.assert_allclose(lora_delta(nx.tensor(H), ad, 0, "o").data, H @ dW, atol=1e-6)


def test_lora_delta_shape_errors(tiny_config):
    ad = init_adapter(tiny_config, seed=0, rank=4, scale=4)
    with pytest.raises(nx.DimensionError):
        lora_delta(nx.tensor(np.zeros((2, 7), dtype=np.float32)), ad, 0)
    with pytest.raises(KeyError):
        lora_delta(nx.tensor(np.zeros((2, 16), dtype=np.float32)), ad, 9)


def test_derived_seeds_differ():
    seeds = {derive_seed(0, k.value) for k in ExpertKind}
    assert len(seeds) == 4
    assert derive_seed(1, "base") != derive_seed(0, "base")
    assert derive_seed(0, "base") == derive_seed(0, "base")


def test_permutation_coverage(small_world):
    _, sessions, knowledge, vocab = small_world
    for s in sessions[:20]:
        exs = build_examples([s], "raw", vocab, p_max=6)
        m = len(s.bundles)
        expect = min({1: 1, 2: 2, 3: 6}[m], 6)
        assert len({tuple(e.tokens) for e in exs}) == expect


def test_base_inputs_have_no_knowledge_tokens(small_world):
    _, sessions, knowledge, vocab = small_world
    for e in build_examples(sessions, "raw", vocab):
        assert KH not in e.tokens and KF not in e.tokens
    with pytest.raises(ValueError):
        build_examples(sessions, "fine", vocab)


@pytest.fixture(scope="module")
def trained(small_world, tiny_config):
    from kroute.backbone import init_backbone
    world, sessions, knowledge, vocab = small_world
    bb = init_backbone(tiny_config, seed=0)
    bb.freeze()
    h0 = bb.content_hash()
    res = {k: train_expert(k, sessions[:40], knowledge, bb, vocab, HP, seed=0) for k in ExpertKind}
    return bb, h0, res


def test_training_keeps_backbone_and_lowers_loss(trained, small_world):
    bb, h0, res = trained
    assert bb.content_hash() == h0
    for r in res.values():
        assert r.epoch_losses[-1] <= r.epoch_losses[0]
        assert r.backbone_hash == h0
        assert not r.adapter.trainable


def test_training_isolation(small_world, tiny_config, trained):
    world, sessions, knowledge, vocab = small_world
    bb, h0, res = trained
    before = {k: r.adapter.checksum() for k, r in res.items()}
    train_expert("high", sessions[:10], knowledge, bb, vocab, HP, seed=1)
    assert {k: r.adapter.checksum() for k, r in res.items()} == before
    assert bb.content_hash() == h0


def test_training_is_deterministic(small_world, trained):
    world, sessions, knowledge, vocab = small_world
    bb, _, res = trained
    again = train_expert("fine", sessions[:40], knowledge, bb, vocab, HP, seed=0)
    assert again.adapter.checksum() == res[ExpertKind.FINE].adapter.checksum()


def test_trained_fine_expert_beats_untrained(small_world, trained):
    world, sessions, knowledge, vocab = small_world
    bb, _, res = trained
    fine = res[ExpertKind.FINE].adapter
    base_loss = expert_eval_loss(None, "fine", sessions[:40], knowledge, bb, vocab)
    zero = init_adapter(bb.config, seed=7, rank=4, scale=4)
    assert expert_eval_loss(zero, "fine", sessions[:40], knowledge, bb, vocab) == base_loss
    trained_loss = expert_eval_loss(fine, "fine", sessions[:40], knowledge, bb, vocab)
    assert trained_loss < base_loss
    assert expert_eval_loss(fine, "fine", sessions[:40], knowledge, bb, vocab) == trained_loss


def test_training_preconditions(small_world, tiny_config):
    world, sessions, knowledge, vocab = small_world
    loose = init_backbone(tiny_config, seed=0)
    with pytest.raises(FrozenError):
        train_expert("base", sessions[:5], None, loose, vocab, HP)
    loose.freeze()
    with pytest.raises(ValueError):
        train_expert("fine", sessions[:5], None, loose, vocab, HP)
    with pytest.raises(ValueError):
        expert_eval_loss(None, "base", [], None, loose, vocab)


def test_expert_order_excludes_merged():
    assert ExpertKind.MERGED not in EXPERT_ORDER
    assert [k.variant for k in ExpertKind] == ["raw", "high", "fine", "merged"]
