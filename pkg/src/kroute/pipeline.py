"""End-to-end desk-scale experiment: world -> backbone -> experts -> fusion -> decoding -> metrics."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .backbone import ModelConfig, pretrain_backbone, vocab_for_world
from .decode import DecodeConfig, ModelBundle, generate_many
from .evaluation import compare_strategies, evaluate, format_table
from .fusion import (ExpertSet, FusionTrainConfig, make_fusion, merge_experts, route_trace,
                     train_router, train_static, write_traces_csv)
from .lora import EXPERT_ORDER, ExpertKind, SingleAdapter, TrainConfig, build_examples, derive_seed, train_expert
from .worldgen import WorldConfig, generate_sessions, generate_world, oracle_knowledge, split_chronological

log = logging.getLogger(__name__)


@dataclass
class PretrainConfig:
    epochs: int = 6
    lr: float = 1e-3
    batch_size: int = 16
    variants: tuple[str, ...] = ("raw", "high", "fine", "merged")

    @classmethod
    def from_dict(cls, d: dict) -> "PretrainConfig":
        d = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        if "variants" in d:
            d["variants"] = tuple(d["variants"])
        return cls(**d)


@dataclass
class ExperimentConfig:
    seed: int = 0
    world: WorldConfig = field(default_factory=WorldConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    expert: TrainConfig = field(default_factory=TrainConfig)
    fusion: FusionTrainConfig = field(default_factory=FusionTrainConfig)
    ties_density: float = 0.2
    tts_n: int = 8
    tts_temperature: float = 0.7
    max_new_tokens: int = 40

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return cls(
            seed=int(d.get("seed", 0)),
            world=WorldConfig.from_dict(d.get("world", {})),
            model=ModelConfig.from_dict(d.get("model", {})),
            pretrain=PretrainConfig.from_dict(d.get("pretrain", {})),
            expert=TrainConfig.from_dict(d.get("expert", {})),
            fusion=FusionTrainConfig.from_dict(d.get("fusion", {})),
            **{k: d[k] for k in ("ties_density", "tts_n", "tts_temperature", "max_new_tokens") if k in d},
        )


def pretrain_corpus(sessions, vocab, knowledge, variants, p_max):
    corpus = []
    for v in variants:
        corpus += build_examples(sessions, v, vocab, None if v == "raw" else knowledge,
                                 p_max, all_permutations=False)
    return corpus


def _save_artifacts(out: Path, backbone, adapters, router, coeffs, merged) -> None:
    from . import checkpoint as ckpt

    out.mkdir(parents=True, exist_ok=True)
    ckpt.save_backbone(out / "backbone.ckpt", backbone)
    for kind, adapter in adapters.items():
        ckpt.save_adapter(out / f"expert_{kind.value}.ckpt", adapter, backbone.config)
    ckpt.save_router(out / "router.ckpt", router, backbone.config)
    ckpt.save_static(out / "static.ckpt", coeffs, backbone.config)
    ckpt.save_merged(out / "merged_ties.ckpt", merged, "ties", model_config=backbone.config)


def run_experiment(config: ExperimentConfig, out_dir=None) -> dict:
    """Train every arm for one global seed and score it on the test split."""
    t0 = time.time()
    timings = {}
    seed = config.seed
    wcfg = WorldConfig(**{**asdict(config.world), "seed": seed})
    world = generate_world(wcfg)
    sessions = generate_sessions(world)
    train, val, test = split_chronological(sessions)
    knowledge = oracle_knowledge(world, sessions)
    vocab = vocab_for_world(world)
    mcfg = ModelConfig(**{**asdict(config.model), "vocab_size": len(vocab)})
    timings["world"] = time.time() - t0

    corpus = pretrain_corpus(train, vocab, knowledge, config.pretrain.variants, config.expert.p_max)
    pre = pretrain_backbone(corpus, mcfg, derive_seed(seed, "backbone"), config.pretrain.epochs,
                            config.pretrain.lr, config.pretrain.batch_size)
    backbone = pre.weights
    theta_hash = backbone.content_hash()
    timings["pretrain"] = time.time() - t0
    log.info("pretrain loss %.4f -> %.4f", pre.initial_loss, pre.final_loss)

    adapters = {}
    expert_losses = {}
    expert_backbone_hashes = {}
    for kind in (*EXPERT_ORDER, ExpertKind.MERGED):
        res = train_expert(kind, train, knowledge, backbone, vocab, config.expert, seed)
        adapters[kind] = res.adapter
        expert_losses[kind.value] = res.epoch_losses
        expert_backbone_hashes[kind.value] = res.backbone_hash
        timings[f"expert_{kind.value}"] = time.time() - t0
        log.info("expert %s epoch losses %s", kind.value, res.epoch_losses)
    assert backbone.content_hash() == theta_hash

    experts = ExpertSet({k: adapters[k] for k in EXPERT_ORDER})
    dyn = train_router(train, val, backbone, experts, vocab, config.fusion, seed)
    timings["router"] = time.time() - t0
    sta = train_static(train, val, backbone, experts, vocab, config.fusion, seed)
    timings["static"] = time.time() - t0
    merged = merge_experts(experts, "ties", config.ties_density)

    greedy = DecodeConfig(max_new_tokens=config.max_new_tokens, seed=seed)
    tts = DecodeConfig.tts(config.tts_n, config.tts_temperature, seed=seed,
                           max_new_tokens=config.max_new_tokens)
    arms = {}

    def score(name, bundle, dcfg):
        reports = generate_many(test, bundle, dcfg)
        preds = {r.session_id: [list(b) for b in r.bundles] for r in reports}
        arms[name] = evaluate(preds, test, name)
        timings[f"eval_{name}"] = time.time() - t0
        log.info("%s P=%.4f R=%.4f C=%s", name, arms[name].precision, arms[name].recall,
                 arms[name].coverage)

    for kind in (*EXPERT_ORDER, ExpertKind.MERGED):
        score(f"expert_{kind.value}",
              ModelBundle(backbone, vocab, SingleAdapter(adapters[kind]), kind.variant, knowledge), greedy)
    score("backbone_raw", ModelBundle(backbone, vocab), greedy)
    score("fusion_average", ModelBundle(backbone, vocab, make_fusion("average", experts)), greedy)
    score("fusion_ties", ModelBundle(backbone, vocab, make_fusion("ties", merged=merged)), greedy)
    score("fusion_static", ModelBundle(backbone, vocab, make_fusion("static", experts, coeffs=sta.params)), greedy)
    dyn_bundle = ModelBundle(backbone, vocab, make_fusion("dynamic", experts, router=dyn.params))
    score("fusion_dynamic", dyn_bundle, greedy)
    score(f"fusion_dynamic_tts{config.tts_n}", dyn_bundle, tts)
    score(f"fusion_static_tts{config.tts_n}",
          ModelBundle(backbone, vocab, make_fusion("static", experts, coeffs=sta.params)), tts)

    traces = [route_trace(s, backbone, experts, dyn.params, vocab) for s in test]
    assert backbone.content_hash() == theta_hash
    timings["total"] = time.time() - t0

    if out_dir is not None:
        art = Path(out_dir) / f"seed{seed}"
        _save_artifacts(art, backbone, adapters, dyn.params, sta.params, merged)
        write_traces_csv(traces, art / "route_traces.csv")

    result = {
        "seed": seed,
        "config": config.to_dict(),
        "metrics": {k: {"precision": v.precision, "recall": v.recall, "coverage": v.coverage}
                    for k, v in arms.items()},
        "pretrain_loss": [pre.initial_loss, pre.final_loss],
        "expert_epoch_losses": expert_losses,
        "router": {"lr": dyn.lr, "val_losses": {str(k): v for k, v in dyn.val_losses.items()},
                   "initial_val_loss": dyn.initial_val_loss},
        "static": {"lr": sta.lr, "val_losses": {str(k): v for k, v in sta.val_losses.items()},
                   "initial_val_loss": sta.initial_val_loss,
                   "gamma": sta.params.gamma.data.tolist()},
        "mean_alpha_by_layer": [
            [sum(float(t.alpha[l][e]) for t in traces) / len(traces) for e in range(3)]
            for l in range(mcfg.layers)],
        "backbone_hash": theta_hash,
        "expert_backbone_hashes": expert_backbone_hashes,
        "fusion_hashes": {"dynamic": [dyn.hashes_before, dyn.hashes_after],
                          "static": [sta.hashes_before, sta.hashes_after]},
        "expert_checksums": {k.value: a.checksum() for k, a in adapters.items()},
        "timings": timings,
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"experiment_seed{seed}.json").write_text(json.dumps(result, indent=1))
        table = compare_strategies(list(arms.values()))
        (out / f"table_seed{seed}.txt").write_text(format_table(table) + "\n")
    return result
