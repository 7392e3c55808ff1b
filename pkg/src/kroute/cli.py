"""Command-line pipeline: worldgen -> distill -> pretrain -> experts -> fusion -> generate -> eval.

All artifacts live in one work directory. Every run writes a manifest to
``<workdir>/manifests/<subcommand>.json`` with the config snapshot,
seeds, input/output file hashes and the command line.

Exit codes: 0 success, 1 validation failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path


from . import checkpoint as ckpt
from .backbone import ModelConfig, Vocab, pretrain_backbone, vocab_for_world
from .decode import DecodeConfig, ModelBundle, TTS_TEMPERATURE, generate_many, read_predictions, write_predictions
from .evaluation import MetricsReport, compare_strategies, evaluate, format_table
from .fusion import ExpertSet, make_fusion, merge_experts, route_trace, train_router, train_static
from .lora import EXPERT_ORDER, ExpertKind, SingleAdapter, derive_seed, train_expert
from .pipeline import ExperimentConfig, pretrain_corpus, run_experiment
from .worldgen import (emit_prompt_templates, generate_sessions, generate_world, load_knowledge_jsonl,
                       load_sessions, load_world, oracle_knowledge, save_knowledge, save_sessions,
                       save_world, split_chronological)

log = logging.getLogger("kroute")


class CLIError(Exception):
    """Validation failure (exit 1)."""


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Run:
    def __init__(self, args):
        self.args = args
        self.workdir = Path(args.workdir)
        self.workdir.mkdir(parents=True, exist_ok=True)
        self.config = self._load_config(args.config)
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}
        self.derived: dict[str, int] = {}

    @staticmethod
    def _load_config(path) -> ExperimentConfig:
        raw = {}
        if path:
            try:
                raw = json.loads(Path(path).read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise CLIError(f"cannot read config {path}: {exc}") from None
        cfg = ExperimentConfig.from_dict(raw)
        env = os.environ.get("RDK_SEED")
        if env is not None:
            try:
                cfg.seed = int(env)
            except ValueError:
                raise CLIError(f"RDK_SEED must be an integer, got {env!r}") from None
        return cfg

    @property
    def seed(self) -> int:
        return self.config.seed

    def path(self, name: str) -> Path:
        return self.workdir / name

    def need(self, name: str) -> Path:
        p = self.path(name) if not os.path.isabs(str(name)) else Path(name)
        if not p.exists():
            raise CLIError(f"missing input {p}; run the earlier pipeline step first")
        self.inputs[str(p)] = file_hash(p)
        return p

    def wrote(self, p) -> None:
        self.outputs[str(p)] = file_hash(p)

    def manifest(self, subcommand: str) -> None:
        mdir = self.path("manifests")
        mdir.mkdir(exist_ok=True)
        doc = {
            "subcommand": subcommand,
            "argv": sys.argv[1:] if self.args.argv is None else self.args.argv,
            "config": self.config.to_dict(),
            "seed": self.seed,
            "derived_seeds": self.derived,
            "inputs": self.inputs,
            "outputs": self.outputs,
        }
        (mdir / f"{subcommand}.json").write_text(json.dumps(doc, indent=1, sort_keys=True))

    # shared loaders
    def world(self):
        return load_world(self.need("world.json"))

    def sessions(self):
        return load_sessions(self.need("sessions.jsonl"))

    def splits(self):
        sessions = self.sessions()
        return split_chronological(sessions)

    def vocab(self) -> Vocab:
        return Vocab.load(self.need("vocab.json"))

    def knowledge(self, vocab, path=None):
        return load_knowledge_jsonl(self.need(path or "knowledge.jsonl"), vocab)

    def backbone(self):
        return ckpt.load_backbone(self.need("backbone.ckpt"))

    def expert_set(self, paths=None) -> ExpertSet:
        paths = paths or [f"expert_{k.value}.ckpt" for k in EXPERT_ORDER]
        adapters = {}
        for kind, p in zip(EXPERT_ORDER, paths):
            a = ckpt.load_adapter(self.need(p))
            if a.kind and a.kind != kind.value:
                raise CLIError(f"{p} holds the {a.kind} expert, expected {kind.value}")
            adapters[kind] = a
        return ExpertSet(adapters)


# ---------------------------------------------------------------- subcommands


def cmd_worldgen(run: Run):
    wcfg = run.config.world
    wcfg.seed = run.seed
    world = generate_world(wcfg)
    sessions = generate_sessions(world)
    train, val, test = split_chronological(sessions)
    save_world(run.path("world.json"), world)
    save_sessions(run.path("sessions.jsonl"), sessions)
    vocab = vocab_for_world(world)
    vocab.save(run.path("vocab.json"))
    splits = {"train": [s.session_id for s in train], "val": [s.session_id for s in val],
              "test": [s.session_id for s in test]}
    run.path("splits.json").write_text(json.dumps(splits))
    for name in ("world.json", "sessions.jsonl", "vocab.json", "splits.json"):
        run.wrote(run.path(name))
    print(f"world: {len(world.items)} items, {len(sessions)} sessions "
          f"({len(train)}/{len(val)}/{len(test)}), vocab {len(vocab)}")


def cmd_distill(run: Run):
    vocab = run.vocab()
    out = run.path("knowledge.jsonl")
    if run.args.teacher == "oracle":
        store = oracle_knowledge(run.world(), run.sessions())
        save_knowledge(out, store)
    else:
        if not run.args.knowledge_file:
            raise CLIError("--teacher file needs --knowledge-file")
        aliases = {}
        if run.args.aliases:
            aliases = json.loads(Path(run.need(run.args.aliases)).read_text())
        store = load_knowledge_jsonl(run.need(run.args.knowledge_file), vocab, aliases)
        save_knowledge(out, store)
    run.wrote(out)
    for p in emit_prompt_templates(run.path("prompts")):
        run.wrote(p)
    print(f"knowledge: {len(store.high_level)} high-level, {len(store.fine_grained)} fine-grained records")


def cmd_pretrain(run: Run):
    train, _, _ = run.splits()
    vocab = run.vocab()
    knowledge = run.knowledge(vocab)
    cfg = run.config
    mcfg = ModelConfig(**{**asdict(cfg.model), "vocab_size": len(vocab)})
    seed = derive_seed(run.seed, "backbone")
    run.derived["backbone"] = seed
    corpus = pretrain_corpus(train, vocab, knowledge, cfg.pretrain.variants, cfg.expert.p_max)
    res = pretrain_backbone(corpus, mcfg, seed, cfg.pretrain.epochs, cfg.pretrain.lr, cfg.pretrain.batch_size)
    out = run.path("backbone.ckpt")
    ckpt.save_backbone(out, res.weights)
    run.wrote(out)
    print(f"pretrain NLL {res.initial_loss:.4f} -> {res.final_loss:.4f}; backbone hash {res.weights.content_hash()[:16]}")


def cmd_train_expert(run: Run):
    kind = ExpertKind(run.args.expert)
    train, val, _ = run.splits()
    vocab = run.vocab()
    knowledge = None if kind == ExpertKind.BASE else run.knowledge(vocab, run.args.knowledge)
    backbone = run.backbone()
    before = backbone.content_hash()
    run.derived[f"expert_{kind.value}"] = derive_seed(run.seed, kind.value)
    res = train_expert(kind, train, knowledge, backbone, vocab, run.config.expert, run.seed)
    if backbone.content_hash() != before:
        raise CLIError("backbone changed during expert training")
    out = run.path(f"expert_{kind.value}.ckpt")
    ckpt.save_adapter(out, res.adapter, backbone.config)
    run.wrote(out)
    print(f"expert {kind.value}: epoch losses {[round(x, 4) for x in res.epoch_losses]}; "
          f"backbone hash unchanged {before[:16]}")


def cmd_merge(run: Run):
    paths = run.args.experts or [f"expert_{k.value}.ckpt" for k in EXPERT_ORDER]
    if len(paths) != len(EXPERT_ORDER):
        raise CLIError(f"merge needs exactly {len(EXPERT_ORDER)} expert checkpoints, got {len(paths)}")
    experts = run.expert_set(paths)
    merged = merge_experts(experts, run.args.strategy, run.args.density)
    out = run.path(f"merged_{run.args.strategy}.ckpt")
    ckpt.save_merged(out, merged, run.args.strategy,
                     run.args.density if run.args.strategy == "ties" else None)
    run.wrote(out)
    print(f"merged {len(merged)} projections with {run.args.strategy}")


def cmd_train_fusion(run: Run):
    train, val, _ = run.splits()
    vocab = run.vocab()
    backbone = run.backbone()
    experts = run.expert_set()
    hp = run.config.fusion
    if run.args.lr_grid:
        hp.lr_grid = tuple(run.args.lr_grid)
    trainer = train_router if run.args.mode == "dynamic" else train_static
    run.derived[f"fusion_{run.args.mode}"] = derive_seed(run.seed, f"fusion-{run.args.mode}")
    res = trainer(train, val, backbone, experts, vocab, hp, run.seed)
    print("frozen parameter audit:")
    for k in res.hashes_before:
        same = res.hashes_before[k] == res.hashes_after[k]
        print(f"  {k:<14} {res.hashes_before[k][:16]} -> {res.hashes_after[k][:16]} {'ok' if same else 'CHANGED'}")
        if not same:
            raise CLIError(f"{k} changed during fusion training")
    if run.args.mode == "dynamic":
        out = run.path("router.ckpt")
        ckpt.save_router(out, res.params, backbone.config)
    else:
        out = run.path("static.ckpt")
        ckpt.save_static(out, res.params, backbone.config)
    run.wrote(out)
    losses = ", ".join(f"{lr:g}: {v:.5f}" for lr, v in sorted(res.val_losses.items()))
    print(f"{run.args.mode}: selected lr {res.lr:g} (val NLL {losses}; at init {res.initial_val_loss:.5f})")


def _model_bundle(run: Run, backbone, vocab):
    a = run.args
    if a.fusion == "none":
        if a.expert is None:
            return ModelBundle(backbone, vocab), "backbone"
        kind = ExpertKind(a.expert)
        adapter = ckpt.load_adapter(run.need(f"expert_{kind.value}.ckpt"))
        knowledge = None if kind == ExpertKind.BASE else run.knowledge(vocab)
        return ModelBundle(backbone, vocab, SingleAdapter(adapter), kind.variant, knowledge), f"expert_{kind.value}"
    if a.expert is not None:
        raise CLIError("--expert only applies with --fusion none")
    if a.fusion == "ties":
        merged, _ = ckpt.load_merged(run.need("merged_ties.ckpt"))
        return ModelBundle(backbone, vocab, make_fusion("ties", merged=merged)), "fusion_ties"
    experts = run.expert_set()
    if a.fusion == "average":
        mix = make_fusion("average", experts)
    elif a.fusion == "static":
        mix = make_fusion("static", experts, coeffs=ckpt.load_static(run.need("static.ckpt")))
    else:
        mix = make_fusion("dynamic", experts, router=ckpt.load_router(run.need("router.ckpt")))
    return ModelBundle(backbone, vocab, mix), f"fusion_{a.fusion}"


def _split(run: Run, name: str):
    train, val, test = run.splits()
    return {"train": train, "val": val, "test": test}[name]


def cmd_generate(run: Run):
    a = run.args
    vocab = run.vocab()
    backbone = run.backbone()
    bundle, name = _model_bundle(run, backbone, vocab)
    temperature = a.temperature
    if temperature is None:
        temperature = TTS_TEMPERATURE if a.tts > 1 else 0.0
    dcfg = DecodeConfig(temperature=temperature, n_samples=a.tts, seed=run.seed,
                        max_new_tokens=run.config.max_new_tokens)
    sessions = _split(run, a.split)
    reports = generate_many(sessions, bundle, dcfg)
    tag = name + (f"_tts{a.tts}" if a.tts > 1 else "")
    out = Path(a.output) if a.output else run.path(f"predictions_{tag}.jsonl")
    write_predictions(out, reports)
    run.wrote(out)
    print(f"wrote {len(reports)} predictions to {out} (N={a.tts}, temperature={temperature})")


def cmd_eval(run: Run):
    a = run.args
    preds = read_predictions(run.need(a.predictions))
    sessions = _split(run, a.split)
    name = a.name or Path(a.predictions).stem.replace("predictions_", "")
    report = evaluate(preds, sessions, name)
    out = run.path(f"report_{name}.json")
    report.save(out)
    run.wrote(out)
    cov = "n/a" if report.coverage is None else f"{report.coverage:.4f}"
    print(f"{name}: Precision {report.precision:.4f}  Recall {report.recall:.4f}  Coverage {cov}  "
          f"({report.n_sessions} sessions, macro mean)")


def cmd_compare(run: Run):
    reports = [MetricsReport.load(run.need(p)) for p in run.args.reports]
    try:
        table = compare_strategies(reports)
    except ValueError as exc:
        raise CLIError(str(exc)) from None
    out = run.path("comparison.json")
    out.write_text(json.dumps(table, indent=1))
    run.wrote(out)
    print(format_table(table))


def cmd_trace(run: Run):
    vocab = run.vocab()
    sessions = {s.session_id: s for s in run.sessions()}
    if run.args.session not in sessions:
        raise CLIError(f"unknown session {run.args.session}")
    trace = route_trace(sessions[run.args.session], run.backbone(), run.expert_set(),
                        ckpt.load_router(run.need("router.ckpt")), vocab)
    out = run.path(f"trace_{run.args.session}.csv")
    trace.to_csv(out)
    run.wrote(out)
    for layer, *alpha in trace.rows():
        print(f"layer {layer}: base {alpha[0]:.4f}  high {alpha[1]:.4f}  fine {alpha[2]:.4f}")


def cmd_experiment(run: Run):
    for seed in run.args.seeds:
        cfg = ExperimentConfig.from_dict({**run.config.to_dict(), "seed": seed})
        res = run_experiment(cfg, run.workdir / "experiments")
        run.wrote(run.workdir / "experiments" / f"experiment_seed{seed}.json")
        print(f"seed {seed}:")
        for name, m in sorted(res["metrics"].items()):
            cov = "n/a" if m["coverage"] is None else f"{m['coverage']:.4f}"
            print(f"  {name:<24} P {m['precision']:.4f}  R {m['recall']:.4f}  C {cov}")


COMMANDS = {
    "worldgen": cmd_worldgen, "distill": cmd_distill, "pretrain": cmd_pretrain,
    "train-expert": cmd_train_expert, "merge": cmd_merge, "train-fusion": cmd_train_fusion,
    "generate": cmd_generate, "eval": cmd_eval, "compare": cmd_compare, "trace": cmd_trace,
    "experiment": cmd_experiment,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kroute", description=__doc__.splitlines()[0])
    p.add_argument("--workdir", default="run", help="artifact directory (default: ./run)")
    p.add_argument("--config", help="JSON config mirroring world/model/expert/fusion/decode settings")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("worldgen", help="generate the synthetic world and sessions")

    d = sub.add_parser("distill", help="produce or ingest distilled knowledge")
    d.add_argument("--teacher", choices=("oracle", "file"), default="oracle")
    d.add_argument("--knowledge-file")
    d.add_argument("--aliases", help="JSON map from external token names to vocabulary tokens")

    sub.add_parser("pretrain", help="pretrain and freeze the backbone")

    te = sub.add_parser("train-expert", help="train one knowledge-specific LoRA expert")
    te.add_argument("--expert", choices=("base", "high", "fine", "merged"), required=True)
    te.add_argument("--knowledge", help="knowledge JSONL (default: workdir/knowledge.jsonl)")

    m = sub.add_parser("merge", help="merge the expert set into one dense delta")
    m.add_argument("--strategy", choices=("ties", "average"), required=True)
    m.add_argument("--density", type=float, default=0.2)
    m.add_argument("--experts", nargs="*", help="expert checkpoints in base, high, fine order")

    f = sub.add_parser("train-fusion", help="learn router (dynamic) or layer coefficients (static)")
    f.add_argument("--mode", choices=("dynamic", "static"), required=True)
    f.add_argument("--lr-grid", nargs="+", type=float)

    g = sub.add_parser("generate", help="decode bundles for a split")
    g.add_argument("--fusion", choices=("average", "ties", "static", "dynamic", "none"), default="dynamic")
    g.add_argument("--expert", choices=("base", "high", "fine", "merged"))
    g.add_argument("--tts", type=int, default=1, help="number of sampled candidates (1 = greedy)")
    g.add_argument("--temperature", type=float)
    g.add_argument("--split", choices=("train", "val", "test"), default="test")
    g.add_argument("--output")

    e = sub.add_parser("eval", help="score a predictions file")
    e.add_argument("--predictions", required=True)
    e.add_argument("--split", choices=("train", "val", "test"), default="test")
    e.add_argument("--name")

    c = sub.add_parser("compare", help="compare metric reports")
    c.add_argument("reports", nargs="+")

    t = sub.add_parser("trace", help="per-layer routing weights for one session")
    t.add_argument("--session", type=int, required=True)

    x = sub.add_parser("experiment", help="run the full desk-scale pipeline per seed")
    x.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = list(argv) if argv is not None else None
    if args.command == "train-expert" and args.expert == "base" and args.knowledge:
        parser.error("the base expert takes raw input only; --knowledge is not allowed")
    if args.command == "generate" and args.tts < 1:
        parser.error("--tts must be at least 1")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        run = Run(args)
        COMMANDS[args.command](run)
        run.manifest(args.command)
    except (CLIError, ckpt.CheckpointError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
