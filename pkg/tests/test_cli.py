import json

import pytest

from kroute.cli import main

TINY = {
    "world": {"n_items": 40, "n_categories": 4, "n_intents": 8, "n_sessions": 50},
    "model": {"layers": 2, "d_model": 16, "heads": 2, "d_ff": 24, "max_len": 128},
    "pretrain": {"epochs": 1},
    "expert": {"epochs": 1, "rank": 4, "scale": 4.0, "lr": 0.005},
    "fusion": {"lr_grid": [0.001, 0.01]},
    "max_new_tokens": 12,
}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    wd = tmp_path_factory.mktemp("run")
    cfg = wd / "config.json"
    cfg.write_text(json.dumps(TINY))
    base = ["--workdir", str(wd), "--config", str(cfg)]
    steps = [["worldgen"], ["distill", "--teacher", "oracle"], ["pretrain"],
             ["train-expert", "--expert", "base"], ["train-expert", "--expert", "high"],
             ["train-expert", "--expert", "fine"], ["train-expert", "--expert", "merged"],
             ["merge", "--strategy", "ties"], ["merge", "--strategy", "average"],
             ["train-fusion", "--mode", "dynamic"], ["train-fusion", "--mode", "static"],
             ["generate", "--fusion", "dynamic"], ["generate", "--fusion", "average"],
             ["generate", "--fusion", "dynamic", "--tts", "8", "--temperature", "0.7"],
             ["eval", "--predictions", "predictions_fusion_dynamic.jsonl"],
             ["eval", "--predictions", "predictions_fusion_average.jsonl"],
             ["compare", "report_fusion_dynamic.json", "report_fusion_average.json"]]
    for s in steps:
        assert main(base + s) == 0, s
    return wd, base


def test_pipeline_artifacts(workdir):
    wd, _ = workdir
    for name in ("world.json", "sessions.jsonl", "vocab.json", "knowledge.jsonl", "backbone.ckpt",
                 "expert_base.ckpt", "expert_fine.ckpt", "expert_merged.ckpt", "merged_ties.ckpt",
                 "router.ckpt", "static.ckpt", "predictions_fusion_dynamic_tts8.jsonl",
                 "comparison.json", "prompts/reflection_prompt.txt", "prompts/cot_prompt.txt"):
        assert (wd / name).exists(), name
    row = json.loads((wd / "predictions_fusion_dynamic_tts8.jsonl").read_text().splitlines()[0])
    assert row["n_candidates"] == 8


def test_manifests_record_everything(workdir):
    wd, _ = workdir
    m = json.loads((wd / "manifests" / "train-fusion.json").read_text())
    assert m["seed"] == 0 and m["config"]["world"]["n_items"] == 40
    assert any(k.endswith("backbone.ckpt") for k in m["inputs"])
    assert any(k.endswith("static.ckpt") for k in m["outputs"])
    assert "fusion_static" in m["derived_seeds"]
    assert m["argv"][-2:] == ["--mode", "static"]


def test_rerun_is_byte_identical(workdir, capsys):
    wd, base = workdir
    before = (wd / "backbone.ckpt").read_bytes()
    router = (wd / "router.ckpt").read_bytes()
    assert main(base + ["pretrain"]) == 0
    assert main(base + ["train-fusion", "--mode", "dynamic"]) == 0
    assert (wd / "backbone.ckpt").read_bytes() == before
    assert (wd / "router.ckpt").read_bytes() == router
    out = capsys.readouterr().out
    assert "frozen parameter audit" in out and "CHANGED" not in out


def test_trace(workdir, capsys):
    wd, base = workdir
    sid = json.loads((wd / "splits.json").read_text())["test"][0]
    assert main(base + ["trace", "--session", str(sid)]) == 0
    lines = (wd / f"trace_{sid}.csv").read_text().splitlines()
    assert lines[0] == "layer,alpha_base,alpha_high,alpha_fine"
    assert len(lines) == 1 + TINY["model"]["layers"]
    assert main(base + ["trace", "--session", "99999"]) == 1


def test_base_expert_rejects_knowledge(workdir):
    _, base = workdir
    with pytest.raises(SystemExit) as exc:
        main(base + ["train-expert", "--expert", "base", "--knowledge", "knowledge.jsonl"])
    assert exc.value.code == 2


def test_unknown_flag_is_usage_error(workdir):
    _, base = workdir
    with pytest.raises(SystemExit) as exc:
        main(base + ["generate", "--beam", "4"])
    assert exc.value.code == 2


def test_merge_needs_three_experts(workdir):
    wd, base = workdir
    assert main(base + ["merge", "--strategy", "ties", "--experts", str(wd / "expert_base.ckpt")]) == 1
    swapped = [str(wd / f"expert_{k}.ckpt") for k in ("fine", "high", "base")]
    assert main(base + ["merge", "--strategy", "ties", "--experts", *swapped]) == 1


def test_wrong_kind_checkpoint_is_rejected(workdir, tmp_path):
    wd, base = workdir
    import shutil
    for f in wd.iterdir():
        if f.is_file():
            shutil.copy(f, tmp_path / f.name)
    shutil.copy(wd / "backbone.ckpt", tmp_path / "router.ckpt")
    assert main(["--workdir", str(tmp_path), "--config", base[3], "generate", "--fusion", "dynamic"]) == 1


def test_missing_inputs_fail_cleanly(tmp_path, capsys):
    assert main(["--workdir", str(tmp_path), "pretrain"]) == 1
    assert "missing input" in capsys.readouterr().err


def test_env_seed_override(tmp_path, monkeypatch):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(TINY))
    monkeypatch.setenv("RDK_SEED", "7")
    assert main(["--workdir", str(tmp_path), "--config", str(cfg), "worldgen"]) == 0
    assert json.loads((tmp_path / "manifests" / "worldgen.json").read_text())["seed"] == 7
    world = json.loads((tmp_path / "world.json").read_text())
    assert world["config"]["seed"] == 7
    monkeypatch.setenv("RDK_SEED", "x")
    assert main(["--workdir", str(tmp_path), "worldgen"]) == 1


def test_file_teacher_ingestion(workdir, tmp_path):
    wd, base = workdir
    import shutil
    for name in ("world.json", "sessions.jsonl", "vocab.json"):
        shutil.copy(wd / name, tmp_path / name)
    ext = tmp_path / "ext.jsonl"
    ext.write_text(json.dumps({"kind": "high-level", "session_id": None, "payload": ["min-size"]}) + "\n")
    aliases = tmp_path / "aliases.json"
    aliases.write_text(json.dumps({"min-size": "RULE_0"}))
    args = ["--workdir", str(tmp_path), "--config", base[3], "distill", "--teacher", "file",
            "--knowledge-file", str(ext)]
    assert main(args) == 1
    assert main(args + ["--aliases", str(aliases)]) == 0
    assert json.loads((tmp_path / "knowledge.jsonl").read_text())["payload"] == ["RULE_0"]
