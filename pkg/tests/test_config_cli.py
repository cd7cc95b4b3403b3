"""RunConfig parsing and every CLI subcommand via ``main(argv)``."""
import io
import json
import sys

import pytest

from conftest import last_json
from mpformer.checkpoint import load_checkpoint
from mpformer.cli import main
from mpformer.config import ConfigError, build_run_config


def tree_bytes(path):
    return {p.relative_to(path).as_posix(): p.read_bytes() for p in sorted(path.rglob("*")) if p.is_file()}


# -- RunConfig ------------------------------------------------------------------------------------

def test_seed_is_mandatory_and_propagates():
    with pytest.raises(ConfigError) as exc:
        build_run_config({})
    assert exc.value.field == "seed"
    rc = build_run_config({"seed": 9, "train": {"seed": 2}})
    assert (rc.world.seed, rc.train.seed, rc.train.init_seed, rc.index.seed) == (9, 2, 9, 9)


def test_overrides_are_yaml_typed():
    rc = build_run_config({"seed": 1}, ["world.n_users=12", "train.lr=0.5", "index.approx=false", "model.d=16"])
    assert rc.world.n_users == 12 and rc.train.lr == 0.5 and rc.index.approx is False
    assert rc.model_overrides() == {"d": 16}


@pytest.mark.parametrize("raw,field", [
    ({"seed": 1, "world": {"n_userz": 3}}, "world.n_userz"),
    ({"seed": 1, "world": {"n_users": "many"}}, "world.n_users"),
    ({"seed": 1, "world": {"percentile": 1.5}}, "world.percentile"),
    ({"seed": 1, "model": {"expert_cut": 9}}, "model.expert_cut"),
    ({"seed": 1, "serve": {"mode": "fuzzy"}}, "serve.mode"),
    ({"seed": 1, "extra": {}}, "extra"),
    ({"seed": -1}, "seed"),
])
def test_invalid_fields_are_named(raw, field):
    with pytest.raises(ConfigError) as exc:
        build_run_config(raw)
    assert exc.value.field == field


def test_data_derived_vocab_is_ignored_for_the_model():
    rc = build_run_config({"seed": 0, "model": {"n_items": 5, "d": 8}})
    assert rc.model_overrides() == {"d": 8}


# -- gen-data ------------------------------------------------------------------------------------

def test_gen_data_creates_dir_and_refuses_overwrite(pipeline, tmp_path, capsys):
    out = tmp_path / "nested" / "data"
    assert main(["gen-data", "--config", str(pipeline.config), "--out", str(out)]) == 0
    assert (out / "examples.jsonl").exists() and (out / "run_config.json").exists()
    assert tree_bytes(out) == tree_bytes(pipeline.data)
    capsys.readouterr()
    assert main(["gen-data", "--config", str(pipeline.config), "--out", str(out)]) != 0
    err = json.loads(capsys.readouterr().err.strip())
    assert err["error"] == "exists"
    assert main(["gen-data", "--config", str(pipeline.config), "--out", str(out), "--force"]) == 0


def test_invalid_config_exits_nonzero_with_field(pipeline, tmp_path, capsys):
    code = main(["gen-data", "--config", str(pipeline.config), "--set", "world.n_users=0",
                 "--out", str(tmp_path / "x")])
    err = capsys.readouterr().err.strip().splitlines()
    assert code == 2 and len(err) == 1
    assert json.loads(err[0])["field"] == "world.n_users"
    assert main(["gen-data", "--out", str(tmp_path / "y")]) == 2


# -- train --------------------------------------------------------------------------------------------

def test_train_writes_checkpoint_and_log(pipeline):
    params, cfg, manifest, extra = load_checkpoint(pipeline.ckpt)
    assert manifest["step"] == 4 and cfg.d == 8
    assert manifest["run_config"]["seed"] == 7
    log = [json.loads(line) for line in (pipeline.ckpt / "train_log.jsonl").read_text().splitlines()]
    assert [r["step"] for r in log] == [1, 2, 3, 4]
    assert {"loss", "quota_loss"} <= set(log[0])


def test_single_step_changes_parameters(pipeline, tmp_path):
    out = tmp_path / "one"
    assert main(["train", "--config", str(pipeline.config), "--set", "train.batch_size=2",
                 "--data", str(pipeline.data), "--out", str(out), "--max-steps", "1"]) == 0
    from mpformer.model import init_params

    params, cfg, manifest, _ = load_checkpoint(out)
    init = init_params(cfg, 7)
    assert manifest["step"] == 1
    assert any((params[n].data != init[n].data).any() for n in params)


def test_resume_continues_step_counter(pipeline, tmp_path):
    out = tmp_path / "resumed"
    assert main(["train", "--resume", str(pipeline.ckpt), "--data", str(pipeline.data), "--out", str(out),
                 "--max-steps", "6"]) == 0
    assert load_checkpoint(out)[2]["step"] == 6
    steps = [json.loads(line)["step"] for line in (out / "train_log.jsonl").read_text().splitlines()]
    assert steps == [1, 2, 3, 4, 5, 6]


def test_train_without_data_is_usage_error(capsys):
    assert main(["train"]) == 2
    assert json.loads(capsys.readouterr().err)["error"] == "usage"


# -- build-index + query ---------------------------------------------------------------------------

def test_index_manifest_and_blobs(pipeline):
    m = json.loads((pipeline.index / "manifest.json").read_text())
    assert m["K"] == 3 and m["checkpoint_hash"] == load_checkpoint(pipeline.ckpt)[2]["hash"]
    for e in m["indices"]:
        assert (pipeline.index / e["embeddings"]).stat().st_size == 8 * e["count"] * e["dim"]
        assert (pipeline.index / e["ids"]).stat().st_size == 8 * e["count"]


def test_query_from_dataset_user(pipeline, capsys):
    capsys.readouterr()
    assert main(["query", "--checkpoint", str(pipeline.ckpt), "--index", str(pipeline.index),
                 "--data", str(pipeline.data), "--user", "3", "--q-total", "30"]) == 0
    out = capsys.readouterr().out.strip().splitlines()
    assert len(out) == 1
    resp = json.loads(out[0])
    items = [c["item"] for c in resp["candidates"]]
    assert len(items) == len(set(items)) <= 30
    assert sum(resp["quota"]) == 30 and abs(sum(resp["weights"]) - 1) < 1e-9


def test_query_request_from_stdin(pipeline, capsys, monkeypatch):
    req = {"user": {"age": 1}, "history": [{"item": 5, "watch_ratio": 0.9}], "q_total": 12, "mode": "approx"}
    monkeypatch.setattr(sys, "stdin", io.StringIO(json.dumps(req)))
    capsys.readouterr()
    assert main(["query", "--checkpoint", str(pipeline.ckpt), "--index", str(pipeline.index),
                 "--request", "-"]) == 0
    assert len(json.loads(capsys.readouterr().out)["candidates"]) <= 12


def test_query_rejects_bad_request(pipeline, capsys):
    assert main(["query", "--checkpoint", str(pipeline.ckpt), "--index", str(pipeline.index),
                 "--request", '{"q_total": 0}']) == 2
    assert json.loads(capsys.readouterr().err)["field"] == "q_total"


def test_hash_mismatch_refuses(pipeline, tmp_path, capsys):
    other = tmp_path / "other"
    assert main(["train", "--config", str(pipeline.config), "--set", "train.init_seed=99",
                 "--data", str(pipeline.data), "--out", str(other), "--max-steps", "1"]) == 0
    capsys.readouterr()
    assert main(["query", "--checkpoint", str(other), "--index", str(pipeline.index),
                 "--request", '{"q_total": 10}']) == 1
    assert json.loads(capsys.readouterr().err)["error"] == "hash_mismatch"


# -- eval + bench ----------------------------------------------------------------------------------

def test_eval_writes_reports(pipeline, tmp_path, capsys):
    out = tmp_path / "eval"
    assert main(["eval", "--checkpoint", str(pipeline.ckpt), "--data", str(pipeline.data), "--mode", "both",
                 "--index", str(pipeline.index), "--out", str(out)]) == 0
    lines = (out / "report.txt").read_text().splitlines()
    assert any(line.startswith("catalog pro_lvr recall 100 ") for line in lines)
    assert any(line.startswith("index vtr ndcg 10 ") for line in lines)
    report = json.loads((out / "report.json").read_text())
    assert report["run_config"]["seed"] == 7 and "similarity_probe" in report
    assert (out / "probe.csv").read_text().startswith("bin_lo,bin_hi,count")


def test_bench_prints_both_counts(capsys):
    assert main(["bench", "--n", "64", "--d", "32", "--K", "3", "--json"]) == 0
    row = last_json(capsys.readouterr().out)
    assert row["independent"] == 3 * (65 * 32 ** 2 + 65 ** 2 * 32)
    assert row["shared"] == 67 * 32 ** 2 + 67 ** 2 * 32
    assert main(["bench", "--n", "0"]) == 2


def test_grad_check_flag(capsys):
    assert main(["train", "--grad-check"]) == 0
    assert last_json(capsys.readouterr().out)["grad_check"] == "pass"


def test_help_lists_every_subcommand(capsys):
    assert main(["--help"]) == 0
    text = capsys.readouterr().out
    for cmd in ("gen-data", "train", "build-index", "serve", "query", "eval", "bench"):
        assert cmd in text
