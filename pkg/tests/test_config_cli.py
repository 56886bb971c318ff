"""Config document parsing and the command-line pipeline."""

import json
import os
import sys
from pathlib import Path

import numpy as np
import pytest

from hyperlora import cli
from hyperlora import config as cf
from hyperlora import checkpoint as ck
from hyperlora import datagen as dg
from hyperlora import evaluation as ev
from hyperlora.errors import ConfigError


TINY = {
    "seed": 5,
    "data": {"n_train": 20, "n_val": 10, "n_test": 10, "n_tasks": 4,
             "family_sizes": [2, 2], "height": 16, "width": 16, "depth": 3},
    "backbone": {"hidden_dim": 16, "num_layers": 1, "num_heads": 2,
                 "patch_size": 8, "image_side": 16},
    "hyperlora": {"embed_dim": 8, "pos_dim": 4, "latent_dim": 8,
                  "head_in_dim": 8, "rank": 2, "alpha": 2.0},
    "train": {"epochs": 1, "batch_size": 8, "lr": 0.001},
    "eval": {"bootstrap_iters": 25},
}


def write_config(tmp_path, doc, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


def tree_bytes(root) -> dict:
    root = Path(root)
    return {str(p.relative_to(root)): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


# ---------------------------------------------------------------------------
# config document
# ---------------------------------------------------------------------------


def test_minimal_config_resolves_all_defaults():
    cfg = cf.parse_config({"seed": 3})
    assert cfg.seed == 3
    assert cfg.data.n_train == 1200 and cfg.data.n_tasks == 6
    assert cfg.backbone.hidden_dim == 64 and cfg.backbone.num_layers == 2
    assert cfg.hyperlora.rank == 4 and cfg.hyperlora.alpha == 4.0
    assert cfg.train.epochs == 30 and cfg.train.lr == 3e-4
    assert cfg.train.seed == 3
    assert cfg.eval.bootstrap_iters == 1000 and cfg.eval.split == "test"
    assert cfg.analysis.mode == "materialized"


def test_effective_config_round_trips():
    cfg = cf.parse_config(dict(TINY))
    doc = json.loads(json.dumps(cf.effective_config(cfg)))
    assert cf.parse_config(doc) == cfg


def test_seed_is_mandatory_and_integer():
    with pytest.raises(ConfigError, match="seed"):
        cf.parse_config({})
    with pytest.raises(ConfigError, match="seed"):
        cf.parse_config({"seed": "7"})
    with pytest.raises(ConfigError, match="seed"):
        cf.parse_config({"seed": True})
    with pytest.raises(ConfigError, match="seed"):
        cf.parse_config({"seed": -1})
    with pytest.raises(ConfigError, match="JSON object"):
        cf.parse_config([1, 2])


def test_unknown_keys_are_named():
    with pytest.raises(ConfigError, match="sedd"):
        cf.parse_config({"seed": 0, "sedd": 1})
    with pytest.raises(ConfigError, match=r"train\.lr_warmup"):
        cf.parse_config({"seed": 0, "train": {"lr_warmup": 5}})
    with pytest.raises(ConfigError, match=r"data\.n_trian"):
        cf.parse_config({"seed": 0, "data": {"n_trian": 10}})
    # per-section seed would silently shadow the top-level one
    with pytest.raises(ConfigError, match=r"train\.seed"):
        cf.parse_config({"seed": 0, "train": {"seed": 1}})


def test_bad_section_values_become_config_errors():
    with pytest.raises(ConfigError, match="train"):
        cf.parse_config({"seed": 0, "train": {"lr": 0.0}})
    with pytest.raises(ConfigError, match="analysis"):
        cf.parse_config({"seed": 0, "analysis": {"mode": "tsne"}})
    with pytest.raises(ConfigError, match="eval"):
        cf.parse_config({"seed": 0, "eval": {"split": "holdout"}})
    with pytest.raises(ConfigError, match="backbone"):
        cf.parse_config({"seed": 0, "backbone": {"hidden_dim": 30, "num_heads": 4}})
    with pytest.raises(ConfigError, match="must be a JSON object"):
        cf.parse_config({"seed": 0, "train": [1]})


def test_cross_section_checks():
    with pytest.raises(ConfigError, match="family sizes"):
        cf.parse_config({"seed": 0, "data": {"n_tasks": 5, "family_sizes": [2, 2]}})
    with pytest.raises(ConfigError, match="16x16"):
        cf.parse_config({"seed": 0, "backbone": {"hidden_dim": 16, "num_layers": 1,
                                                 "num_heads": 2, "patch_size": 8,
                                                 "image_side": 16}})
    with pytest.raises(ConfigError, match="depth"):
        cf.parse_config({"seed": 0, "data": {"depth": 2}})


def test_split_seeds_are_distinct_and_stable():
    seeds = [cf.split_seed(9, s) for s in cf.SPLITS]
    assert len(set(seeds)) == 3
    assert seeds == [cf.split_seed(9, s) for s in cf.SPLITS]
    assert cf.split_seed(10, "train") != cf.split_seed(9, "train")


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="cannot open"):
        cf.load_config(tmp_path / "nope.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError, match="not valid JSON"):
        cf.load_config(bad)


def test_thread_cap(monkeypatch):
    monkeypatch.delenv("HYPERLORA_THREADS", raising=False)
    assert cf.thread_cap() == 1
    monkeypatch.setenv("HYPERLORA_THREADS", "4")
    assert cf.thread_cap() == 4
    monkeypatch.setenv("HYPERLORA_THREADS", "zero")
    with pytest.raises(ConfigError, match="HYPERLORA_THREADS"):
        cf.thread_cap()
    monkeypatch.setenv("HYPERLORA_THREADS", "0")
    with pytest.raises(ConfigError):
        cf.thread_cap()


# ---------------------------------------------------------------------------
# pipeline fixtures: one tiny cohort + one trained checkpoint, reused
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    config = write_config(root, TINY)
    data = root / "data"
    run = root / "run"
    assert cli.main(["gen-data", "--config", config, "--out", str(data)]) == 0
    assert cli.main(["train", "--config", config, "--data", str(data), "--out", str(run)]) == 0
    return {"root": root, "config": config, "data": data, "run": run,
            "ckpt": run / "model.ckpt"}


def test_gen_data_writes_expected_tree(pipeline):
    data = pipeline["data"]
    for name in ("config.json", "rulebook.json", "train.jsonl", "val.jsonl", "test.jsonl"):
        assert (data / name).exists()
    assert len(list((data / "volumes").glob("train-*.hctv"))) == 20
    assert len(list((data / "volumes").glob("val-*.hctv"))) == 10
    rulebook = json.loads((data / "rulebook.json").read_text())
    assert len(rulebook["tasks"]) == 4
    assert all(t["threshold"] is not None for t in rulebook["tasks"])
    # the echoed config reproduces the parsed one
    assert cf.parse_config(json.loads((data / "config.json").read_text())) \
        == cf.parse_config(dict(TINY))


def test_gen_data_rerun_is_byte_identical(pipeline, tmp_path):
    again = tmp_path / "again"
    assert cli.main(["gen-data", "--config", pipeline["config"], "--out", str(again)]) == 0
    assert tree_bytes(again) == tree_bytes(pipeline["data"])


def test_splits_do_not_repeat_volumes(pipeline):
    a = dg.load_volume(pipeline["data"] / "volumes" / "train-00000.hctv")
    b = dg.load_volume(pipeline["data"] / "volumes" / "val-00000.hctv")
    assert not np.array_equal(a, b)


def test_gen_data_zero_samples(tmp_path):
    doc = json.loads(json.dumps(TINY))
    doc["data"].update(n_train=0, n_val=0, n_test=0)
    config = write_config(tmp_path, doc)
    out = tmp_path / "empty"
    assert cli.main(["gen-data", "--config", config, "--out", str(out)]) == 0
    assert (out / "train.jsonl").read_text() == ""
    assert list((out / "volumes").glob("*.hctv")) == []
    rulebook = json.loads((out / "rulebook.json").read_text())
    assert all(t["threshold"] is None for t in rulebook["tasks"])


def test_unknown_config_key_exits_one(tmp_path, capsys):
    config = write_config(tmp_path, {"seed": 0, "data": {"n_trian": 5}})
    assert cli.main(["gen-data", "--config", config, "--out", str(tmp_path / "x")]) == 1
    assert "n_trian" in capsys.readouterr().err


def test_train_outputs_and_determinism(pipeline, tmp_path):
    run = pipeline["run"]
    assert (run / "model.ckpt").exists()
    rows = [json.loads(line) for line in (run / "metrics.jsonl").read_text().splitlines()]
    assert len(rows) == 1
    assert set(rows[0]) == {"epoch", "lr", "train_loss", "val_auc_per_task", "val_auc_mean"}
    again = tmp_path / "again"
    assert cli.main(["train", "--config", pipeline["config"], "--data",
                     str(pipeline["data"]), "--out", str(again)]) == 0
    assert tree_bytes(again) == tree_bytes(run)


def test_variants_differ_in_checkpoint_path_sets(pipeline, tmp_path):
    doc = json.loads(json.dumps(TINY))
    doc["train"]["variant"] = "ew_baseline"
    config = write_config(tmp_path, doc, "ew.json")
    out = tmp_path / "ew"
    assert cli.main(["train", "--config", config, "--data",
                     str(pipeline["data"]), "--out", str(out)]) == 0
    hyper = ck.load_checkpoint(pipeline["ckpt"])
    ew = ck.load_checkpoint(out / "model.ckpt")
    hyper_paths = set(hyper.store.paths())
    ew_paths = set(ew.store.paths())
    assert any(p.startswith("hypernet.") for p in hyper_paths - ew_paths)
    assert any(p.startswith("shared_lora.") for p in ew_paths - hyper_paths)


def test_train_missing_data_dir_exits_two(pipeline, tmp_path, capsys):
    assert cli.main(["train", "--config", pipeline["config"], "--data",
                     str(tmp_path / "void"), "--out", str(tmp_path / "o")]) == 2


def test_train_corrupt_volume_exits_two(pipeline, tmp_path):
    import shutil

    broken = tmp_path / "broken"
    shutil.copytree(pipeline["data"], broken)
    victim = broken / "volumes" / "train-00003.hctv"
    victim.write_bytes(victim.read_bytes()[:40])
    assert cli.main(["train", "--config", pipeline["config"], "--data",
                     str(broken), "--out", str(tmp_path / "o")]) == 2


def test_eval_outputs(pipeline, tmp_path):
    out = tmp_path / "ev"
    assert cli.main(["eval", "--checkpoint", str(pipeline["ckpt"]), "--data",
                     str(pipeline["data"]), "--out", str(out)]) == 0
    lines = (out / "eval.csv").read_text().splitlines()
    assert lines[0] == "task,auc,ci_lo,ci_hi,n"
    assert len(lines) == 5
    scores = ev.read_scores(out / "scores.jsonl")
    vals = np.array([r["score"] for r in scores])
    assert vals.min() >= 0.0 and vals.max() <= 1.0
    # rerun → identical bytes
    again = tmp_path / "again"
    assert cli.main(["eval", "--checkpoint", str(pipeline["ckpt"]), "--data",
                     str(pipeline["data"]), "--out", str(again)]) == 0
    assert tree_bytes(again) == tree_bytes(out)


def test_eval_zero_bootstrap_iters_leaves_ci_empty(pipeline, tmp_path):
    out = tmp_path / "ev0"
    assert cli.main(["eval", "--checkpoint", str(pipeline["ckpt"]), "--data",
                     str(pipeline["data"]), "--out", str(out),
                     "--bootstrap-iters", "0"]) == 0
    for line in (out / "eval.csv").read_text().splitlines()[1:]:
        task, auc, lo, hi, n = line.split(",")
        assert lo == "" and hi == ""
        assert float(auc) == pytest.approx(float(auc))
    echoed = json.loads((out / "config.json").read_text())
    assert echoed["eval"]["bootstrap_iters"] == 0


def test_eval_needs_data_with_checkpoint(pipeline, tmp_path, capsys):
    assert cli.main(["eval", "--checkpoint", str(pipeline["ckpt"]),
                     "--out", str(tmp_path / "x")]) == 1


def test_eval_rejects_mismatched_checkpoint(pipeline, tmp_path):
    data = ck.load_checkpoint(pipeline["ckpt"])
    doc = dict(data.config)
    doc["data"] = dict(doc["data"], n_tasks=6, family_sizes=[3, 3])
    tampered = tmp_path / "tampered.ckpt"
    ck.save_checkpoint(tampered, data.store, doc, data.rng_state, data.epoch)
    assert cli.main(["eval", "--checkpoint", str(tampered), "--data",
                     str(pipeline["data"]), "--out", str(tmp_path / "x")]) == 2


def test_eval_corrupt_checkpoint_exits_two(pipeline, tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(pipeline["ckpt"].read_bytes()[:-60])
    assert cli.main(["eval", "--checkpoint", str(bad), "--data",
                     str(pipeline["data"]), "--out", str(tmp_path / "x")]) == 2


def test_rulebook_scores_through_eval_hit_ceiling(tmp_path):
    # blob-only signals with zero background noise are exactly separable,
    # so the rulebook statistics alone score AUC 1.0 on every task
    doc = {
        "seed": 11,
        "data": {"n_train": 40, "n_val": 0, "n_test": 0, "n_tasks": 2,
                 "family_sizes": [1, 1], "signal_kinds": ["blob", "blob"],
                 "sigma": 0.0, "missing_rate": 0.0,
                 "height": 16, "width": 16, "depth": 3},
        "backbone": {"hidden_dim": 16, "num_layers": 1, "num_heads": 2,
                     "patch_size": 8, "image_side": 16},
    }
    config = write_config(tmp_path, doc, "blob.json")
    data = tmp_path / "data"
    assert cli.main(["gen-data", "--config", config, "--out", str(data)]) == 0
    rulebook = json.loads((data / "rulebook.json").read_text())
    rows = dg.read_manifest(data / "train.jsonl", 2)
    score_rows = dg.rulebook_scores(rulebook, rows, data / "volumes")
    ev.write_scores(tmp_path / "rb-scores.jsonl", score_rows)
    out = tmp_path / "rb-eval"
    assert cli.main(["eval", "--scores", str(tmp_path / "rb-scores.jsonl"),
                     "--out", str(out), "--bootstrap-iters", "0"]) == 0
    for line in (out / "eval.csv").read_text().splitlines()[1:]:
        assert float(line.split(",")[1]) == 1.0


def test_dca_grid_endpoints_and_oracle(pipeline, tmp_path):
    out = tmp_path / "dca"
    scores_path = tmp_path / "scores.jsonl"
    rng = np.random.default_rng(0)
    rows = [{"sample_id": f"s{i}", "task": 0,
             "score": float(rng.random()), "label": int(rng.integers(0, 2))}
            for i in range(50)]
    ev.write_scores(scores_path, rows)
    assert cli.main(["dca", "--scores", str(scores_path), "--out", str(out)]) == 0
    text = (out / "dca-task0.csv").read_text()
    body = text.splitlines()[1:]
    assert len(body) == 76
    assert body[0].startswith("0.05,")
    assert body[-1].startswith("0.8,")
    probs = np.array([r["score"] for r in rows])
    labels = np.array([r["label"] for r in rows])
    assert text == ev.dca_csv(ev.dca_curve(probs, labels))


def test_dca_all_zero_scores_never_call_positive(tmp_path):
    rows = [{"sample_id": f"s{i}", "task": 1, "score": 0.0, "label": i % 2}
            for i in range(10)]
    ev.write_scores(tmp_path / "s.jsonl", rows)
    out = tmp_path / "dca"
    assert cli.main(["dca", "--scores", str(tmp_path / "s.jsonl"),
                     "--out", str(out)]) == 0
    for line in (out / "dca-task1.csv").read_text().splitlines()[1:]:
        assert float(line.split(",")[1]) == 0.0


def test_dca_rejects_uncalibrated_scores(tmp_path, capsys):
    rows = [{"sample_id": "a", "task": 0, "score": 3.2, "label": 1},
            {"sample_id": "b", "task": 0, "score": -1.0, "label": 0}]
    ev.write_scores(tmp_path / "s.jsonl", rows)
    assert cli.main(["dca", "--scores", str(tmp_path / "s.jsonl"),
                     "--out", str(tmp_path / "o")]) == 2
    assert "probabilities" in capsys.readouterr().err


def test_dca_flag_validation(tmp_path):
    ev.write_scores(tmp_path / "s.jsonl",
                    [{"sample_id": "a", "task": 0, "score": 0.5, "label": 1}])
    base = ["dca", "--scores", str(tmp_path / "s.jsonl"), "--out", str(tmp_path / "o")]
    assert cli.main(base + ["--t-lo", "0.9", "--t-hi", "0.5"]) == 1
    assert cli.main(base + ["--steps", "1"]) == 1


def test_analyze_outputs_and_determinism(pipeline, tmp_path):
    out = tmp_path / "an"
    assert cli.main(["analyze", "--checkpoint", str(pipeline["ckpt"]),
                     "--out", str(out)]) == 0
    report = json.loads((out / "cluster_report.json").read_text())
    assert 2 <= report["k_star"] <= 4
    assert len(report["labels"]) == 4
    pca = (out / "pca.csv").read_text().splitlines()
    assert pca[0] == "task_id,x,y" and len(pca) == 5
    assert (out / "mds.csv").read_text().splitlines()[0] == "task_id,x,y"
    again = tmp_path / "again"
    assert cli.main(["analyze", "--checkpoint", str(pipeline["ckpt"]),
                     "--out", str(again)]) == 0
    assert tree_bytes(again) == tree_bytes(out)


def test_analyze_zero_init_checkpoint_reports_degenerate_vectors(tmp_path, capsys):
    from hyperlora import training as tr

    doc = json.loads(json.dumps(TINY))
    doc["hyperlora"]["head_init"] = "zero"
    cfg = cf.parse_config(doc)
    bundle = tr.build_model(cfg.backbone, cfg.hyperlora, cfg.data.n_tasks,
                            cfg.train.variant, cfg.seed)
    path = tmp_path / "zero.ckpt"
    ck.save_checkpoint(path, bundle.store, cf.effective_config(cfg), {}, epoch=-1)
    code = cli.main(["analyze", "--checkpoint", str(path), "--out",
                     str(tmp_path / "o"), "--mode", "materialized"])
    assert code == 2
    assert "zero-norm" in capsys.readouterr().err


def test_analyze_rejects_ew_checkpoints(pipeline, tmp_path):
    doc = json.loads(json.dumps(TINY))
    doc["train"]["variant"] = "ew_baseline"
    config = write_config(tmp_path, doc, "ew.json")
    out = tmp_path / "ew"
    assert cli.main(["train", "--config", config, "--data",
                     str(pipeline["data"]), "--out", str(out)]) == 0
    assert cli.main(["analyze", "--checkpoint", str(out / "model.ckpt"),
                     "--out", str(tmp_path / "a")]) == 1


def test_param_audit_prints_reference_numbers(pipeline, capsys):
    assert cli.main(["param-audit", "--config", pipeline["config"]]) == 0
    out = capsys.readouterr().out
    assert "1572864" in out
    assert "37748736" in out
    assert "61440" in out
    assert "72" in out


def test_audit_closed_forms_scale_as_documented():
    from hyperlora import hypernet as hn

    base = hn.param_count_lora(64, 768, 16)
    assert hn.param_count_lora(64, 768, 32) == 2 * base
    assert hn.param_count_full(64, 1536) == 4 * hn.param_count_full(64, 768)


def test_usage_errors_exit_one(tmp_path):
    assert cli.main([]) == 1
    assert cli.main(["no-such-command"]) == 1
    assert cli.main(["eval", "--out", str(tmp_path)]) == 1  # no source
    assert cli.main(["eval", "--checkpoint", "a", "--scores", "b",
                     "--out", str(tmp_path)]) == 1  # both sources
    assert cli.main(["--help"]) == 0


def test_console_entry_raises_systemexit_with_status(monkeypatch):
    monkeypatch.setattr(sys, "argv", ["hyperlora"])
    with pytest.raises(SystemExit) as info:
        cli.entry()
    assert info.value.code == 1  # bare invocation is a usage error


def test_thread_cap_garbage_exits_one(pipeline, monkeypatch, capsys):
    monkeypatch.setenv("HYPERLORA_THREADS", "many")
    assert cli.main(["param-audit", "--config", pipeline["config"]]) == 1
    assert "HYPERLORA_THREADS" in capsys.readouterr().err
