"""Config parsing, digests, CLI verbs, exit codes, results files."""
import json
import os

import numpy as np
import pytest

from protune.cli import main
from protune.config import ConfigError, load_config, parse_config
from protune.experiments import run_tune, worker_count
from protune.results import MetricsRecord, append_records, read_records, summary_table, write_report


# ---------------------------------------------------------------------------
# parsing


def test_empty_config_uses_defaults():
    cfg = parse_config({})
    assert cfg.backbone.family == "cnn"
    assert cfg.paradigms == ("protune",)
    assert cfg.seeds == (0,)
    assert cfg.train.epochs == 5


def test_unknown_keys_rejected_with_path():
    with pytest.raises(ConfigError, match="unknown key epochz"):
        parse_config({"epochz": 3})
    with pytest.raises(ConfigError, match="unknown key train.lrr"):
        parse_config({"train": {"lrr": 0.1}})
    with pytest.raises(ConfigError, match="unknown key downstream.corruption.level"):
        parse_config({"downstream": {"corruption": {"kind": "blur", "level": 2}}})


def test_type_errors():
    with pytest.raises(ConfigError, match="train.lr"):
        parse_config({"train": {"lr": "fast"}})
    with pytest.raises(ConfigError, match="train.epochs"):
        parse_config({"train": {"epochs": 2.5}})
    with pytest.raises(ConfigError, match="train.epochs"):
        parse_config({"train": {"epochs": True}})
    with pytest.raises(ConfigError, match="seeds"):
        parse_config({"seeds": [0, 0]})
    with pytest.raises(ConfigError, match="seeds"):
        parse_config({"seeds": [-1]})


def test_range_errors():
    with pytest.raises(ConfigError, match="source.shift"):
        parse_config({"source": {"shift": 1.5}})
    with pytest.raises(ConfigError, match="severity"):
        parse_config({"downstream": {"corruption": {"kind": "blur", "severity": 6}}})
    with pytest.raises(ConfigError, match="corruption.kind"):
        parse_config({"downstream": {"corruption": {"kind": "rain", "severity": 1}}})
    with pytest.raises(ConfigError, match="few_shot_k"):
        parse_config({"downstream": {"few_shot_k": [0]}})
    with pytest.raises(ConfigError, match="warmup_frac"):
        parse_config({"train": {"warmup_frac": 1.0}})
    with pytest.raises(ConfigError, match="clip_norm"):
        parse_config({"train": {"clip_norm": 0.0}})


def test_paradigm_forms():
    assert parse_config({"paradigm": "head"}).paradigms == ("head",)
    assert parse_config({"paradigm": ["head", "partial-2"]}).paradigms == ("head", "partial-2")
    with pytest.raises(ConfigError, match="paradigm"):
        parse_config({"paradigm": "adapters"})
    with pytest.raises(ConfigError, match="paradigm"):
        parse_config({"paradigm": []})


def test_backbone_aliases_and_policy_compat():
    assert parse_config({"backbone": "tiny_vit"}).backbone.family == "vit"
    with pytest.raises(ConfigError, match="tiny_cnn"):
        parse_config({"backbone": "resnet50"})
    with pytest.raises(ConfigError, match="transformer-only"):
        parse_config({"backbone": "tiny_cnn", "prompt": {"policy": "U5"}})
    parse_config({"backbone": "tiny_vit", "prompt": {"policy": "U5"}})


def test_backbone_head_follows_source_classes():
    cfg = parse_config({"source": {"num_classes": 6}})
    assert cfg.backbone.num_classes == 6


def test_few_shot_scalar_promoted():
    cfg = parse_config({"downstream": {"few_shot_k": 4}})
    assert cfg.downstream.few_shot_k == (4,)


# ---------------------------------------------------------------------------
# digests


def test_digest_stability_and_sensitivity():
    a = parse_config({"train": {"lr": 0.05}})
    b = parse_config({"train": {"lr": 0.05}})
    c = parse_config({"train": {"lr": 0.06}})
    assert a.digest() == b.digest()
    assert a.digest() != c.digest()
    assert len(a.digest()) == 16


def test_digest_survives_roundtrip():
    cfg = parse_config({
        "backbone": "tiny_vit",
        "paradigm": ["head", "protune"],
        "downstream": {"few_shot_k": [1, 2], "corruption": {"kind": "blur", "severity": 2}},
        "train": {"clip_norm": 1.0},
        "seeds": [0, 1],
    })
    again = parse_config(cfg.to_dict())
    assert again.digest() == cfg.digest()


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(str(tmp_path / "nope.json"))
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError, match="not valid JSON"):
        load_config(str(bad))


# ---------------------------------------------------------------------------
# results files


def fake_record(seed=0, paradigm="head", setting="-", acc=0.5):
    return MetricsRecord(
        config_digest="cafecafecafecafe",
        seed=seed,
        paradigm=paradigm,
        setting=setting,
        trainable_params=1290,
        accuracy=acc,
        wall_seconds=1.0,
        timestamp="2026-01-01T00:00:00Z",
    )


def test_append_and_read_roundtrip(tmp_path):
    out = str(tmp_path)
    rows = [fake_record(seed=s, acc=0.5 + 0.1 * s) for s in range(3)]
    append_records(out, rows)
    append_records(out, [fake_record(paradigm="protune", acc=0.9)])
    back = read_records(out)
    assert len(back) == 4
    assert back[0].accuracy == 0.5
    assert back[-1].paradigm == "protune"
    with open(os.path.join(out, "results.jsonl")) as fh:
        assert len(fh.readlines()) == 4


def test_read_records_missing(tmp_path):
    with pytest.raises(RuntimeError, match="no results"):
        read_records(str(tmp_path))


def test_summary_table_groups():
    rows = [fake_record(seed=s, paradigm=p, acc=0.4 + s * 0.2)
            for p in ("head", "protune") for s in (0, 1)]
    table = summary_table(rows)
    assert table[0][0] == "paradigm"
    assert len(table) == 3
    head_row = next(r for r in table[1:] if r[0] == "head")
    assert head_row[2] == "2" and head_row[4] == "0.500000"


def test_report_outputs_are_replayable(tmp_path):
    out = str(tmp_path)
    records = [fake_record(seed=s, paradigm=p, setting=f"k={k}", acc=0.3 + 0.1 * k)
               for p in ("head", "protune") for k in (1, 2, 4) for s in (0,)]
    append_records(out, records)
    first = write_report(out)
    blobs = {p: open(p, "rb").read() for p in first if p.endswith(".csv")}
    second = write_report(out)
    assert first == second
    for p, blob in blobs.items():
        assert open(p, "rb").read() == blob
    assert any(p.endswith("fewshot_curve.csv") for p in first)
    assert any(p.endswith("fewshot.png") for p in first)


def test_report_without_fewshot_rows(tmp_path):
    out = str(tmp_path)
    append_records(out, [fake_record()])
    written = write_report(out)
    assert [os.path.basename(p) for p in written] == ["summary.csv"]


# ---------------------------------------------------------------------------
# CLI pipeline on a deliberately small config


PIPELINE_CONFIG = {
    "backbone": {"family": "cnn", "input_hw": 32, "num_classes": 4, "widths": [8, 16]},
    "source": {"num_classes": 4, "n_train": 128, "n_val": 64, "shift": 0.0, "seed": 100},
    "downstream": {"num_classes": 4, "n_train": 96, "n_val": 64, "shift": 0.8, "seed": 200},
    "paradigm": ["head", "protune"],
    "train": {"epochs": 2, "batch_size": 32, "lr": 0.05, "warmup_frac": 0.1,
              "clip_norm": 1.0, "target_accuracy": 0.0},
    "seeds": [0],
}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Pretrained checkpoint plus config file, shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    out = str(root / "runs")
    cfg = {**PIPELINE_CONFIG, "out_dir": out}
    path = root / "exp.json"
    path.write_text(json.dumps(cfg))
    assert main(["pretrain", "--config", str(path)]) == 0
    assert os.path.exists(os.path.join(out, "pretrained_cnn.ptnc"))
    return str(path), out


def test_cli_tune_replay_exact(pipeline, capsys):
    cfg_path, out = pipeline
    assert main(["tune", "--config", cfg_path]) == 0
    assert main(["tune", "--config", cfg_path]) == 0
    capsys.readouterr()
    rows = read_records(out)
    by_key = {}
    for r in rows:
        by_key.setdefault((r.paradigm, r.seed, r.setting), []).append(r)
    assert len(by_key) == 2  # head and protune, one seed
    for key, rs in by_key.items():
        assert len(rs) == 2, key
        assert rs[0].accuracy == rs[1].accuracy, key
        assert rs[0].trainable_params == rs[1].trainable_params, key


def test_cli_report(pipeline, capsys):
    _cfg_path, out = pipeline
    assert main(["report", "--out", out]) == 0
    assert os.path.exists(os.path.join(out, "summary.csv"))
    capsys.readouterr()


def test_cli_ablate_kernel(pipeline, capsys, tmp_path):
    cfg_path, out = pipeline
    assert main(["ablate", "kernel", "--config", cfg_path]) == 0
    capsys.readouterr()
    rows = read_records(out)
    settings = {r.setting for r in rows if r.setting.startswith("kernel=")}
    assert settings == {"kernel=3", "kernel=5", "kernel=7"}


def test_cli_ablate_position_on_cnn_is_config_error(pipeline, capsys):
    cfg_path, _out = pipeline
    assert main(["ablate", "position", "--config", cfg_path]) == 2
    assert "config error" in capsys.readouterr().err


def test_cli_tune_without_checkpoint_fails(tmp_path, capsys):
    cfg = {**PIPELINE_CONFIG, "out_dir": str(tmp_path / "empty")}
    path = tmp_path / "exp.json"
    path.write_text(json.dumps(cfg))
    assert main(["tune", "--config", str(path)]) == 3
    assert "pretrain verb first" in capsys.readouterr().err


def test_cli_pretrain_target_not_reached(tmp_path, capsys):
    cfg = {**PIPELINE_CONFIG,
           "out_dir": str(tmp_path / "runs"),
           "train": {**PIPELINE_CONFIG["train"], "epochs": 1, "target_accuracy": 0.99}}
    path = tmp_path / "exp.json"
    path.write_text(json.dumps(cfg))
    assert main(["pretrain", "--config", str(path)]) == 3
    assert "below the target" in capsys.readouterr().err


def test_cli_bad_config_exit_code(tmp_path, capsys):
    path = tmp_path / "exp.json"
    path.write_text(json.dumps({"train": {"lr": -1}}))
    assert main(["pretrain", "--config", str(path)]) == 2
    capsys.readouterr()


def test_cli_missing_config_file(capsys):
    assert main(["tune", "--config", "/definitely/not/here.json"]) == 2
    capsys.readouterr()


def test_cli_seed_override_validation(tmp_path, capsys):
    path = tmp_path / "exp.json"
    path.write_text(json.dumps(PIPELINE_CONFIG))
    assert main(["tune", "--config", str(path), "--seed", "1,1"]) == 2
    assert main(["tune", "--config", str(path), "--seed", "x"]) == 2
    capsys.readouterr()


# ---------------------------------------------------------------------------
# worker pool


def test_worker_count_env(monkeypatch):
    monkeypatch.delenv("PROTUNE_THREADS", raising=False)
    assert worker_count() == 1
    monkeypatch.setenv("PROTUNE_THREADS", "3")
    assert worker_count() == 3
    monkeypatch.setenv("PROTUNE_THREADS", "zero")
    with pytest.raises(ConfigError):
        worker_count()
    monkeypatch.setenv("PROTUNE_THREADS", "0")
    with pytest.raises(ConfigError):
        worker_count()


def test_parallel_matches_serial(pipeline, monkeypatch):
    cfg_path, _out = pipeline
    cfg = load_config(cfg_path)

    monkeypatch.setenv("PROTUNE_THREADS", "1")
    serial, _ = run_tune(cfg)
    monkeypatch.setenv("PROTUNE_THREADS", "2")
    parallel, _ = run_tune(cfg)

    def essence(rs):
        return [(r.paradigm, r.seed, r.setting, r.trainable_params, r.accuracy) for r in rs]

    assert essence(serial) == essence(parallel)
