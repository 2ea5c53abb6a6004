import json

import pytest
from pydantic import ValidationError

from runtime.models import CMA_CSV_HEADER, EVAL_CSV_HEADER, EVAL_CSV_KEYS, EvalReport
from runtime.settings import (
    CLISettings,
    ConfigError,
    TrainConfig,
    ablation_weights,
    build_config,
    env_overrides,
    read_config_file,
    resolve_config,
)
from runtime.versioning import get_build_git_sha, get_repo_version, run_meta


def test_defaults():
    cfg = TrainConfig()
    assert (cfg.lambda_ccl, cfg.lambda_scl, cfg.tau) == (0.1, 0.1, 0.5)
    assert (cfg.learning_rate, cfg.max_len, cfg.teacher_forcing_rate) == (1e-4, 15, 1.0)
    assert (cfg.d_emb, cfg.k_c, cfg.k_s, cfg.style_layers) == (300, 512, 768, 4)
    assert cfg.normalize_features is True and cfg.batch_mean_loss is False


def test_validation_errors():
    with pytest.raises(ConfigError):
        build_config({"tau": 0.0})
    with pytest.raises(ConfigError):
        build_config({"lambda_ccl": -1.0})
    with pytest.raises(ConfigError):
        build_config({"k_s": 10, "style_heads": 4})
    with pytest.raises(ConfigError):
        build_config({"no_such_key": 1})


@pytest.mark.parametrize(
    "name,expected",
    [("full", (0.1, 0.1)), ("no-ccl", (0.0, 0.1)), ("no-scl", (0.1, 0.0)), ("no-both", (0.0, 0.0))],
)
def test_ablation_mapping(name, expected):
    assert ablation_weights(name) == expected
    cfg = TrainConfig().with_ablation(name)
    assert (cfg.lambda_ccl, cfg.lambda_scl) == expected


def test_unknown_ablation():
    with pytest.raises(ConfigError):
        ablation_weights("no-everything")


def test_config_files(tmp_path):
    toml = tmp_path / "c.toml"
    toml.write_text("[train]\nbatch_size = 8\ntau = 0.25\n", encoding="utf-8")
    assert read_config_file(toml) == {"batch_size": 8, "tau": 0.25}
    js = tmp_path / "c.json"
    js.write_text(json.dumps({"epochs": 3}), encoding="utf-8")
    assert read_config_file(js) == {"epochs": 3}
    bad = tmp_path / "bad.toml"
    bad.write_text("batch_size = = 1\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        read_config_file(bad)
    with pytest.raises(FileNotFoundError):
        read_config_file(tmp_path / "none.toml")


def test_layer_precedence(tmp_path, monkeypatch):
    p = tmp_path / "c.toml"
    p.write_text("batch_size = 8\nepochs = 3\nseed = 1\n", encoding="utf-8")
    monkeypatch.setenv("EGPG_EPOCHS", "5")
    monkeypatch.setenv("EGPG_NORMALIZE_FEATURES", "false")
    cfg = resolve_config(p, {"seed": 9, "batch_size": None}, ablation="no-scl")
    assert cfg.batch_size == 8
    assert cfg.epochs == 5
    assert cfg.seed == 9
    assert cfg.normalize_features is False
    assert (cfg.lambda_ccl, cfg.lambda_scl) == (0.1, 0.0)


def test_env_overrides_parse_by_field_type(monkeypatch, capsys):
    monkeypatch.setenv("EGPG_TAU", "0.3")
    monkeypatch.setenv("EGPG_DECODER_HIDDEN", "64")
    monkeypatch.setenv("EGPG_BATCH_SIZE", "not-a-number")
    capsys.readouterr()
    got = env_overrides()
    assert got["tau"] == 0.3
    assert got["decoder_hidden"] == 64
    assert got["batch_size"] == 32
    err = capsys.readouterr().err
    assert "WARN_ENV key=EGPG_BATCH_SIZE value=not-a-number using=32" in err
    assert "EGPG_TAU" not in err


def test_malformed_env_values_warn_and_fall_back(monkeypatch, capsys):
    monkeypatch.setenv("EGPG_TAU", "abc")
    monkeypatch.setenv("EGPG_NORMALIZE_FEATURES", "maybe")
    capsys.readouterr()
    got = env_overrides({"tau": 0.25})
    assert got["tau"] == 0.25
    assert got["normalize_features"] is True
    err = capsys.readouterr().err.splitlines()
    assert sorted(ln.split()[1] for ln in err if ln.startswith("WARN_ENV")) == [
        "key=EGPG_NORMALIZE_FEATURES",
        "key=EGPG_TAU",
    ]


def test_cli_settings_from_env(monkeypatch):
    monkeypatch.setenv("EGPG_WORKERS", "0")
    monkeypatch.setenv("EGPG_EVAL_CSV", "runs.csv")
    s = CLISettings.from_env()
    assert s.workers == 1
    assert s.eval_csv == "runs.csv"


def test_csv_headers_pinned():
    assert EVAL_CSV_KEYS == [
        "model_variant", "bleu", "rouge1", "rouge2", "rougeL", "meteor", "ed_e", "ed_r", "cma", "n_items", "repo_version",
    ]
    assert EVAL_CSV_HEADER == ",".join(EVAL_CSV_KEYS)
    assert CMA_CSV_HEADER == "model_variant,cma,m"


def test_run_meta_env(monkeypatch):
    monkeypatch.setenv("EGPG_BUILD_GIT_SHA", "abc123")
    monkeypatch.setenv("EGPG_REPO_VERSION", "9.9.9")
    assert get_build_git_sha() == "abc123"
    assert get_repo_version() == "9.9.9"
    assert run_meta().repo_version == "9.9.9"


def test_eval_report_bounds():
    ok = dict(bleu=50.0, rouge1=0.5, rouge2=0.5, rougeL=0.5, meteor=0.5, ed_e=1.0, ed_r=1.0, counts={"items": 1})
    r = EvalReport.with_meta(**ok)
    assert r.model_dump(by_alias=True)["schema"] == "egpg.eval_report.v1"
    with pytest.raises(ValidationError):
        EvalReport.with_meta(**{**ok, "bleu": 101.0})
