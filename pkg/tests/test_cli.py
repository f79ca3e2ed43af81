from __future__ import annotations

import json

import numpy as np
import pytest

from tcpa_vit import formats
from tcpa_vit.cli import EXIT_IO, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, ConfigError, load_config, main, parse_config_text
from tcpa_vit.diagnostics import epsilon_rank, read_features, read_matrix_csv, read_rank_report
from tcpa_vit.model import init_phi
from tcpa_vit.cli import build_configs

TINY = """\
image_h = 8
image_w = 8
patch_h = 4
patch_w = 4
embed_dim = 16
num_layers = 2
num_heads = 2
ffn_dim = 32
batch_size = 4
epochs = 2
"""


@pytest.fixture
def workdir(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(TINY + f"dataset = {tmp_path / 'd.tcpd'}\n")
    rc = main(["gen-synth", "--config", str(cfg), "--classes", "3", "--per-class", "4",
               "--seed", "5", "--out", str(tmp_path / "d.tcpd")])
    assert rc == EXIT_OK
    return tmp_path, cfg


def _train(cfg, run_dir, *extra):
    return main(["train", "--config", str(cfg), "--run-dir", str(run_dir), *extra])


def test_config_parser_comments_and_duplicates():
    assert parse_config_text("# c\na = 1  # x\n\nb=two\n") == {"a": "1", "b": "two"}
    with pytest.raises(ConfigError):
        parse_config_text("a = 1\na = 2\n")
    with pytest.raises(ConfigError):
        parse_config_text("just words\n")


def test_unknown_and_invalid_keys_rejected(tmp_path):
    with pytest.raises(ConfigError):
        load_config(None, ["nonsense=1"])
    with pytest.raises(ConfigError):
        load_config(None, ["mask_mode=sideways"])
    with pytest.raises(ConfigError):
        load_config(None, ["epochs=many"])


def test_train_writes_artifacts_and_eval_matches(workdir, capsys):
    tmp, cfg = workdir
    assert _train(cfg, tmp / "r") == EXIT_OK
    for name in ("config.txt", "backbone.tcpw", "metrics.csv", "phi.tcpw", "summary.json"):
        assert (tmp / "r" / name).exists()
    summary = json.loads((tmp / "r" / "summary.json").read_text())
    capsys.readouterr()
    assert main(["eval", "--config", str(cfg), "--weights", str(tmp / "r")]) == EXIT_OK
    line = capsys.readouterr().out.strip().splitlines()[-1]
    report = json.loads(line)
    assert report["accuracy"] == summary["train_accuracy"]
    assert report["correct"] == round(report["accuracy"] * report["samples"])
    assert report["samples"] == 12


def test_zero_epochs_keeps_initial_phi(workdir):
    tmp, cfg = workdir
    assert _train(cfg, tmp / "r0", "--set", "epochs=0") == EXIT_OK
    saved = formats.load_arrays(tmp / "r0" / "phi.tcpw")
    resolved = load_config(str(cfg), ["epochs=0"])
    model_cfg, tcpa_cfg, train_cfg = build_configs(resolved)
    phi0 = init_phi(model_cfg, tcpa_cfg, 3, train_cfg.seed, "tcpa")
    assert set(saved) == set(phi0)
    for k in phi0:
        assert np.array_equal(saved[k], phi0[k])


def test_training_is_byte_deterministic(workdir):
    tmp, cfg = workdir
    assert _train(cfg, tmp / "a") == EXIT_OK
    assert _train(cfg, tmp / "b") == EXIT_OK
    for name in ("metrics.csv", "phi.tcpw", "backbone.tcpw"):
        assert (tmp / "a" / name).read_bytes() == (tmp / "b" / name).read_bytes()


def test_inspect_exports_consistent_files(workdir):
    tmp, cfg = workdir
    assert _train(cfg, tmp / "r") == EXIT_OK
    out = tmp / "ins"
    assert main(["inspect", "--config", str(cfg), "--weights", str(tmp / "r"), "--out", str(out)]) == EXIT_OK
    layout = json.loads((out / "layout.json").read_text())
    t = layout["extent"]
    assert layout["slots"][0]["start"] == 0 and layout["slots"][-1]["stop"] == t
    for layer in (1, 2):
        mask = read_matrix_csv(out / f"mask_layer{layer}.csv")
        assert mask.shape == (t, t)
        for head in (0, 1):
            attn = read_matrix_csv(out / f"attn_layer{layer}_head{head}.csv")
            assert np.all(attn[mask == 0] == 0.0)
            # post-softmax masking does not renormalise, so rows sum to at most one
            assert np.all(attn >= 0.0) and np.all(attn.sum(axis=1) <= 1.0 + 1e-12)
    rows = read_rank_report(out / "rank_report.csv")
    assert len(rows) == 4
    for r in rows:
        attn = read_matrix_csv(out / f"attn_layer{r['layer']}_head{r['head']}.csv")
        direct = epsilon_rank(attn, r["epsilon"])
        assert r["rank"] == direct.epsilon_rank
        assert r["sigma_max"] == direct.sigma_max
    ids, labels, feats = read_features(out / "features.csv")
    assert list(ids) == list(range(12)) and feats.shape == (12, 16)


def test_mismatched_weights_exit_1(workdir):
    tmp, cfg = workdir
    assert _train(cfg, tmp / "r") == EXIT_OK
    rc = main(["eval", "--config", str(cfg), "--set", "prompt_len=2", "--weights", str(tmp / "r")])
    assert rc == EXIT_USAGE


def test_missing_and_truncated_files_exit_2(workdir):
    tmp, cfg = workdir
    assert main(["eval", "--config", str(cfg), "--weights", str(tmp / "absent")]) == EXIT_IO
    (tmp / "bad.tcpd").write_bytes((tmp / "d.tcpd").read_bytes()[:50])
    assert _train(cfg, tmp / "r", "--set", f"dataset={tmp / 'bad.tcpd'}") == EXIT_IO


def test_divergence_exit_3(workdir):
    tmp, cfg = workdir
    assert _train(cfg, tmp / "r", "--set", "learning_rate=1e300") == EXIT_NUMERIC


def test_bad_arguments_exit_1(workdir):
    tmp, cfg = workdir
    with pytest.raises(SystemExit) as exc:
        main(["train", "--bogus-flag"])
    assert exc.value.code == EXIT_USAGE
    assert main(["gen-synth", "--noise", "-1", "--out", str(tmp / "x.tcpd")]) == EXIT_USAGE
