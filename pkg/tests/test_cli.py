import json
import logging

import numpy as np
import pytest

from sincser import cli, dsp_core, models

SMALL = {
    "epochs": 1,
    "synth": {"num_utterances": 60},
    "model": {"num_filters": 4, "kernel_length": 101, "lstm_hidden": 8, "acoustic_vec_dim": 8},
    "paths": {"data_dir": "data", "out_dir": "run"},
}


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "cfg.json").write_text(json.dumps(SMALL))
    return tmp_path


def run(*argv):
    return cli.main(list(argv))


def _error(capsys):
    err = capsys.readouterr().err.strip().splitlines()[-1]
    return json.loads(err)


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------

def test_defaults_resolve():
    cfg = cli.resolve_config()
    assert cfg["model"]["acoustic_variant"] == "sinc_lstm"
    assert cfg["ded"]["lambda_history"] == 0.3
    assert cfg["synth"]["num_utterances"] == 2000
    sec = cli.build_sections(cfg)
    assert sec["synth"].class_bands == ((400.0, 900.0), (1200.0, 1900.0), (2500.0, 3400.0), (4200.0, 5500.0))


def test_overrides_and_seed(workdir):
    cfg = cli.resolve_config("cfg.json", ["model.acoustic_variant=\"cnn\"", "ded.beam_width=4",
                                          "optimizer.lr=0.01"], seed=5)
    assert cfg["model"]["acoustic_variant"] == "cnn"
    assert cfg["ded"]["beam_width"] == 4
    assert cfg["optimizer"]["lr"] == 0.01
    for section in ("model", "chunk", "optimizer", "synth"):
        assert cfg[section]["seed"] == 5
    bare = cli.resolve_config(None, ["model.acoustic_variant=cnn"])
    assert bare["model"]["acoustic_variant"] == "cnn"


@pytest.mark.parametrize("override", ["model.bogus=1", "nosuch.key=1", "model=3",
                                      "model.acoustic_variant=\"rnn\"", "chunk.chunk_ms=100",
                                      "eval.split=\"test\"", "noequals"])
def test_bad_config_rejected(override):
    with pytest.raises(cli.ConfigError):
        cli.resolve_config(None, [override])


def test_config_hash_stable():
    a = cli.config_hash(cli.resolve_config())
    b = cli.config_hash(cli.resolve_config())
    c = cli.config_hash(cli.resolve_config(seed=1))
    assert a == b != c
    assert len(a) == 16


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def test_pipeline(workdir):
    assert run("synth", "--config", "cfg.json") == 0
    assert (workdir / "data" / "manifest.csv").exists()
    assert len(list((workdir / "data" / "wav").glob("*.wav"))) == 60
    assert run("train", "--config", "cfg.json") == 0
    log_lines = (workdir / "run" / "train_log.jsonl").read_text().strip().splitlines()
    recs = [json.loads(s) for s in log_lines]
    assert [r["split"] for r in recs] == ["train", "val"]
    assert run("eval", "--config", "cfg.json") == 0
    m = json.loads((workdir / "run" / "metrics.json").read_text())
    assert 0 <= m["wa"] <= 1 and 0 <= m["ua"] <= 1
    assert m["ser"] == pytest.approx(1 - m["wa"])
    assert np.array(m["confusion"]).shape == (4, 4)
    assert np.sum(m["confusion"]) == m["count"]
    h = cli.config_hash(cli.resolve_config("cfg.json"))
    assert m["config_hash"] == h
    assert all(r["config_hash"] == h for r in recs)
    assert run("decode", "--config", "cfg.json") == 0
    dec = [json.loads(s) for s in (workdir / "run" / "decoded.jsonl").read_text().splitlines()]
    assert len(dec) == m["count"] and all("decoded_label" in r and r["config_hash"] == h for r in dec)
    prov = json.loads((workdir / "run" / "provenance.json").read_text())
    assert set(prov["files"]) >= {"model.npz", "train_log.jsonl", "metrics.json", "decoded.jsonl"}
    assert models.read_manifest_from_checkpoint(workdir / "run" / "model.npz")["config_hash"] == h


def test_decode_collapses_to_argmax(workdir):
    rng = np.random.default_rng(0)
    lines = []
    for t in range(9):
        lines.append(json.dumps({"dialog_id": f"d{t // 3}", "utterance_id": f"u{t}",
                                 "posterior": rng.dirichlet(np.ones(4)).tolist()}))
    (workdir / "post.jsonl").write_text("\n".join(lines) + "\n")
    assert run("decode", "--config", "cfg.json", "--posteriors", "post.jsonl",
               "--decoded", "dec.jsonl", "--set", "ded.lambda_history=0",
               "--set", "ded.shift_penalty=0") == 0
    out = [json.loads(s) for s in (workdir / "dec.jsonl").read_text().splitlines()]
    for rec, src in zip(out, lines):
        assert rec["decoded_label"] == int(np.argmax(json.loads(src)["posterior"]))
    assert not (workdir / "run" / "decode_metrics.json").exists()


def test_inspect_fresh_sinc_model(workdir):
    cfg = cli.resolve_config("cfg.json")
    model = models.build_model(cli.build_sections(cfg)["model"])
    models.save_checkpoint(model, workdir / "fresh.npz")
    assert run("inspect-filters", "--config", "cfg.json", "--checkpoint", "fresh.npz",
               "--out", "insp") == 0
    lines = (workdir / "insp" / "filters" / "cutoffs.csv").read_text().strip().splitlines()
    assert lines[0] == "filter_index,f1_hz,f2_hz"
    got = np.array([[float(v) for v in s.split(",")[1:]] for s in lines[1:]])
    # independent mel grid
    mel = lambda f: 2595 * np.log10(1 + f / 700)
    inv = lambda m: 700 * (10 ** (m / 2595) - 1)
    edges = inv(np.linspace(mel(30.0), mel(8000.0), 5))
    np.testing.assert_allclose(got[:, 0], edges[:-1], atol=1e-6)
    np.testing.assert_allclose(got[:, 1], edges[1:], atol=1e-6)
    resp = (workdir / "insp" / "filters" / "response_000.csv").read_text().strip().splitlines()
    assert resp[0] == "freq_hz,magnitude" and len(resp) == 1025
    assert len(list((workdir / "insp" / "filters").glob("response_*.csv"))) == 4


def test_inspect_cnn_model(workdir):
    model = models.build_model(models.ModelConfig(acoustic_variant="cnn", num_filters=3))
    models.save_checkpoint(model, workdir / "cnn.npz")
    assert run("inspect-filters", "--config", "cfg.json", "--checkpoint", "cnn.npz") == 0
    files = sorted(p.name for p in (workdir / "run" / "filters").glob("*.csv"))
    assert files == ["response_000.csv", "response_001.csv", "response_002.csv"]


def test_bad_key_is_one_line_error(workdir, capsys):
    assert run("train", "--config", "cfg.json", "--set", "model.bogus=1") == 2
    err = _error(capsys)
    assert err["error"] == "ConfigError" and err["command"] == "train"
    assert "model.bogus" in err["message"]


def test_missing_checkpoint(workdir, capsys):
    assert run("eval", "--config", "cfg.json", "--checkpoint", "nope.npz") == 2
    assert _error(capsys)["error"] == "FileNotFoundError"


def test_schema_violation(workdir, capsys):
    (workdir / "bad.jsonl").write_text('{"dialog_id": "d", "posterior": [1, 0, 0, 0]}\n')
    assert run("decode", "--config", "cfg.json", "--posteriors", "bad.jsonl") == 2
    assert "utterance_id" in _error(capsys)["message"]


def test_log_level_from_env(workdir, monkeypatch):
    monkeypatch.setenv("SINCSER_LOG", "debug")
    run("synth", "--config", "cfg.json", "--set", "synth.num_utterances=5")
    assert logging.getLogger("sincser").level == logging.DEBUG
    monkeypatch.setenv("SINCSER_LOG", "warning")
    run("synth", "--config", "cfg.json", "--set", "synth.num_utterances=5")
    assert logging.getLogger("sincser").level == logging.WARNING


def test_mel_grid_oracle_matches_library():
    edges = [dsp_core.constrain_cutoffs(p) for p in dsp_core.mel_spaced_init(4)]
    assert edges[0][0] == pytest.approx(30.0) and edges[-1][1] == pytest.approx(8000.0)
