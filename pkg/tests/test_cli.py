import hashlib
import json
import logging
import re

import numpy as np
import pytest

from hdvoc import cli
from hdvoc.audio.wav import read_wav
from hdvoc.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, REPORT_FIELDS, aggregate, load_bundles, main, read_input_mel
from hdvoc.config import RunConfig, desk_config, load_config, full_config, save_config
from hdvoc.corpus import CorpusConfig
from hdvoc.errors import ConfigError
from hdvoc.hierarchy import generate, make_spec
from hdvoc.nn import EpsilonNetConfig
from hdvoc.nn.checkpoint import load_checkpoint

TINY = EpsilonNetConfig(layers=2, blocks=1, residual_channels=4, step_embed_dim=8, step_hidden=8)


def tiny_config(tmp_path, steps=(3, 3), **training):
    cfg = desk_config(seed=3)
    cfg.hierarchy = make_spec((8000, 2000), TINY, cfg.hierarchy.mel)
    cfg.corpus = CorpusConfig(n_utterances=4, n_heldout=2, duration_s=0.3)
    cfg.training.steps = list(steps)
    cfg.training.segment_frames = 8
    cfg.training.batch_size = 2
    for k, v in training.items():
        setattr(cfg.training, k, v)
    path = tmp_path / "run.json"
    save_config(cfg, path)
    return path


def digest(root):
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    path = tiny_config(root)
    assert main(["make-corpus", "--config", str(path)]) == EXIT_OK
    assert main(["train", "--config", str(path)]) == EXIT_OK
    return path


# -- config ---------------------------------------------------------------------------------------


def test_presets_round_trip(tmp_path):
    for name in ("desk", "full"):
        out = tmp_path / f"{name}.json"
        assert main(["make-config", "--preset", name, "--out", str(out)]) == EXIT_OK
        assert load_config(out).to_dict() == load_config(out).to_dict()
    full = json.loads((tmp_path / "full.json").read_text())
    assert full["training"]["batch_size"] == 16 and full["training"]["learning_rate"] == 2e-4
    assert full_config().hierarchy.rates == (24000, 6000)


@pytest.mark.parametrize(
    "patch",
    [
        lambda d: d.update(bogus=1),
        lambda d: d["training"].update(bogus=1),
        lambda d: d["hierarchy"]["nets"][0].update(bogus=1),
        lambda d: d["hierarchy"].update(rates=[8000, 3000]),
        lambda d: d["training"].update(steps=[10]),
        lambda d: d["corpus"].update(sample_rate=16000),
        lambda d: d.update(seed=-1),
    ],
)
def test_invalid_config_rejected(tmp_path, patch):
    d = desk_config().to_dict()
    patch(d)
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(d))
    assert main(["make-corpus", "--config", str(path)]) == EXIT_USAGE
    assert not (tmp_path / "corpus").exists()


def test_usage_errors(tmp_path):
    assert main([]) == EXIT_USAGE
    assert main(["train"]) == EXIT_USAGE
    (tmp_path / "x.json").write_text("{not json")
    assert main(["train", "--config", str(tmp_path / "x.json")]) == EXIT_USAGE


# -- make-corpus ------------------------------------------------------------------------------------


def test_make_corpus_default_count_and_determinism(tmp_path):
    path = tmp_path / "desk.json"
    save_config(desk_config(), path)
    for name in ("a", "b"):
        assert main(["make-corpus", "--config", str(path), "--seed", "7", "--out", str(tmp_path / name)]) == EXIT_OK
    a, b = tmp_path / "a", tmp_path / "b"
    assert len(list(a.glob("*.wav"))) == 200
    assert len((a / "manifest.jsonl").read_text().splitlines()) == 200
    assert digest(a) == digest(b)


def test_make_corpus_unwritable(tmp_path):
    path = tiny_config(tmp_path)
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["make-corpus", "--config", str(path), "--out", str(blocker / "corpus")]) == EXIT_RUNTIME
    assert not (blocker / "corpus" / "manifest.jsonl").exists()


# -- train --------------------------------------------------------------------------------------------


def test_train_missing_corpus(tmp_path):
    assert main(["train", "--config", str(tiny_config(tmp_path))]) == EXIT_RUNTIME


def test_train_writes_checkpoints(trained_run):
    cfg = load_config(trained_run)
    for level in range(2):
        state, meta = load_checkpoint(cfg.checkpoint_path(level))
        assert state.step == 3 and meta["rate"] == cfg.hierarchy.rates[level]
    assert cfg.checkpoint_path(1).name == "level1_2000hz.ckpt"


def test_train_loss_decreases_and_logs(tmp_path, caplog):
    path = tiny_config(tmp_path, steps=(300, 300), learning_rate=1e-2, log_every=50)
    assert main(["make-corpus", "--config", str(path)]) == EXIT_OK
    with caplog.at_level(logging.INFO, logger="hdvoc"):
        assert main(["train", "--config", str(path)]) == EXIT_OK
    for level in (0, 1):
        losses = [float(m.group(1)) for r in caplog.records if (m := re.match(rf"step=\d+ level={level} loss=(\S+)", r.getMessage()))]
        assert len(losses) == 6 and losses[-1] < losses[0]


def test_resume_matches_straight_run(tmp_path, monkeypatch):
    straight, resumed = tmp_path / "s", tmp_path / "r"
    for d in (straight, resumed):
        d.mkdir()
    paths = [tiny_config(d, steps=(20, 20), checkpoint_every=10, final_lr_fraction=0.1) for d in (straight, resumed)]
    for path in paths:
        assert main(["make-corpus", "--config", str(path)]) == EXIT_OK
    assert main(["train", "--config", str(paths[0])]) == EXIT_OK

    real_save = cli.save_checkpoint

    def save_then_crash(*args, **kwargs):
        real_save(*args, **kwargs)
        raise KeyboardInterrupt

    monkeypatch.setattr(cli, "save_checkpoint", save_then_crash)
    with pytest.raises(KeyboardInterrupt):
        main(["train", "--config", str(paths[1])])
    monkeypatch.undo()
    b = load_config(paths[1])
    assert load_checkpoint(b.checkpoint_path(0))[0].step == 10 and not b.checkpoint_path(1).exists()
    assert main(["train", "--config", str(paths[1])]) == EXIT_OK

    a = load_config(paths[0])
    for level in range(2):
        sa, _ = load_checkpoint(a.checkpoint_path(level))
        sb, _ = load_checkpoint(b.checkpoint_path(level))
        assert sa.step == sb.step == 20
        for name in sa.net.params:
            np.testing.assert_array_equal(sa.net.params[name], sb.net.params[name])


# -- generate ----------------------------------------------------------------------------------------


def test_generate_deterministic_and_length(trained_run, tmp_path):
    cfg = load_config(trained_run)
    src = cfg.path("corpus_dir") / "heldout" / "utt0000.wav"
    outs = [tmp_path / "a.wav", tmp_path / "b.wav"]
    for out in outs:
        assert main(["generate", "--config", str(trained_run), "--input", str(src), "--out", str(out)]) == EXIT_OK
    assert outs[0].read_bytes() == outs[1].read_bytes()
    y = read_wav(outs[0])
    assert y.sample_rate == 8000 and len(y) == (2400 // 100) * 100


def test_generate_from_mel_file_and_ablation(trained_run, tmp_path):
    cfg = load_config(trained_run)
    src = cfg.path("corpus_dir") / "heldout" / "utt0001.wav"
    mel = read_input_mel(cfg, src)
    np.save(tmp_path / "m.npy", mel.values)
    args = ["generate", "--config", str(trained_run), "--input", str(tmp_path / "m.npy")]
    assert main(args + ["--out", str(tmp_path / "plain.wav")]) == EXIT_OK
    assert main(args + ["--out", str(tmp_path / "abl.wav"), "--ablate", "zero_mel"]) == EXIT_OK
    expected = generate(cfg.hierarchy, load_bundles(cfg), mel, np.random.default_rng([cfg.seed]), ablate="zero_mel")
    np.testing.assert_array_equal(read_wav(tmp_path / "abl.wav").samples, expected.samples.astype(np.float32))
    assert read_wav(tmp_path / "plain.wav").samples.tolist() != read_wav(tmp_path / "abl.wav").samples.tolist()


def test_generate_checkpoint_mismatch(trained_run, tmp_path):
    cfg = load_config(trained_run)
    other = RunConfig.from_dict(cfg.to_dict(), base_dir=cfg.base_dir)
    wider = EpsilonNetConfig(**{**TINY.to_dict(), "residual_channels": 6})
    other.hierarchy = make_spec((8000, 2000), wider, cfg.hierarchy.mel)
    path = tmp_path / "other.json"
    save_config(other, path)
    src = cfg.path("corpus_dir") / "heldout" / "utt0000.wav"
    ckpts = cfg.path("checkpoint_dir")
    code = main(["generate", "--config", str(path), "--checkpoints", str(ckpts), "--input", str(src), "--out", str(tmp_path / "y.wav")])
    assert code == EXIT_USAGE


# -- eval ---------------------------------------------------------------------------------------------------


def test_eval_identical_is_zero(trained_run, tmp_path):
    cfg = load_config(trained_run)
    ref = cfg.path("corpus_dir") / "heldout"
    hyp = tmp_path / "hyp"
    hyp.mkdir()
    for p in ref.glob("*.wav"):
        (hyp / p.name).write_bytes(p.read_bytes())
    assert main(["eval", "--config", str(trained_run), "--ref", str(ref), "--hyp", str(hyp)]) == EXIT_OK
    report = json.loads((hyp / "report.json").read_text())
    for row in report["files"].values():
        assert set(row) == set(REPORT_FIELDS)
        assert row["pmae_hz"] == row["vde"] == row["mr_stft"] == row["mcd_db"] == 0.0
    assert "file=ALL" in (hyp / "report.txt").read_text()


def test_eval_generated_aggregate(trained_run, tmp_path):
    cfg = load_config(trained_run)
    ref = cfg.path("corpus_dir") / "heldout"
    hyp = tmp_path / "gen"
    assert main(["generate", "--config", str(trained_run), "--input", str(ref), "--out", str(hyp)]) == EXIT_OK
    assert main(["eval", "--config", str(trained_run), "--ref", str(ref), "--hyp", str(hyp)]) == EXIT_OK
    report = json.loads((hyp / "report.json").read_text())
    assert set(report["aggregate"]) == set(REPORT_FIELDS)
    for key in REPORT_FIELDS:
        vals = [row[key] for row in report["files"].values()]
        vals = [v for v in vals if v == v]
        if vals:
            assert report["aggregate"][key] == pytest.approx(sum(vals) / len(vals), rel=1e-12)
    assert all(row["rtf"] > 0 for row in report["files"].values())


def test_eval_unpaired(trained_run, tmp_path):
    cfg = load_config(trained_run)
    ref = cfg.path("corpus_dir") / "heldout"
    hyp = tmp_path / "hyp"
    hyp.mkdir()
    (hyp / "utt0000.wav").write_bytes((ref / "utt0000.wav").read_bytes())
    assert main(["eval", "--config", str(trained_run), "--ref", str(ref), "--hyp", str(hyp)]) == EXIT_RUNTIME


def test_aggregate_skips_undefined():
    rows = {"a": dict.fromkeys(REPORT_FIELDS, 1.0), "b": {**dict.fromkeys(REPORT_FIELDS, 3.0), "pmae_hz": float("nan")}}
    agg = aggregate(rows)
    assert agg["pmae_hz"] == 1.0 and agg["vde"] == 2.0


def test_lr_decay_schedule():
    tc = desk_config().training
    tc.final_lr_fraction = 0.1
    assert tc.lr_at(0, 101) == tc.learning_rate
    assert tc.lr_at(100, 101) == pytest.approx(0.1 * tc.learning_rate)
    assert tc.lr_at(50, 101) == pytest.approx(0.55 * tc.learning_rate)
    d = desk_config().to_dict()
    d["training"]["final_lr_fraction"] = 0.0
    with pytest.raises(ConfigError):
        RunConfig.from_dict(d)
