import json

import numpy as np
import pytest
import yaml

from rarr.cli import ConfigError, RunConfig, apply_overrides, config_keys, main
from rarr.dataset import LABELS, Manifest, ManifestEntry, Modality, load_corpus, write_manifest
from rarr.model import ArchMeta, build_model, load_checkpoint, save_checkpoint
from rarr.signal_core import Waveform, write_wav

TINY = {
    "synth.n_sources_near": 3,
    "synth.n_participants": 2,
    "synth.n_sources_on": 2,
    "synth.source_duration_s": 30,
    "pretrain.epochs": 1,
    "finetune.epochs": 1,
    "scratch.epochs": 1,
}


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return str(path)


# -- config ------------------------------------------------------------------


def test_defaults_and_overrides():
    cfg = apply_overrides(RunConfig(), {"seed": 4, "pretrain.epochs": 7, "finetune.beta_kl": 0.5,
                                        "synth.variance_scale": 0.2})
    assert cfg.seed == 4 and cfg.pretrain.epochs == 7
    assert cfg.finetune.weights.beta_kl == 0.5
    assert cfg.train_config("pretrain").seed == 4
    assert cfg.synth_config().variance_scale == 0.2 and cfg.synth_config().seed == 4
    assert RunConfig().pretrain.epochs == 50
    assert "pretrain.learning_rate" in config_keys()


@pytest.mark.parametrize("bad", [{"pretrain.epoch": 3}, {"colour": 1}, {"synth.seed": 2}])
def test_unknown_keys_rejected(bad):
    with pytest.raises(ConfigError, match="unknown"):
        apply_overrides(RunConfig(), bad)


@pytest.mark.parametrize("bad", [{"pretrain.epochs": 2.5}, {"pretrain.batch_size": 0}, {"seed": "x"}])
def test_bad_values_rejected(bad):
    with pytest.raises(ConfigError):
        apply_overrides(RunConfig(), bad)


def test_flag_beats_config_file(tmp_path, capsys):
    path = tmp_path / "c.yaml"
    path.write_text("seed: 9\nout: " + str(tmp_path / "from-file") + "\n" +
                    "\n".join(f"{k}: {v}" for k, v in TINY.items()))
    assert main(["synth", "--config", str(path), "--seed", "2", "--out", str(tmp_path / "flag")]) == 0
    assert (tmp_path / "flag" / "near_surface.npz").is_file()
    assert not (tmp_path / "from-file").exists()
    assert json.loads((tmp_path / "flag" / "synth_config.json").read_text())["seed"] == 2


def test_unknown_config_key_exits_nonzero(tmp_path, capsys):
    path = tmp_path / "c.yaml"
    path.write_text("pretrain:\n  epocs: 3\n")
    assert main(["synth", "--config", str(path), "--out", str(tmp_path)]) == 1
    assert "pretrain.epocs" in capsys.readouterr().err


# -- curate --------------------------------------------------------------------


def make_manifest(tmp_path, labels=LABELS, seconds=(60, 45, 75)):
    entries = []
    for lab in labels:
        for s, dur in enumerate(seconds):
            name = f"{lab.value}-{s}.wav"
            g = np.random.default_rng(len(entries))
            write_wav(tmp_path / name, Waveform(0.1 * g.standard_normal(dur * 1000), 1000))
            entries.append(ManifestEntry(name, lab, Modality.NEAR_SURFACE_AUDIO, f"{lab.value}-{s}",
                                         search_terms=("ASMR", lab.value)))
    path = tmp_path / "manifest.jsonl"
    write_manifest(Manifest(tuple(entries)), path)
    return str(path)


def test_curate(tmp_path, capsys):
    manifest = make_manifest(tmp_path)
    assert main(["curate", manifest, "--out", str(tmp_path / "a")]) == 0
    out = capsys.readouterr().out
    digest = out.strip().splitlines()[-1]
    assert all(f"{lab.value}" in out for lab in LABELS)
    assert len(load_corpus(tmp_path / "a" / "corpus.npz")) == 4 * 9
    assert main(["curate", manifest, "--out", str(tmp_path / "b")]) == 0
    assert capsys.readouterr().out.strip().splitlines()[-1] == digest


def test_curate_missing_label(tmp_path, capsys):
    manifest = make_manifest(tmp_path, labels=LABELS[:3])
    assert main(["curate", manifest, "--out", str(tmp_path / "a")]) == 1
    assert "medication_refilling" in capsys.readouterr().err


# -- synth / pretrain / finetune / eval ----------------------------------------------


def test_synth_outputs_and_seed(tmp_path, tiny_config, capsys):
    assert main(["synth", "--config", tiny_config, "--out", str(tmp_path / "s0")]) == 0
    assert main(["synth", "--config", tiny_config, "--seed", "1", "--out", str(tmp_path / "s1")]) == 0
    a = load_corpus(tmp_path / "s0" / "near_surface.npz")
    b = load_corpus(tmp_path / "s1" / "near_surface.npz")
    assert a.digest != b.digest
    assert "oracle 1-NN accuracy" in capsys.readouterr().out


def test_synth_zero_variance_oracle(tmp_path, tiny_config, capsys):
    assert main(["synth", "--config", tiny_config, "--out", str(tmp_path)]) == 0
    capsys.readouterr()
    cfg = tmp_path / "zero.yaml"
    cfg.write_text(open(tiny_config).read() + "synth.variance_scale: 0.0\n")
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "z")]) == 0
    line = [x for x in capsys.readouterr().out.splitlines() if "oracle" in x][0]
    assert float(line.rsplit(" ", 1)[1]) >= 0.99


def test_pipeline_commands(tmp_path, tiny_config, capsys):
    d = tmp_path
    assert main(["synth", "--config", tiny_config, "--out", str(d)]) == 0
    assert main(["pretrain", "--config", tiny_config, "--near", str(d / "near_surface.npz"), "--out", str(d)]) == 0
    assert (d / "metrics_pretrain.jsonl").read_text().count("\n") == 3
    for variant in ("RARR", "A2V_VAE", "SimpleVAE"):
        assert main(["finetune", "--config", tiny_config, "--checkpoint", str(d / "pretrained.npz"),
                     "--on", str(d / "on_surface.npz"), "--variant", variant, "--out", str(d)]) == 0
    rarr = load_checkpoint(d / "RARR.npz")
    assert rarr.adapter is not None and rarr.freeze_mask["encoder"]
    ckpts = [str(d / f"{v}.npz") for v in ("pretrained", "RARR", "A2V_VAE", "SimpleVAE")]
    capsys.readouterr()
    assert main(["eval", "--config", tiny_config, "--checkpoint", *ckpts, "--on", str(d / "on_surface.npz"),
                 "--participant", "p1", "--out", str(d / "eval")]) == 0
    table = (d / "eval" / "table.txt").read_text()
    assert table.splitlines()[0].split()[1:] == ["SimpleVAE", "PretrainedVAE", "A2V_VAE", "RARR"]
    assert (d / "eval" / "table.png").stat().st_size > 0
    assert len((d / "eval" / "reports.jsonl").read_text().splitlines()) == 4


def test_missing_inputs_name_the_path(tmp_path, capsys):
    assert main(["pretrain", "--near", str(tmp_path / "nope.npz"), "--out", str(tmp_path)]) == 1
    assert "nope.npz" in capsys.readouterr().err
    assert main(["eval", "--checkpoint", str(tmp_path / "gone.npz"), "--on", str(tmp_path / "nope.npz"),
                 "--out", str(tmp_path)]) == 1
    assert "nope.npz" in capsys.readouterr().err


def test_eval_rejects_wrong_class_count(tmp_path, tiny_config, capsys):
    assert main(["synth", "--config", tiny_config, "--out", str(tmp_path)]) == 0
    save_checkpoint(build_model(ArchMeta(n_classes=3), seed=0), tmp_path / "three.npz")
    assert main(["eval", "--checkpoint", str(tmp_path / "three.npz"), "--on", str(tmp_path / "on_surface.npz"),
                 "--out", str(tmp_path / "e")]) == 1
    assert "3 classes" in capsys.readouterr().err


def test_bench_small(tmp_path, tiny_config, capsys):
    out = tmp_path / "bench"
    assert main(["bench", "--config", tiny_config, "--n-seeds", "2", "--out", str(out)]) == 0
    for s in (0, 1):
        seed_dir = out / f"seed_{s}"
        for name in ("table.txt", "table.png", "reports.jsonl", "metrics.jsonl"):
            assert (seed_dir / name).is_file()
        assert sorted(p.name for p in (seed_dir / "checkpoints").iterdir()) == [
            "A2V_VAE.npz", "RARR.npz", "SimpleVAE.npz", "pretrained.npz"]
    summary = json.loads((out / "summary.json").read_text())
    assert summary["n_seeds"] == 2
    assert set(summary["mean_unseen_accuracy"]) == {"SimpleVAE", "PretrainedVAE", "A2V_VAE", "RARR"}
    first = (out / "seed_0" / "table.txt").read_bytes()
    assert main(["bench", "--config", tiny_config, "--out", str(tmp_path / "again")]) == 0
    assert (tmp_path / "again" / "seed_0" / "table.txt").read_bytes() == first
