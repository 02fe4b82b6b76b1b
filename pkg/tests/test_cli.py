import json

import pytest
import torch

from freqdoor.cli import main
from freqdoor.data import load_dataset


@pytest.fixture(scope="module")
def tiny_config(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "exp.yaml"
    cfg.write_text(
        f"""
seed: 3
output_dir: {root / 'runs'}
main_dataset: {{synth: natural-noise, n: 12, size: 32}}
codec: {{quality: 3, base: 8, latent_channels: 8, hyper_channels: 4}}
trigger: {{block_size: 8, band_size: 16, top_k: 4, epsilon: 0.005}}
objectives:
  - {{kind: bpp, beta: 0.01, variant: dynamic}}
train: {{batch_size: 4, patch_size: 32, epochs: 2, steps: 4}}
defense: {{blur_sigmas: [0.5], squeeze_depths: [3], amplify_factor: 3.0}}
"""
    )
    return root, cfg


@pytest.fixture(scope="module")
def vanilla_run(tiny_config):
    root, cfg = tiny_config
    assert main(["train-vanilla", "--config", str(cfg)]) == 0
    run_dirs = list((root / "runs").glob("train-vanilla-*"))
    assert len(run_dirs) == 1
    return run_dirs[0]


def test_train_vanilla_writes_manifest_and_checkpoint(vanilla_run):
    manifest = json.loads((vanilla_run / "manifest.json").read_text())
    assert manifest["status"] == "done"
    assert manifest["seed"] == 3
    assert len(manifest["config_hash"]) == 16
    assert (vanilla_run / "codec.ckpt").exists()
    assert (vanilla_run / "metrics.jsonl").exists()


@pytest.fixture(scope="module")
def attack_run(tiny_config, vanilla_run):
    root, cfg = tiny_config
    codec = vanilla_run / "codec.ckpt"
    assert main(["attack", "--config", str(cfg), "--objective", "bpp",
                 "--codec", str(codec)]) == 0
    run_dirs = list((root / "runs").glob("attack-bpp-*"))
    assert len(run_dirs) == 1
    return run_dirs[0]


def test_attack_outputs(attack_run):
    assert (attack_run / "codec.ckpt").exists()
    assert (attack_run / "trigger.ckpt").exists()
    manifest = json.loads((attack_run / "manifest.json").read_text())
    assert "poisoned_bpp" in manifest


def test_eval_rd_clean_and_poisoned(tiny_config, vanilla_run, attack_run, capsys):
    root, cfg = tiny_config
    assert main(["eval-rd", "--config", str(cfg),
                 "--codec", str(vanilla_run / "codec.ckpt")]) == 0
    out = capsys.readouterr().out
    assert "quality 3" in out
    assert main(["eval-rd", "--config", str(cfg),
                 "--codec", str(attack_run / "codec.ckpt"),
                 "--trigger", str(attack_run / "trigger.ckpt"),
                 "--poisoned"]) == 0


def test_inject_then_eval_matches_in_memory(tiny_config, attack_run, tmp_path):
    root, cfg = tiny_config
    out_dir = tmp_path / "poisoned"
    assert main(["inject", "--config", str(cfg),
                 "--trigger", str(attack_run / "trigger.ckpt"),
                 "--out", str(out_dir)]) == 0
    from freqdoor.checkpoint import load_trigger
    from freqdoor.data import synth_corpus

    loaded = load_dataset(out_dir)
    trigger, _ = load_trigger(attack_run / "trigger.ckpt")
    corpus = synth_corpus("natural-noise", 12, size=32, seed=3)
    with torch.no_grad():
        in_memory = trigger.inject(corpus.images, clip=True).x_p
    # round trip through 8-bit PNGs: within quantization error
    assert float((loaded.images - in_memory).abs().max()) <= 0.5 / 255 + 1e-6


def test_defend_sweep_cli(tiny_config, attack_run):
    root, cfg = tiny_config
    assert main(["defend-sweep", "--config", str(cfg),
                 "--codec", str(attack_run / "codec.ckpt"),
                 "--trigger", str(attack_run / "trigger.ckpt")]) == 0
    sweep_dirs = list((root / "runs").glob("defend-sweep-*"))
    assert (sweep_dirs[0] / "defense_sweep.csv").exists()


def test_report_command(tiny_config, vanilla_run, capsys):
    assert main(["report", "--run", str(vanilla_run)]) == 0
    out = capsys.readouterr().out
    assert "train-vanilla" in out


def test_rerun_reproduces_aggregate_metrics(tiny_config, vanilla_run):
    # same config + seed -> the run directory is rewritten with identical
    # aggregate metrics
    root, cfg = tiny_config
    first = json.loads((vanilla_run / "manifest.json").read_text())
    assert main(["train-vanilla", "--config", str(cfg)]) == 0
    second = json.loads((vanilla_run / "manifest.json").read_text())
    assert first["config_hash"] == second["config_hash"]
    assert first["clean_bpp"] == second["clean_bpp"]
    assert first["clean_psnr"] == second["clean_psnr"]


def test_invalid_config_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("sed: 1\n")
    assert main(["train-vanilla", "--config", str(bad)]) == 2
    assert "unknown key" in capsys.readouterr().err


def test_missing_checkpoint_exits_1(tiny_config, capsys):
    root, cfg = tiny_config
    bogus = root / "nope.ckpt"
    bogus.write_bytes(b"nope")
    assert main(["eval-rd", "--config", str(cfg), "--codec", str(bogus)]) == 2
    # corrupted container is a config-category error with diagnostics
    assert "checkpoint" in capsys.readouterr().err


def test_cli_bpp_default_beta():
    from freqdoor.config import config_from_dict

    cfg = config_from_dict({})
    spec_list = [o for o in cfg.objectives if o.kind == "bpp"]
    assert spec_list and spec_list[0].to_spec().beta == 0.01


@pytest.fixture(scope="module")
def downstream_config(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_ds")
    cfg = root / "exp.yaml"
    cfg.write_text(
        f"""
seed: 5
output_dir: {root / 'runs'}
main_dataset: {{synth: natural-noise, n: 10, size: 64}}
aux_datasets:
  scenes: {{synth: shapes, n: 120, size: 64}}
  faces: {{synth: faces-toy, n: 96, size: 64}}
codec: {{quality: 3, base: 8, latent_channels: 8, hyper_channels: 4}}
trigger: {{block_size: 8, band_size: 16, top_k: 4, epsilon: 0.005}}
objectives:
  - {{kind: seg_targeted, source_class: 1, target_class: 0, aux_dataset: scenes}}
  - {{kind: face_deid, aux_dataset: faces}}
train: {{batch_size: 4, patch_size: 64, epochs: 1, steps: 2}}
"""
    )
    return root, cfg


def test_eval_asr_and_face_commands(downstream_config, vanilla_run, capsys):
    root, cfg = downstream_config
    codec = vanilla_run / "codec.ckpt"
    # a fresh (untrained) trigger checkpoint is enough to exercise the contract
    from freqdoor.checkpoint import save_trigger
    from freqdoor.trigger import TriggerInjector

    torch.manual_seed(0)
    trig_path = root / "trigger.ckpt"
    save_trigger(trig_path, TriggerInjector(block_size=8, band_size=16, top_k=4))
    assert main(["eval-asr", "--config", str(cfg), "--codec", str(codec),
                 "--trigger", str(trig_path)]) == 0
    out = capsys.readouterr().out
    assert "pixel-wise ASR" in out
    assert main(["eval-face", "--config", str(cfg), "--codec", str(codec),
                 "--trigger", str(trig_path)]) == 0
    out = capsys.readouterr().out
    assert "clean accuracy" in out
