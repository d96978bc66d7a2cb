import csv
import hashlib
import subprocess
import sys

import pytest
import yaml

from inbetween.cli import bundled_config, load_config, main, merge, substream
from inbetween.errors import ConfigError

TINY = {
    "dataset": {"n_clips": 4, "holdout_clips": 2},
    "diffusion": {"train": {"steps": 3, "batch_size": 4}, "model": {"n_layers": 1, "d_ff": 32, "T": 10}},
    "metrics": {"num_pairs": 10, "encoder_clips": 6, "autoencoder": {"steps": 50}},
    "stage2": {"reference": {"n_clips": 2, "frames": 20}, "ppo": {"iterations": 2, "n_envs": 2, "hidden": [16, 16]}},
}


@pytest.fixture
def tiny(tmp_path):
    p = tmp_path / "tiny.yaml"
    p.write_text(yaml.safe_dump(TINY))
    return p


def digest(folder):
    h = hashlib.sha256()
    for f in sorted(folder.glob("*.bvh")):
        h.update(f.name.encode() + f.read_bytes())
    return h.hexdigest()


def test_synth_is_deterministic(tiny, tmp_path):
    for name in ("a", "b"):
        assert main(["synth", "--config", str(tiny), "--seed", "0", "--out", str(tmp_path / name)]) == 0
    assert digest(tmp_path / "a" / "dataset") == digest(tmp_path / "b" / "dataset")
    assert main(["synth", "--config", str(tiny), "--seed", "1", "--out", str(tmp_path / "c")]) == 0
    assert digest(tmp_path / "a" / "dataset") != digest(tmp_path / "c" / "dataset")


def test_eval_of_ground_truth_against_itself(tiny, tmp_path):
    out = tmp_path / "run"
    assert main(["train-diffusion", "--config", str(tiny), "--out", str(out)]) == 0
    assert main(["sample", "--config", str(tiny), "--out", str(out), "--frames", "31",
                 "--keyframe-interval", "15"]) == 0
    gt = [str(p) for p in sorted((out / "samples").glob("gt_*.bvh"))]
    ref = tmp_path / "ref"
    ref.mkdir()
    for p in gt:
        (ref / p.split("/")[-1]).write_bytes(open(p, "rb").read())
    assert main(["eval", "--config", str(tiny), "--out", str(out), "--input", str(ref), "--reference", str(ref),
                 "--keyframe-interval", "15"]) == 0
    rows = list(csv.DictReader(open(out / "metrics.csv")))
    assert rows and all(float(r["k_error"]) == 0.0 for r in rows)


def test_pipeline_emits_declared_artifacts(tiny, tmp_path):
    out = tmp_path / "run"
    assert main(["pipeline", "--config", str(tiny), "--out", str(out), "--frames", "31",
                 "--keyframe-interval", "15"]) == 0
    manifest = yaml.safe_load((out / "manifest.txt").read_text())
    assert manifest["seed"] == 0 and manifest["command"] == "pipeline"
    for name in manifest["artifacts"]:
        assert (out / name).is_file(), name
    for name in ("denoiser.ibck", "policy.ibck", "metrics.csv", "controller_train.csv", "diffusion_train.csv",
                 "adapt.csv"):
        assert name in manifest["artifacts"]
    header = (out / "controller_train.csv").read_text().splitlines()[0]
    assert header == "iteration,mean_reward,episode_length,actor_loss,value_loss"
    adapt = list(csv.DictReader(open(out / "adapt.csv")))
    assert adapt and {"keyframe_root_error_cm", "corrected_error_cm"} <= set(adapt[0])


def test_rerun_from_manifest_reproduces_csv(tiny, tmp_path):
    first = tmp_path / "first"
    assert main(["train-diffusion", "--config", str(tiny), "--out", str(first), "--seed", "3"]) == 0
    second = tmp_path / "second"
    assert main(["train-diffusion", "--config", str(first / "manifest.txt"), "--out", str(second)]) == 0
    assert (first / "diffusion_train.csv").read_bytes() == (second / "diffusion_train.csv").read_bytes()


def test_errors_exit_nonzero(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("dataset: {n_clipz: 3}\n")
    assert main(["synth", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
    assert "ConfigError" in capsys.readouterr().err
    assert main(["synth", "--config", str(tmp_path / "missing.yaml")]) == 2
    assert main(["sample", "--out", str(tmp_path / "empty"), "--checkpoint", str(tmp_path / "none.ibck")]) == 2
    assert "IoError" in capsys.readouterr().err
    miss = tmp_path / "miss.yaml"
    miss.write_text("stage2: {character: /no/such/file.txt}\n")
    assert main(["synth", "--config", str(miss), "--out", str(tmp_path / "y")]) == 2


def test_config_merge_and_streams():
    base = bundled_config()
    assert load_config(None) == base
    merged = merge(base, {"sample": {"frames": 10}})
    assert merged["sample"]["frames"] == 10 and base["sample"]["frames"] != 10
    with pytest.raises(ConfigError):
        merge(base, {"nope": 1})
    a, b = substream(0, "data").random(4), substream(0, "rollout").random(4)
    assert (a != b).all() and (a == substream(0, "data").random(4)).all()


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "inbetween", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("synth", "train-diffusion", "sample", "retarget", "train-controller", "adapt", "eval", "pipeline"):
        assert cmd in out.stdout
