import json
import os

import nibabel as nib
import numpy as np
import pytest
import yaml

from csfinpaint.cli import main
from csfinpaint.config import ConfigError, read_manifest, validate_config
from csfinpaint.phantom import write_phantom_dataset

TINY_TRAIN = {"epochs": 1, "decay_start": 0, "crop_size": 24, "crops_per_sample": 1, "batch_size": 1,
              "base_width": 4, "disc_base_width": 4, "n_folds": 2, "fold": 0, "max_iterations": 2}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    return write_phantom_dataset(root, subjects=("s0", "s1", "s2"), samples=("test", "retest"),
                                 shape=(24, 24, 24), with_atrophy=True)


def write_cfg(tmp_path, dataset, **blocks):
    cfg = {"manifest": str(dataset), "output_root": str(tmp_path / "out"), "stage": "gen-masks",
           "extractor": {"kind": "toy"}, **blocks}
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


def test_unknown_key_named(tmp_path, dataset, capsys):
    path = write_cfg(tmp_path, dataset, foo=1)
    assert main(["--config", str(path)]) == 1
    assert "foo" in capsys.readouterr().err


def test_errors_are_exhaustive(tmp_path, dataset):
    raw = {"manifest": str(tmp_path / "missing.csv"), "output_root": "o", "stage": "inpaint",
           "train": {"lr": -1}}
    with pytest.raises(ConfigError) as exc:
        validate_config(raw)
    assert len(exc.value.errors) == 1 and "train.lr" in exc.value.errors[0]
    raw["train"] = {}
    with pytest.raises(ConfigError) as exc:
        validate_config(raw)
    joined = "\n".join(exc.value.errors)
    assert "manifest" in joined and "inpaint.checkpoint" in joined


def test_default_style_weight_echoed(tmp_path, dataset, capsys):
    path = write_cfg(tmp_path, dataset, losses={"recon": 1.0})
    assert main(["--config", str(path), "--print-config"]) == 0
    resolved = json.loads(capsys.readouterr().out)
    assert resolved["losses"]["style"] == 250.0
    assert resolved["losses"]["adv"] == 0.1 and resolved["train"]["lr"] == 2e-4


def test_validation_deterministic(tmp_path, dataset):
    path = write_cfg(tmp_path, dataset)
    assert validate_config(path).resolved() == validate_config(path).resolved()
    assert validate_config(path).config_hash() == validate_config(path).config_hash()


def test_inpaint_without_checkpoint(tmp_path, dataset, capsys):
    path = write_cfg(tmp_path, dataset)
    assert main(["--config", str(path), "--stage", "inpaint"]) == 1
    assert "inpaint.checkpoint" in capsys.readouterr().err
    assert not (tmp_path / "out").exists()


def test_gen_masks_counts_and_overwrite(tmp_path, dataset, capsys):
    two = dataset.parent / "two_samples.csv"
    lines = dataset.read_text().splitlines()
    two.write_text("\n".join(lines[:3]) + "\n")
    path = write_cfg(tmp_path, two, masks={"per_sample": 5})
    # relative file paths resolve against the manifest's own directory
    for row in read_manifest(two):
        assert os.path.exists(row.t1)
    assert main(["--config", str(path)]) == 0
    out = tmp_path / "out" / "gen-masks"
    assert len(list(out.glob("*.nii.gz"))) == 10
    assert len([p for p in out.glob("*.json") if p.name != "provenance.json"]) == 10
    prov = json.loads((out / "provenance.json").read_text())
    assert {"config_hash", "seed", "code_version"} <= set(prov)

    first = {p.name: p.read_bytes() for p in out.glob("*.json") if p.name != "provenance.json"}
    assert main(["--config", str(path)]) == 2
    assert "overwrite" in capsys.readouterr().err
    assert main(["--config", str(path), "--overwrite"]) == 0
    again = {p.name: p.read_bytes() for p in out.glob("*.json") if p.name != "provenance.json"}
    assert again == first
    m = nib.load(str(out / "s0_test_m0.nii.gz")).get_fdata()
    assert m.any() and set(np.unique(m)) <= {0.0, 1.0}


def test_lock_blocks_second_run(tmp_path, dataset, capsys):
    path = write_cfg(tmp_path, dataset)
    (tmp_path / "out").mkdir()
    (tmp_path / "out" / ".lock").write_text("123")
    assert main(["--config", str(path)]) == 2
    assert "lock" in capsys.readouterr().err


def test_device_env_override(tmp_path, dataset, monkeypatch, capsys):
    path = write_cfg(tmp_path, dataset)
    monkeypatch.setenv("CSFINPAINT_DEVICE", "meta")
    assert main(["--config", str(path), "--print-config"]) == 0
    assert json.loads(capsys.readouterr().out)["device"] == "meta"
    assert main(["--config", str(path), "--print-config", "--device", "cpu", "--seed", "7"]) == 0
    resolved = json.loads(capsys.readouterr().out)
    assert resolved["device"] == "cpu" and resolved["seed"] == 7


def test_manifest_errors(tmp_path):
    bad = tmp_path / "m.csv"
    bad.write_text("subject,sample,t1,flair,aseg,skullstrip\na,x,t1.nii,f.nii,a.nii,b.nii\na,x,t1.nii,f.nii,a.nii,b.nii\n")
    with pytest.raises(ValueError) as exc:
        read_manifest(bad)
    msg = str(exc.value)
    assert "duplicate" in msg and "file not found" in msg


def test_runtime_error_exit_code(tmp_path, dataset, capsys):
    path = write_cfg(tmp_path, dataset, stage="finetune", finetune={"checkpoint": str(tmp_path)})
    assert main(["--config", str(path)]) == 2
    assert "failed" in capsys.readouterr().err


def test_full_pipeline(tmp_path, dataset):
    ck = str(tmp_path / "out" / "train" / "fold_0" / "best")
    ft = str(tmp_path / "out" / "finetune" / "best")
    path = write_cfg(tmp_path, dataset, masks={"per_sample": 1}, train=TINY_TRAIN,
                     finetune={"masks_per_sample": 1, "epochs": 1, "max_iterations": 1},
                     inpaint={"patch_size": [24, 24, 24], "stride": 8})
    assert main(["--config", str(path), "--stage", "prepare-channels"]) == 0
    stacks = list((tmp_path / "out" / "prepare-channels").glob("*/manifest.json"))
    assert len(stacks) == 6
    assert main(["--config", str(path), "--stage", "train"]) == 0
    fold = tmp_path / "out" / "train" / "fold_0"
    assert (fold / "losses.csv").exists() and (fold / "validation.json").exists()
    assert json.loads((tmp_path / "out" / "train" / "folds.json").read_text())[0]["fold"] == 0

    cfg = yaml.safe_load(path.read_text())
    cfg["finetune"]["checkpoint"] = ck
    cfg["inpaint"]["checkpoint"] = ck
    cfg["evaluate"] = {"checkpoint": ck}
    cfg["histograms"] = {"checkpoint": ck, "finetuned_checkpoint": ft}
    path.write_text(yaml.safe_dump(cfg))
    for stage in ("finetune", "inpaint", "evaluate", "plot-histograms"):
        assert main(["--config", str(path), "--stage", stage]) == 0, stage

    inp = tmp_path / "out" / "inpaint"
    result = nib.load(str(inp / "s0_test_T1w_inpainted.nii.gz")).get_fdata()
    mask = nib.load(str(inp / "s0_test_T1w_csfmask.nii.gz")).get_fdata() > 0
    assert mask.any() and result.shape == (24, 24, 24)
    assert json.loads((inp / "s0_test_T1w_provenance.json").read_text())["mask_voxels"] == int(mask.sum())
    metrics = json.loads((tmp_path / "out" / "evaluate" / "metrics.json").read_text())
    assert set(metrics["summary"]) == {"mask", "whole"}
    assert (tmp_path / "out" / "plot-histograms" / "histograms.png").exists()
