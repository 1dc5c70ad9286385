import json

import pytest
import yaml
from conftest import SMALL_AUG, SMALL_UNET, TINY_BUDGET

from cinessp.cli import EXIT_OK, EXIT_VALIDATION, main
from cinessp.data import SplitManifest, load_dataset
from cinessp.unet import Checkpoint


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = root / "spec.yaml"
    spec.write_text(yaml.safe_dump({"n_subjects": 6, "slices": 3, "frames": 4, "image_size": 64}))
    assert main(["synth", "--spec", str(spec), "--out", str(root / "data"), "--seed", "3"]) == EXIT_OK
    assert main(["split", "--data", str(root / "data"), "--sizes", "4", "1", "1", "--out", str(root / "split.json")]) == 0
    cfg = root / "run.yaml"
    cfg.write_text(yaml.safe_dump({"unet": SMALL_UNET, "augmentation": SMALL_AUG,
                                   "overrides": dict(TINY_BUDGET, mask={"patch_size": [16, 16]})}))
    return root


def test_synth_and_split(workspace):
    vols = load_dataset(workspace / "data")
    assert len(vols) == 6 and vols[0].image.shape[-1] == 64
    split = SplitManifest.load(workspace / "split.json")
    assert (len(split.train), len(split.val), len(split.test)) == (4, 1, 1)


def test_pretrain_finetune_evaluate(workspace, capsys):
    ck = workspace / "mim.pt"
    rc = main(["pretrain", "--method", "mim", "--config", str(workspace / "run.yaml"), "--data", str(workspace / "data"),
               "--split", str(workspace / "split.json"), "--out", str(ck)])
    assert rc == EXIT_OK and ck.exists() and ck.with_suffix(".csv").exists()
    assert Checkpoint.load(ck).meta["method"] == "mim"

    rc = main(["finetune", "--init", str(ck), "--policy", "encoder_decoder_no_output", "--subjects", "2",
               "--config", str(workspace / "run.yaml"), "--data", str(workspace / "data"),
               "--split", str(workspace / "split.json"), "--out-dir", str(workspace / "runs"), "--name", "ft"])
    assert rc == EXIT_OK
    manifest = json.loads((workspace / "runs" / "ft" / "manifest.json").read_text())
    assert manifest["config"]["method"] == "mim"
    assert manifest["results"]["0"]["transfer"]["policy"] == "encoder_decoder_no_output"
    assert len(manifest["results"]["0"]["subjects"]) == 2

    capsys.readouterr()
    rc = main(["evaluate", "--checkpoint", str(workspace / "runs" / "ft" / "final_seed0.pt"),
               "--data", str(workspace / "data"), "--strata", "phase", "--out", str(workspace / "report.csv")])
    assert rc == EXIT_OK
    means = json.loads(capsys.readouterr().out)
    assert set(means) == {"all", "ED", "ES"}

    assert main(["inspect-checkpoint", str(ck)]) == EXIT_OK
    assert "encoder" in capsys.readouterr().out


def test_data_root_from_environment(workspace, monkeypatch, capsys):
    monkeypatch.setenv("CINESSP_DATA", str(workspace / "data"))
    rc = main(["finetune", "--config", str(workspace / "run.yaml"), "--no-augmentation",
               "--out-dir", str(workspace / "runs"), "--name", "env"])
    assert rc == EXIT_OK
    cfg = yaml.safe_load((workspace / "runs" / "env" / "config.yaml").read_text())
    assert cfg["augmentation"]["enabled"] is False and cfg["kind"] == "train"


def test_validation_exit_codes(workspace, monkeypatch, capsys):
    monkeypatch.delenv("CINESSP_DATA", raising=False)
    assert main(["finetune", "--subjects", "99", "--config", str(workspace / "run.yaml"),
                 "--data", str(workspace / "data"), "--out-dir", str(workspace / "runs")]) == EXIT_VALIDATION
    assert main(["evaluate", "--checkpoint", str(workspace / "mim.pt")]) == EXIT_VALIDATION
    assert main(["split", "--data", str(workspace / "data"), "--sizes", "5", "5", "5",
                 "--out", str(workspace / "bad.json")]) == EXIT_VALIDATION
    assert "validation error" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        main(["pretrain", "--method", "byol", "--out", "x.pt"])
    assert exc.value.code == 2
