import json
import os

import numpy as np
import pytest

from stdetr.cli import (
    CheckpointMismatch,
    ConfigError,
    RunConfig,
    ablation_markdown,
    load_checkpoint,
    load_run_config,
    main,
    save_checkpoint,
)
from stdetr.model import STDETR
from stdetr.synthdata import read_dataset


SMALL = {
    "T": 2,
    "nq": 3,
    "d": 8,
    "heads": 2,
    "enc_layers": 1,
    "dec_layers": 1,
    "img_size": 32,
    "num_sequences": 4,
    "eval_sequences": 3,
    "moving_max": 2,
    "static_max": 1,
    "size_min": 6,
    "size_max": 10,
    "epochs": 1,
}


def write_small_config(tmp_path, **extra):
    cfg = dict(SMALL, **extra)
    path = str(tmp_path / "config.json")
    with open(path, "w") as f:
        json.dump(cfg, f)
    return path


# -- config loading ----------------------------------------------------------------


def test_load_run_config_defaults():
    cfg = load_run_config()
    assert cfg == RunConfig()


def test_load_run_config_file_and_overrides(tmp_path):
    path = write_small_config(tmp_path)
    cfg = load_run_config(path, overrides=["lr=0.01", "tpe=false", "T=4"])
    assert cfg.d == 8
    assert cfg.lr == 0.01
    assert cfg.tpe is False
    assert cfg.T == 4


def test_load_run_config_unknown_key(tmp_path):
    path = write_small_config(tmp_path)
    with pytest.raises(ConfigError):
        load_run_config(path, overrides=["nope=1"])


def test_load_run_config_bad_override_format():
    with pytest.raises(ConfigError):
        load_run_config(overrides=["lr:0.01"])


# -- checkpoints -------------------------------------------------------------------


def test_checkpoint_roundtrip_bitwise(tmp_path):
    cfg = load_run_config(write_small_config(tmp_path))
    model = STDETR(cfg.model_config(), seed=3)
    original = {n: p.data.copy() for n, p in model.params.items()}
    path = str(tmp_path / "model.stck")
    save_checkpoint(model, path, step=17)

    for p in model.params.values():
        p.data = np.zeros_like(p.data)
    step = load_checkpoint(model, path)
    assert step == 17
    for n, p in model.params.items():
        assert np.array_equal(p.data, original[n]), n


def test_checkpoint_config_mismatch(tmp_path):
    cfg = load_run_config(write_small_config(tmp_path))
    model = STDETR(cfg.model_config(), seed=0)
    path = str(tmp_path / "model.stck")
    save_checkpoint(model, path)

    other = load_run_config(write_small_config(tmp_path), overrides=["nq=4"])
    with pytest.raises(CheckpointMismatch):
        load_checkpoint(STDETR(other.model_config(), seed=0), path)


def test_checkpoint_bad_magic(tmp_path):
    path = str(tmp_path / "junk.stck")
    with open(path, "wb") as f:
        f.write(b"NOTCK" + b"\x00" * 16)
    cfg = load_run_config(write_small_config(tmp_path))
    with pytest.raises(CheckpointMismatch):
        load_checkpoint(STDETR(cfg.model_config(), seed=0), path)


# -- commands ----------------------------------------------------------------------


def test_cmd_gen_data_roundtrip(tmp_path, capsys):
    cfg_path = write_small_config(tmp_path)
    out = str(tmp_path / "train.stds")
    assert main(["gen-data", "--config", cfg_path, "--out", out]) == 0
    ds = read_dataset(out)
    assert len(ds.sequences) == 4
    assert "wrote 4 sequences" in capsys.readouterr().out


def test_cmd_train_zero_epochs_checkpoint_equals_init(tmp_path):
    cfg_path = write_small_config(tmp_path, epochs=0)
    out = str(tmp_path / "run")
    assert main(["train", "--config", cfg_path, "--out", out]) == 0

    cfg = load_run_config(cfg_path)
    fresh = STDETR(cfg.model_config(), seed=cfg.seed)
    trained = STDETR(cfg.model_config(), seed=cfg.seed)
    load_checkpoint(trained, os.path.join(out, "model.stck"))
    for n in fresh.params:
        assert np.array_equal(fresh.params[n].data, trained.params[n].data), n
    assert os.path.exists(os.path.join(out, "loss_log.jsonl"))
    assert os.path.exists(os.path.join(out, "config.json"))


def test_cmd_train_writes_loss_log(tmp_path):
    cfg_path = write_small_config(tmp_path)
    out = str(tmp_path / "run")
    assert main(["train", "--config", cfg_path, "--out", out]) == 0
    with open(os.path.join(out, "loss_log.jsonl")) as f:
        records = [json.loads(line) for line in f]
    assert len(records) == 4  # 1 epoch x 4 sequences
    assert records[0]["step"] == 1
    for rec in records:
        for key in ("loss", "class", "l1", "giou"):
            assert np.isfinite(rec[key])


def test_cmd_eval_deterministic(tmp_path, capsys):
    cfg_path = write_small_config(tmp_path)
    out1 = str(tmp_path / "r1.json")
    out2 = str(tmp_path / "r2.json")
    assert main(["eval", "--config", cfg_path, "--out", out1]) == 0
    assert main(["eval", "--config", cfg_path, "--out", out2]) == 0
    with open(out1, "rb") as f1, open(out2, "rb") as f2:
        assert f1.read() == f2.read()
    capsys.readouterr()


def test_cmd_eval_with_checkpoint(tmp_path, capsys):
    cfg_path = write_small_config(tmp_path)
    run_dir = str(tmp_path / "run")
    assert main(["train", "--config", cfg_path, "--out", run_dir]) == 0
    report = str(tmp_path / "report.json")
    assert (
        main(
            [
                "eval",
                "--config",
                cfg_path,
                "--checkpoint",
                os.path.join(run_dir, "model.stck"),
                "--out",
                report,
            ]
        )
        == 0
    )
    payload = json.loads(open(report).read())
    assert set(payload) >= {"map_total", "ap50", "ap75"}
    capsys.readouterr()


def test_cmd_infer_smoke(tmp_path, capsys):
    cfg_path = write_small_config(tmp_path)
    out = str(tmp_path / "infer")
    assert main(["infer", "--config", cfg_path, "--out", out, "--attention"]) == 0
    records = json.load(open(os.path.join(out, "detections.json")))
    assert isinstance(records, list)
    pgms = [
        os.path.join(root, p)
        for root, _, names in os.walk(out)
        for p in names
        if p.endswith(".pgm")
    ]
    assert pgms, "expected attention PGM dumps"
    capsys.readouterr()


def test_cmd_gradcheck_smoke(tmp_path, capsys):
    cfg_path = write_small_config(tmp_path)
    assert main(["gradcheck", "--config", cfg_path]) == 0
    out = capsys.readouterr().out
    assert "gradcheck early" in out and "gradcheck late" in out


def test_error_json_on_stderr(tmp_path, capsys):
    code = main(["eval", "--config", str(tmp_path / "missing.json")])
    assert code == 1
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "FileNotFoundError"


def test_unknown_override_exit_code(tmp_path, capsys):
    cfg_path = write_small_config(tmp_path)
    code = main(["gen-data", "--config", cfg_path, "-o", "bogus=1", "--out", str(tmp_path / "x")])
    assert code == 1
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "ConfigError"


def test_ablate_unknown_cell(tmp_path, capsys):
    cfg_path = write_small_config(tmp_path)
    code = main(
        ["ablate", "--config", cfg_path, "--cells", "nope", "--out", str(tmp_path / "a")]
    )
    assert code == 1
    capsys.readouterr()


def test_ablation_markdown_columns():
    results = {
        "baseline_1step": {"map_total": 0.1, "ap50": 0.2, "ap75": 0.05, "per_seed": []}
    }
    md = ablation_markdown(results)
    header = md.splitlines()[0]
    assert header == "| cell | mAP_Total | AP_50 | AP_75 |"
    assert "| baseline_1step | 0.100 | 0.200 | 0.050 |" in md


def test_ablate_single_cell_end_to_end(tmp_path, capsys):
    cfg_path = write_small_config(tmp_path, num_sequences=2, eval_sequences=2)
    out = str(tmp_path / "abl")
    code = main(
        [
            "ablate",
            "--config",
            cfg_path,
            "--cells",
            "baseline_1step",
            "--seeds",
            "0",
            "--out",
            out,
        ]
    )
    assert code == 0
    results = json.load(open(os.path.join(out, "ablation.json")))
    assert "baseline_1step" in results
    md = open(os.path.join(out, "ablation.md")).read()
    assert md.splitlines()[0] == "| cell | mAP_Total | AP_50 | AP_75 |"
    capsys.readouterr()
