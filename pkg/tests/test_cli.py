"""CLI surface: gen-data, train, eval, gradcheck, exit codes, reproducibility."""

import json
from pathlib import Path

import numpy as np
import pytest

from mmchain import cli
from mmchain.config import config_from_dict, load_config, paper_scale_config, toy_config
from mmchain.errors import ConfigError

TINY = {
    "schema_version": 1,
    "seed": 3,
    "partitions": {
        "paired": 8,
        "unpaired": 9,
        "speech_only": 6,
        "image_only": 6,
        "dev": 4,
        "test": 4,
    },
    "model": {"hidden": 10},
    "chain": {
        "supervised_epochs": {k: 2 for k in ("asr", "ic", "imgsp2txt", "tts", "ig", "spkembed")},
        "unpaired_epochs": 1,
        "speech_only_epochs": 1,
        "image_only_epochs": 1,
        "lp_retrain_epochs": 1,
        "topline_epochs": {k: 1 for k in ("asr", "ic", "imgsp2txt", "tts", "ig", "spkembed")},
    },
}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "cfg.json"
    cfg_path.write_text(json.dumps(TINY), encoding="utf-8")
    assert cli.main(["gen-data", "--config", str(cfg_path), "--out", str(root / "ds.bin")]) == 0
    return root


def test_gen_data_writes_container_and_manifest(workdir):
    assert (workdir / "ds.bin").exists()
    manifest = (workdir / "ds.bin.manifest.txt").read_text()
    assert "scene_capacity: 768" in manifest
    assert '"paired": 8' in manifest


def test_gen_data_byte_identical(workdir, tmp_path):
    cfg_path = workdir / "cfg.json"
    out2 = tmp_path / "ds2.bin"
    assert cli.main(["gen-data", "--config", str(cfg_path), "--out", str(out2)]) == 0
    assert out2.read_bytes() == (workdir / "ds.bin").read_bytes()


def test_manifest_counts_match_container(workdir):
    from mmchain.dataio import load_dataset

    ds = load_dataset(workdir / "ds.bin")
    manifest = (workdir / "ds.bin.manifest.txt").read_text()
    counts = json.loads(manifest.split("example counts: ")[1].splitlines()[0])
    for name, examples in ds.partitions().items():
        assert counts[name] == len(examples)


def test_paper_scale_preset_partitions():
    cfg = paper_scale_config()
    p = cfg.partitions
    assert (p.paired, p.unpaired, p.speech_only, p.image_only) == (800, 1500, 1850, 1850)
    assert cfg.world.scene_capacity >= p.total_scenes()
    assert cfg.model.spk_dim == 64
    assert cfg.world.image_size == 128 and cfg.world.image_channels == 3
    assert cfg.world.utterances_per_scene == 5 and cfg.world.captions_per_scene == 5


@pytest.fixture(scope="module")
def trained_run(workdir):
    out = workdir / "run_mmc2"
    rc = cli.main(
        [
            "train",
            "--config",
            str(workdir / "cfg.json"),
            "--data",
            str(workdir / "ds.bin"),
            "--mode",
            "mmc2",
            "--out",
            str(out),
        ]
    )
    assert rc == 0
    return out


def test_train_emits_metrics_csv_and_checkpoints(trained_run):
    csv = (trained_run / "metrics.csv").read_text().splitlines()
    assert csv[0] == cli.CSV_HEADER
    # 4 stages x (imgsp2txt cer/wer/b4 + tts l2sq + ig is) = 20 rows
    assert len(csv) == 1 + 4 * 5
    stages = sorted({line.split(",")[0] for line in csv[1:]})
    assert len(stages) == 4
    for i in range(4):
        dirs = list(trained_run.glob(f"stage_{i}_*"))
        assert len(dirs) == 1
        assert (dirs[0] / "DONE").exists()
        assert (dirs[0] / "imgsp2txt.ckpt").exists()


def test_train_is_byte_deterministic(workdir, trained_run):
    out2 = workdir / "run_mmc2_again"
    rc = cli.main(
        [
            "train",
            "--config",
            str(workdir / "cfg.json"),
            "--data",
            str(workdir / "ds.bin"),
            "--mode",
            "mmc2",
            "--out",
            str(out2),
        ]
    )
    assert rc == 0
    assert (out2 / "metrics.csv").read_bytes() == (trained_run / "metrics.csv").read_bytes()


def test_train_resumes_bit_identically(workdir, trained_run):
    import shutil

    out2 = workdir / "run_resume"
    shutil.copytree(trained_run, out2)
    (out2 / "metrics.csv").unlink()
    for i in (2, 3):
        shutil.rmtree(next(out2.glob(f"stage_{i}_*")))
    rc = cli.main(
        [
            "train",
            "--config",
            str(workdir / "cfg.json"),
            "--data",
            str(workdir / "ds.bin"),
            "--mode",
            "mmc2",
            "--out",
            str(out2),
        ]
    )
    assert rc == 0
    assert (out2 / "metrics.csv").read_bytes() == (trained_run / "metrics.csv").read_bytes()


def test_train_refuses_overwrite_without_flag(workdir, trained_run):
    rc = cli.main(
        [
            "train",
            "--config",
            str(workdir / "cfg.json"),
            "--data",
            str(workdir / "ds.bin"),
            "--mode",
            "mmc2",
            "--out",
            str(trained_run),
        ]
    )
    assert rc == cli.EXIT_DATA


def test_train_rejects_checkpoints_from_other_config(workdir, trained_run, tmp_path):
    import shutil

    cfg2 = dict(TINY)
    cfg2["seed"] = 4
    cfg_path = tmp_path / "cfg2.json"
    cfg_path.write_text(json.dumps(cfg2), encoding="utf-8")
    out2 = tmp_path / "collide"
    shutil.copytree(trained_run, out2)
    (out2 / "metrics.csv").unlink()
    rc = cli.main(
        [
            "train",
            "--config",
            str(cfg_path),
            "--data",
            str(workdir / "ds.bin"),
            "--mode",
            "mmc2",
            "--out",
            str(out2),
        ]
    )
    assert rc == cli.EXIT_DATA


def test_eval_deterministic_and_guarded(workdir, trained_run, capsys):
    args = [
        "eval",
        "--config",
        str(workdir / "cfg.json"),
        "--checkpoint",
        str(next(trained_run.glob("stage_3_*"))),
        "--data",
        str(workdir / "ds.bin"),
    ]
    assert cli.main(args + ["--split", "dev"]) == 0
    first = capsys.readouterr().out
    assert cli.main(args + ["--split", "dev"]) == 0
    assert capsys.readouterr().out == first
    assert cli.main(args + ["--split", "test"]) == cli.EXIT_CONFIG
    capsys.readouterr()
    assert cli.main(args + ["--split", "test", "--allow-test"]) == 0


def test_eval_rejects_mangled_checkpoint_dir(workdir, trained_run, tmp_path):
    import shutil

    bad = tmp_path / "bad_stage"
    shutil.copytree(next(trained_run.glob("stage_3_*")), bad)
    (bad / "tts.ckpt").rename(bad / "ig.ckpt")  # kind/file mismatch
    rc = cli.main(
        [
            "eval",
            "--config",
            str(workdir / "cfg.json"),
            "--checkpoint",
            str(bad),
            "--data",
            str(workdir / "ds.bin"),
        ]
    )
    assert rc == cli.EXIT_DATA


def test_gradcheck_passes_and_reports(capsys):
    rc = cli.main(["gradcheck", "--components", "spkembed", "--num-seeds", "1", "--hidden", "5"])
    out = capsys.readouterr().out
    assert rc == 0
    assert "PASS spkembed" in out
    assert "max_rel_err" in out


def test_gradcheck_absurd_tolerance_fails(capsys):
    rc = cli.main(
        [
            "gradcheck",
            "--components",
            "spkembed",
            "--num-seeds",
            "1",
            "--hidden",
            "5",
            "--tol",
            "1e-14",
        ]
    )
    assert rc == cli.EXIT_NUMERIC


def test_gradcheck_unknown_component(capsys):
    assert cli.main(["gradcheck", "--components", "warp"]) == cli.EXIT_CONFIG


def test_unknown_config_key_is_config_error(tmp_path):
    bad = dict(TINY)
    bad["surprise"] = 1
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(bad), encoding="utf-8")
    assert cli.main(["gen-data", "--config", str(path), "--out", str(tmp_path / "x.bin")]) == cli.EXIT_CONFIG
    with pytest.raises(ConfigError):
        load_config(path)


def test_nested_unknown_key_rejected():
    bad = {"world": {"num_classes": 8, "mystery": 1}}
    with pytest.raises(ConfigError, match="mystery"):
        config_from_dict(bad)


def test_infeasible_counts_exit_code(tmp_path):
    bad = dict(TINY)
    bad["partitions"] = {"paired": 700, "unpaired": 60, "speech_only": 60, "image_only": 60, "dev": 4, "test": 4}
    path = tmp_path / "big.json"
    path.write_text(json.dumps(bad), encoding="utf-8")
    assert cli.main(["gen-data", "--config", str(path), "--out", str(tmp_path / "x.bin")]) == cli.EXIT_DATA


def test_config_hash_stamped_everywhere(workdir, trained_run):
    cfg = load_config(workdir / "cfg.json")
    chash = cfg.config_hash()
    csv = (trained_run / "metrics.csv").read_text()
    assert chash in csv
    from mmchain.dataio import dataset_header, load_checkpoint

    assert dataset_header(workdir / "ds.bin")["config_hash"] == chash
    _, _, header = load_checkpoint(next(trained_run.glob("stage_0_*")) / "tts.ckpt")
    assert header["config_hash"] == chash


def test_precision_flag_validation():
    cfg = toy_config()
    cfg.precision = "float32"
    with pytest.raises(ConfigError):
        cfg.validate()


def test_config_hash_changes_with_any_field():
    a, b = toy_config(), toy_config()
    b.chain.beam = 4
    assert a.config_hash() != b.config_hash()
