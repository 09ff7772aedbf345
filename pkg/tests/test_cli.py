import hashlib
from pathlib import Path

import pytest

from conftest import tiny_config
from twinseg.cli import main
from twinseg.config import save_config


def _tree_digest(root: Path) -> dict[str, str]:
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file():
            out[str(p.relative_to(root))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


@pytest.fixture(scope="module")
def tiny_yaml(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.yaml"
    save_config(tiny_config(total_iterations=6), path)
    return path


@pytest.fixture(scope="module")
def trained_run(tiny_yaml, tmp_path_factory):
    out = tmp_path_factory.mktemp("runs") / "run_a"
    rc = main(["train", "--config", str(tiny_yaml), "--out", str(out)])
    assert rc == 0
    return out


def test_synth_gen_deterministic(tiny_yaml, tmp_path):
    digests = []
    for sub in ("a", "b"):
        out = tmp_path / sub
        rc = main(["synth-gen", "--config", str(tiny_yaml), "--out", str(out)])
        assert rc == 0
        assert (out / "train" / "labels.txt").exists()
        assert (out / "val" / "images").is_dir()
        digests.append(_tree_digest(out))
    assert digests[0] == digests[1]


def test_train_writes_artifacts(trained_run):
    for name in ("metrics.csv", "eval.csv", "config.yaml", "checkpoint.twsg"):
        assert (trained_run / name).exists()
    lines = (trained_run / "metrics.csv").read_text().splitlines()
    assert len(lines) == 1 + 6


def test_eval_both_branches(trained_run, tiny_yaml, tmp_path):
    ckpt = trained_run / "checkpoint.twsg"
    for cmd, which in (("eval", "seg"), ("seed-eval", "seed")):
        out = tmp_path / which
        rc = main([cmd, "--config", str(tiny_yaml), "--out", str(out),
                   "--checkpoint", str(ckpt)])
        assert rc == 0
        text = (out / f"{which}_report.txt").read_text()
        assert text.startswith(f"branch: {which}")
        assert "miou:" in text


def test_eval_can_export_masks(trained_run, tiny_yaml, tmp_path):
    out = tmp_path / "exported"
    rc = main(["eval", "--config", str(tiny_yaml), "--out", str(out),
               "--checkpoint", str(trained_run / "checkpoint.twsg"),
               "--set", "eval.export_masks=true"])
    assert rc == 0
    pngs = list((out / "masks_seg").glob("*.png"))
    assert len(pngs) == tiny_config().data.synthetic.val_count


def test_report_renders_curves_and_table(trained_run, tiny_yaml, tmp_path, capsys):
    run_b = tmp_path / "run_b"
    rc = main(["train", "--config", str(tiny_yaml), "--out", str(run_b),
               "--set", "seed=1"])
    assert rc == 0
    out = tmp_path / "rep"
    rc = main(["report", str(trained_run), str(run_b), "--out", str(out)])
    assert rc == 0
    for name in ("losses.png", "miou.png", "ablation.csv", "ablation.txt"):
        assert (out / name).exists(), name
    rows = (out / "ablation.csv").read_text().splitlines()
    assert rows[0] == "run,seed_miou,seg_miou"
    assert len(rows) == 3
    assert rows[1].startswith("run_a,") and rows[2].startswith("run_b,")
    assert "seed mIoU" in capsys.readouterr().out


def test_missing_config_names_path(tmp_path, capsys):
    rc = main(["train", "--config", str(tmp_path / "absent.yaml"),
               "--out", str(tmp_path / "o")])
    assert rc == 1
    assert "absent.yaml" in capsys.readouterr().err


def test_unknown_override_key(tmp_path):
    rc = main(["train", "--set", "nope.key=3", "--out", str(tmp_path / "o")])
    assert rc == 1


def test_config_preset_conflict(tiny_yaml, tmp_path):
    rc = main(["train", "--config", str(tiny_yaml), "--preset", "desk-synth",
               "--out", str(tmp_path / "o")])
    assert rc == 1


def test_eval_requires_checkpoint(tiny_yaml, tmp_path):
    rc = main(["eval", "--config", str(tiny_yaml), "--out", str(tmp_path / "o")])
    assert rc == 1


def test_bad_data_root_is_data_error(tmp_path, capsys):
    cfg = tiny_config()
    cfg.data.source = "voc"
    cfg.data.root = str(tmp_path / "no_such_dataset")
    path = tmp_path / "voc.yaml"
    save_config(cfg, path)
    rc = main(["train", "--config", str(path), "--out", str(tmp_path / "o")])
    assert rc == 2
    assert "labels" in capsys.readouterr().err


def test_missing_run_dir_is_data_error(tmp_path):
    rc = main(["report", str(tmp_path / "ghost"), "--out", str(tmp_path / "o")])
    assert rc == 2
