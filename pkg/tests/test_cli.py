import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from ganprior import data, nets
from ganprior.cli import main

FAST = {
    "hmc": {"n_samples": 80, "n_leapfrog": 3},
    "map": {"max_iters": 40, "n_restarts": 2},
}


def write_config(path, cfg):
    path.write_text(json.dumps(cfg))
    return str(path)


def run_cli(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def assert_manifest_complete(out_dir):
    manifest = json.loads((out_dir / "manifest.json").read_text())
    on_disk = {str(p.relative_to(out_dir)) for p in out_dir.rglob("*") if p.is_file()}
    assert set(manifest["files"]) == on_disk - {"manifest.json"}
    assert len(manifest["config_hash"]) == 64
    return manifest


@pytest.fixture
def gen_path(tmp_path):
    p = tmp_path / "gen.ganp"
    nets.save(nets.init(nets.generator_spec(2, 16, hidden=(8,)), 0), p)
    return p


@pytest.fixture
def rect_truth(tmp_path):
    p = tmp_path / "truth.dset"
    data.save_dataset(data.sample_rect_dataset(3, 1, grid_n=4), p)
    return p


def test_gen_data_rect(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", {"dataset": {"kind": "rect", "count": 5, "grid_n": 4}})
    code, out, _ = run_cli(capsys, "gen-data", "--config", cfg, "--seed", "3", "--out", str(tmp_path / "o"))
    assert code == 0 and json.loads(out)["ok"]
    manifest = assert_manifest_complete(tmp_path / "o")
    assert manifest["seed"] == 3 and manifest["task"] == "gen-data"
    assert data.load_dataset(tmp_path / "o" / "dataset.dset").count == 5


def test_gen_data_shapes(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", {"seed": 1, "dataset": {"kind": "shapes-cross", "count": 4}})
    code, _, _ = run_cli(capsys, "gen-data", "--config", cfg, "--out", str(tmp_path / "o"))
    assert code == 0
    assert data.load_dataset(tmp_path / "o" / "dataset.dset").label_dim == 10


def test_missing_dataset_path_exits_2_naming_key(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", {"seed": 0, "dataset": {"path": "nowhere.dset"}})
    code, _, err = run_cli(capsys, "train", "--config", cfg, "--out", str(tmp_path / "o"))
    line = json.loads(err.strip().splitlines()[-1])
    assert code == 2 and line["exit_code"] == 2 and line["key"] == "dataset.path"


def test_missing_seed_and_bad_json(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", {"dataset": {"kind": "rect", "count": 1}})
    code, _, err = run_cli(capsys, "gen-data", "--config", cfg, "--out", str(tmp_path / "o"))
    assert code == 2 and json.loads(err)["key"] == "seed"
    (tmp_path / "bad.json").write_text("{not json")
    code, _, _ = run_cli(capsys, "gen-data", "--config", str(tmp_path / "bad.json"), "--seed", "0", "--out", "x")
    assert code == 2


def test_corrupt_generator_exits_4(tmp_path, capsys, rect_truth):
    bad = tmp_path / "bad.ganp"
    bad.write_bytes(b"JUNKJUNK")
    cfg = write_config(tmp_path / "c.json", {"seed": 0, "nets": {"generator": str(bad)},
                                            "measurement": {"truth": str(rect_truth)}})
    code, _, err = run_cli(capsys, "infer", "--config", cfg, "--out", str(tmp_path / "o"))
    assert code == 4 and json.loads(err)["error"] == "FormatError"


def test_numeric_failure_exits_3(tmp_path, capsys, gen_path, rect_truth):
    cfg = write_config(tmp_path / "c.json", {
        "seed": 0, "nets": {"generator": str(gen_path)}, "measurement": {"truth": str(rect_truth)},
        "noise": {"sigma": 1e-4}, "hmc": {"n_samples": 50, "burn_in_fraction": 0.0, "initial_step": 50.0},
        "map": FAST["map"],
    })
    code, _, err = run_cli(capsys, "infer", "--config", cfg, "--out", str(tmp_path / "o"))
    assert code == 3 and json.loads(err)["exit_code"] == 3


def test_unknown_section_key_is_config_error(tmp_path, capsys, gen_path, rect_truth):
    cfg = write_config(tmp_path / "c.json", {"seed": 0, "nets": {"generator": str(gen_path)},
                                            "measurement": {"truth": str(rect_truth)}, "hmc": {"steps": 3}})
    code, _, err = run_cli(capsys, "infer", "--config", cfg, "--out", str(tmp_path / "o"))
    assert code == 2 and json.loads(err)["key"] == "hmc.steps"


def infer_config(tmp_path, gen_path, rect_truth, **extra):
    cfg = {"seed": 5, "nets": {"generator": str(gen_path)}, "measurement": {"truth": str(rect_truth), "index": 1},
           "decode": {"scale": 2.0, "shift": 2.0}, "forward": {"kind": "heat", "grid_n": 4}, **FAST}
    cfg.update(extra)
    return write_config(tmp_path / "infer.json", cfg)


def test_infer_three_noise_levels_and_overrides(tmp_path, capsys, gen_path, rect_truth):
    cfg = infer_config(tmp_path, gen_path, rect_truth)
    out = tmp_path / "o"
    code, _, _ = run_cli(capsys, "infer", "--config", cfg, "--set", "noise.sigma=[0.1, 1, 10]", "--out", str(out))
    assert code == 0
    summary = json.loads((out / "summary.json").read_text())
    assert sorted(summary) == ["0.1", "1", "10"]
    for s in ("0.1", "1", "10"):
        assert (out / f"sigma{s}_mean.f64").exists() and (out / f"sigma{s}_variance.pgm").exists()
    assert_manifest_complete(out)


def test_infer_is_bit_reproducible(tmp_path, capsys, gen_path, rect_truth):
    cfg = infer_config(tmp_path, gen_path, rect_truth)
    for name in ("a", "b"):
        assert run_cli(capsys, "infer", "--config", cfg, "--threads", "1", "--out", str(tmp_path / name))[0] == 0
    files = sorted(p.name for p in (tmp_path / "a").glob("*.f64"))
    assert files
    for name in files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_oracle_then_infer_comparison(tmp_path, capsys, gen_path, rect_truth):
    ocfg = write_config(tmp_path / "o.json", {
        "seed": 5, "measurement": {"truth": str(rect_truth), "index": 1},
        "forward": {"kind": "heat", "grid_n": 4}, "oracle": {"n_mc": 2000},
    })
    assert run_cli(capsys, "oracle", "--config", ocfg, "--out", str(tmp_path / "oracle"))[0] == 0
    oracle_json = json.loads((tmp_path / "oracle" / "oracle.json").read_text())
    assert oracle_json["ess"] <= 2000
    cfg = infer_config(tmp_path, gen_path, rect_truth,
                       compare={"oracle_mean": str(tmp_path / "oracle" / "oracle_mean.f64")})
    assert run_cli(capsys, "infer", "--config", cfg, "--out", str(tmp_path / "inf"))[0] == 0
    rows = (tmp_path / "inf" / "sigma1_comparison.csv").read_text().splitlines()
    assert rows[0] == "sigma,relative_l2_gap_mean" and float(rows[1].split(",")[1]) >= 0


def test_map_task_with_baselines(tmp_path, capsys, gen_path, rect_truth):
    cfg = infer_config(tmp_path, gen_path, rect_truth)
    assert run_cli(capsys, "map", "--config", cfg, "--out", str(tmp_path / "m"))[0] == 0
    rows = (tmp_path / "m" / "map.csv").read_text().splitlines()
    assert [r.split(",")[0] for r in rows[1:]] == ["gan", "l2", "h1"]
    assert_manifest_complete(tmp_path / "m")


def test_train_and_validate(tmp_path, capsys, rect_truth):
    cfg = write_config(tmp_path / "t.json", {
        "seed": 0, "dataset": {"path": str(rect_truth)}, "decode": {"scale": 2.0, "shift": 2.0},
        "gan": {"epochs": 2, "batch_size": 2, "latent_dim": 2, "hidden": [4], "checkpoint_every": 1},
    })
    assert run_cli(capsys, "train", "--config", cfg, "--out", str(tmp_path / "t"))[0] == 0
    assert_manifest_complete(tmp_path / "t")
    vcfg = write_config(tmp_path / "v.json", {
        "seed": 0, "dataset": {"path": str(rect_truth)}, "decode": {"scale": 2.0, "shift": 2.0},
        "nets": {"generator": str(tmp_path / "t" / "generator.ganp")}, "validate": {"n_z_samples": 1000},
    })
    assert run_cli(capsys, "validate-prior", "--config", vcfg, "--out", str(tmp_path / "v"))[0] == 0
    assert json.loads((tmp_path / "v" / "validate.json").read_text())["max_gap"] >= 0


def test_active_and_ood_tasks(tmp_path, capsys):
    shapes = tmp_path / "shapes.dset"
    data.save_dataset(data.shapes_dataset(3, 0, size=10, n_labels=4), shapes)
    crosses = tmp_path / "cross.dset"
    data.save_dataset(data.shapes_dataset(2, 1, kind="cross", size=10, n_labels=4), crosses)
    img_gen = tmp_path / "img.ganp"
    nets.save(nets.init(nets.generator_spec(2, 100, hidden=(8,)), 0), img_gen)
    joint_gen = tmp_path / "joint.ganp"
    nets.save(nets.init(nets.generator_spec(2, 104, hidden=(8,)), 0), joint_gen)

    acfg = write_config(tmp_path / "a.json", {
        "seed": 2, "nets": {"generator": str(img_gen)}, "dataset": {"path": str(shapes)},
        "active": {"n_windows": 2, "window_size": 5}, **FAST,
    })
    assert run_cli(capsys, "active", "--config", acfg, "--out", str(tmp_path / "a"))[0] == 0
    assert (tmp_path / "a" / "random_trace.csv").exists()
    assert_manifest_complete(tmp_path / "a")

    ocfg = write_config(tmp_path / "o.json", {
        "seed": 2, "nets": {"generator": str(joint_gen)},
        "dataset": {"path": str(shapes), "calibration": str(shapes), "ood": str(crosses)}, **FAST,
    })
    assert run_cli(capsys, "ood", "--config", ocfg, "--out", str(tmp_path / "ood"))[0] == 0
    metrics = json.loads((tmp_path / "ood" / "ood.json").read_text())
    assert 0 <= metrics["auc"] <= 1 and 0 <= metrics["fpr"] <= 1
    lines = (tmp_path / "ood" / "ood_metrics.csv").read_text().splitlines()
    assert len(lines) == 1 + 3 + 2


def test_module_entry_point(tmp_path):
    cfg = write_config(tmp_path / "c.json", {"seed": 0, "dataset": {"kind": "rect", "count": 2, "grid_n": 4}})
    proc = subprocess.run([sys.executable, "-m", "ganprior", "gen-data", "--config", cfg, "--out", str(tmp_path / "o")],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert Path(tmp_path / "o" / "manifest.json").exists()
