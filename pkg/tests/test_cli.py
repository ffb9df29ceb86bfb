import csv
import io
import json
import shutil

import numpy as np
import pytest

from videotcav.cli import main
from videotcav.core_types import read_tensor_container
from videotcav.experiment import RESULT_COLUMNS, ConfigError, ExperimentConfig, run_experiment
from videotcav.report import read_results_csv

QUICK = ["--layers", "stage3", "--n-random-sets", "3", "--random-set-size", "10", "--n-inputs", "12"]


def _rows(path):
    return list(csv.DictReader(io.StringIO(path.read_text())))


# ---------------------------------------------------------------------------
# synth / train / concepts
# ---------------------------------------------------------------------------


def test_synth_idempotent(tmp_path):
    argv = ["synth", "--seed", "7", "--n-train", "4", "--n-test", "4"]
    assert main(argv + ["--out", str(tmp_path / "a")]) == 0
    assert main(argv + ["--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()
    for name in ("a", "b"):
        assert (tmp_path / name / "spec.json").exists() and (tmp_path / name / "boxes.vtc").exists()
    first = sorted(p.read_bytes() for p in (tmp_path / "a" / "clips").iterdir())
    assert first == sorted(p.read_bytes() for p in (tmp_path / "b" / "clips").iterdir())


def test_synth_errors(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path)]) == 1
    assert "seed required" in capsys.readouterr().err
    assert main(["synth", "--seed", "1", "--n-train", "0", "--out", str(tmp_path)]) == 1
    assert "n_train" in capsys.readouterr().err


def test_concepts_filter_and_malformed(tmp_path, capsys, caplog):
    scenes = tmp_path / "scenes"
    assert main(["synth", "--kind", "scenes", "--seed", "3", "--n", "3", "--out", str(scenes)]) == 0
    common = ["--video-dir", str(scenes / "videos"), "--detections-dir", str(scenes / "detections")]

    assert main(["concepts", *common, "--classes", "person", "--out", str(tmp_path / "c"), "--export-duration", "2"]) == 0
    sets = json.loads((tmp_path / "c" / "manifest.json").read_text())["sets"]
    assert sorted(s["kind"] for s in sets) == ["spatial", "spatiotemporal"]
    assert all(s["origin"] for s in sets)
    review = sorted((tmp_path / "c" / "review").rglob("*.vtc"))
    assert len(review) == 3 and read_tensor_container(review[0])["frames"].shape[0] == 50

    caplog.clear()
    assert main(["concepts", *common, "--classes", "giraffe", "--out", str(tmp_path / "e")]) == 0
    assert json.loads((tmp_path / "e" / "manifest.json").read_text()) == {"sets": []}
    assert any("no concept sets" in r.message for r in caplog.records)

    bad = sorted((scenes / "detections").glob("*.json"))[1]
    bad.write_text('{"video_id": "x", "width": 4}')
    assert main(["concepts", *common, "--classes", "person", "--out", str(tmp_path / "f")]) != 0
    assert bad.name in capsys.readouterr().err


def test_train_reports_accuracy(workspace):
    report = json.loads((workspace / "model" / "train_report.json").read_text())
    assert report["test_accuracy"] >= 0.95
    assert report["losses"][-1] < report["losses"][0]


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------


def test_config_errors_listed_together(tmp_path):
    raw = {"model": "m", "layers": ["stage1"], "seeds": {"data": 0, "cav": "x"}, "bogus": 1}
    with pytest.raises(ConfigError) as info:
        ExperimentConfig.from_dict(raw)
    problems = info.value.problems
    assert "unknown key 'bogus'" in problems
    assert "missing required key 'corpus'" in problems
    assert "missing required key 'target_class'" in problems
    assert "seeds.cav must be an explicit integer" in problems
    assert "seeds.sampling must be an explicit integer" in problems


def test_config_validation_before_compute(workspace, tmp_path, capsys):
    cfg = json.loads((workspace / "config.json").read_text())
    cfg.update(layers=["stage1", "stage7"], target_class="up", alpha=2.0, concepts=str(tmp_path / "missing.json"))
    path = workspace / "bad_config.json"
    path.write_text(json.dumps(cfg))
    assert main(["run", "--config", str(path), "--out-dir", str(tmp_path / "out")]) == 1
    err = capsys.readouterr().err
    assert "alpha must lie in (0, 1)" in err and "concepts: path does not exist" in err
    assert not (tmp_path / "out").exists()

    cfg.update(alpha=0.05, concepts="concepts/manifest.json")
    path.write_text(json.dumps(cfg))
    assert main(["run", "--config", str(path), "--out-dir", str(tmp_path / "out")]) == 1
    err = capsys.readouterr().err
    assert "stage7" in err and "unknown class 'up'" in err


def test_flags_override_file(workspace, tmp_path):
    cfg = ExperimentConfig.load(workspace / "config.json", {"seeds.sampling": 5, "n_inputs": 7})
    assert cfg.seeds.sampling == 5 and cfg.seeds.data == 0 and cfg.n_inputs == 7
    assert cfg.model == str(workspace / "model")


# ---------------------------------------------------------------------------
# run / report / cache
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def quick_run(workspace, tmp_path_factory):
    out = tmp_path_factory.mktemp("quick")
    argv = ["run", "--config", str(workspace / "config.json"), *QUICK, "--cache-dir", str(out / "cache")]
    assert main(argv + ["--out-dir", str(out / "cold")]) == 0
    assert main(argv + ["--out-dir", str(out / "warm")]) == 0
    return out


def test_variant_both_schema(quick_run):
    rows = _rows(quick_run / "cold" / "results.csv")
    assert list(rows[0]) == list(RESULT_COLUMNS)
    names = [r["concept"] for r in rows]
    assert names == ["person:spatiotemporal", "person:spatial", "random", "random_null"]
    for r in rows[:3]:
        assert r["relative_score"] and len(r["per_set_scores"].split(";")) == 3 and r["p_value"]
        assert float(r["corrected_alpha"]) == pytest.approx(0.05 / 3, rel=1e-5)
    summary = json.loads((quick_run / "cold" / "summary.json").read_text())
    assert summary["n_hypotheses"] == 3 and len(summary["input_clip_ids"]) == 12
    plots = sorted(p.name for p in (quick_run / "cold" / "plots").iterdir())
    assert plots == ["scores_stage3.svg", "significance.svg"]


def test_warm_cache_identical(quick_run):
    assert (quick_run / "cold" / "results.csv").read_bytes() == (quick_run / "warm" / "results.csv").read_bytes()
    cold = json.loads((quick_run / "cold" / "summary.json").read_text())["cache"]
    warm = json.loads((quick_run / "warm" / "summary.json").read_text())["cache"]
    assert cold["hits"] == 0 and warm["misses"] == 0 and warm["hits"] == cold["misses"]
    for name in ("scores_stage3.svg", "significance.svg"):
        assert (quick_run / "cold" / "plots" / name).read_bytes() == (quick_run / "warm" / "plots" / name).read_bytes()


def test_cache_env_override(workspace, tmp_path, monkeypatch):
    monkeypatch.setenv("VIDEOTCAV_CACHE", str(tmp_path / "envcache"))
    cfg = ExperimentConfig.load(workspace / "config.json", {"layers": ["stage3"], "n_random_sets": 2, "random_set_size": 5, "n_inputs": 4})
    run_experiment(cfg, write=False)
    assert any((tmp_path / "envcache").iterdir())


def test_variants_relative_and_random_sets(workspace):
    base = {"layers": ["stage3"], "n_random_sets": 2, "random_set_size": 5, "n_inputs": 6}
    rel = run_experiment(ExperimentConfig.load(workspace / "config.json", {**base, "variant": "relative"}), write=False)
    assert all(r["relative_score"] and not r["per_set_scores"] for r in rel.rows)
    assert "random_null" not in [r["concept"] for r in rel.rows]
    rs = run_experiment(ExperimentConfig.load(workspace / "config.json", {**base, "variant": "random_sets"}), write=False)
    assert all(not r["relative_score"] and r["per_set_scores"] for r in rs.rows)


def test_report_regenerates(quick_run, tmp_path):
    results = quick_run / "cold" / "results.csv"
    assert main(["report", "--results", str(results), "--out", str(tmp_path / "plots")]) == 0
    for name in ("scores_stage3.svg", "significance.svg"):
        assert (tmp_path / "plots" / name).read_bytes() == (quick_run / "cold" / "plots" / name).read_bytes()
    assert main(["report", "--results", str(results), "--out", str(tmp_path / "png"), "--plot-format", "png"]) == 0
    assert (tmp_path / "png" / "significance.png").exists()
    broken = tmp_path / "broken.csv"
    broken.write_text("concept,layer\nx,y\n")
    with pytest.raises(ValueError, match="lacks columns"):
        read_results_csv(broken)


# ---------------------------------------------------------------------------
# gradcam
# ---------------------------------------------------------------------------


def test_gradcam_command(workspace, tmp_path, capsys):
    clip = sorted((workspace / "data" / "clips").glob("*test*.vtc"))[0]
    common = ["gradcam", "--model", str(workspace / "model"), "--clip", str(clip), "--layer", "stage2"]
    assert main(common + ["--class", "right", "--out", str(tmp_path / "name")]) == 0
    assert main(common + ["--class", "1", "--out", str(tmp_path / "index")]) == 0
    pngs = sorted((tmp_path / "name").glob("frame_*.png"))
    assert len(pngs) == 16
    for p in pngs:
        assert p.read_bytes() == (tmp_path / "index" / p.name).read_bytes()
    vol = read_tensor_container(tmp_path / "name" / "heatmap.vtc")
    assert vol["upsampled"].shape == (16, 32, 32)
    assert np.array_equal(vol["values"], read_tensor_container(tmp_path / "index" / "heatmap.vtc")["values"])
    assert main(common + ["--class", "1", "--alpha", "2", "--out", str(tmp_path / "x")]) == 1
    assert "alpha" in capsys.readouterr().err
    shutil.rmtree(tmp_path / "name")
