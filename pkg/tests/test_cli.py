import csv
import json
import subprocess
import sys
from pathlib import Path

import pytest

from chemocal.cli import main


def run_cli(*argv):
    return main(list(argv))


@pytest.fixture(scope="module")
def tiny_fixture(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    assert run_cli("synth", "--size", "tiny", "--seed", "7",
                   "--out", str(root)) == 0
    return root


@pytest.fixture(scope="module")
def tiny_pipeline(tiny_fixture, tmp_path_factory):
    """Full tiny run: calibrate -> predict -> artifacts directory."""
    out = tmp_path_factory.mktemp("run")
    model = out / "model.json"
    predictions = out / "predictions.csv"
    assert run_cli("calibrate",
                   "--subsamples", str(tiny_fixture / "subsamples.csv"),
                   "--references", str(tiny_fixture / "references.csv"),
                   "--out", str(model), "--components", "3",
                   "--pipeline", "snv_sg", "--seed", "7") == 0
    assert run_cli("predict", "--model", str(model),
                   "--subsamples", str(tiny_fixture / "subsamples.csv"),
                   "--out", str(predictions)) == 0
    return tiny_fixture, out


def test_synth_writes_fixture_files(tiny_fixture):
    for name in ("subsamples.csv", "references.csv", "truth.csv"):
        assert (tiny_fixture / name).exists()


def test_synth_requires_seed(capsys):
    assert run_cli("synth", "--size", "tiny", "--out", "/tmp/x") == 1
    assert "usage" in capsys.readouterr().err


def test_unknown_flag_is_usage_error(capsys):
    assert run_cli("synth", "--frobnicate") == 1


def test_smoke_synth_calibrate_correct(tiny_pipeline):
    fixture, out = tiny_pipeline
    report_dir = out / "correct"
    assert run_cli("correct", "--predictions", str(out / "predictions.csv"),
                   "--references", str(fixture / "references.csv"),
                   "--out-dir", str(report_dir), "--source", "both") == 0
    report = json.loads((report_dir / "correction_report.json").read_text())
    assert set(report["bm"]) == {"train", "val", "test"}
    assert set(report["corrected_test"]) == {"train_sourced", "val_sourced"}
    for name in ("bulk_aggregates.csv", "corrected_test_train.csv",
                 "corrected_test_val.csv", "parity_bm.svg",
                 "parity_corrected_train.svg"):
        assert (report_dir / name).exists(), name


def test_diagnose_and_density_artifacts(tiny_pipeline):
    fixture, out = tiny_pipeline
    diag_dir = out / "diag"
    assert run_cli("diagnose", "--predictions", str(out / "predictions.csv"),
                   "--references", str(fixture / "references.csv"),
                   "--out-dir", str(diag_dir), "--split", "train") == 0
    assert (diag_dir / "distribution_train.csv").exists()
    assert (diag_dir / "distribution_train_omnibus.svg").exists()

    dens_dir = out / "dens"
    assert run_cli("density", "--predictions", str(out / "predictions.csv"),
                   "--subsamples", str(fixture / "subsamples.csv"),
                   "--references", str(fixture / "references.csv"),
                   "--out-dir", str(dens_dir)) == 0
    assert (dens_dir / "density_bins.csv").exists()
    assert (dens_dir / "density_cumulative.csv").exists()
    assert (dens_dir / "density.svg").exists()


def test_calibrate_missing_reference_is_data_error(tiny_fixture, tmp_path, capsys):
    refs = tmp_path / "refs.csv"
    rows = (tiny_fixture / "references.csv").read_text().splitlines()
    refs.write_text("\n".join(rows[:-1]) + "\n")  # drop the last bulk
    code = run_cli("calibrate", "--subsamples", str(tiny_fixture / "subsamples.csv"),
                   "--references", str(refs), "--out", str(tmp_path / "m.json"),
                   "--components", "2", "--seed", "7")
    err = capsys.readouterr().err
    assert code == 2
    assert err.startswith("error: data:")
    missing_bulk = rows[-1].split(",")[0]
    assert missing_bulk in err


def test_bulk_mode_calibration(tiny_fixture, tmp_path):
    model = tmp_path / "bulk_model.json"
    assert run_cli("calibrate", "--subsamples", str(tiny_fixture / "subsamples.csv"),
                   "--references", str(tiny_fixture / "references.csv"),
                   "--out", str(model), "--mode", "bulk", "--components", "2",
                   "--pipeline", "snv_sg", "--seed", "7") == 0
    payload = json.loads(model.read_text())
    assert payload["level"] == "bulk"
    pred = tmp_path / "bulk_predictions.csv"
    assert run_cli("predict", "--model", str(model),
                   "--subsamples", str(tiny_fixture / "subsamples.csv"),
                   "--out", str(pred), "--bulk-means") == 0
    with pred.open() as fh:
        rows = list(csv.DictReader(fh))
    # one pseudo-subsample per bulk: ids equal bulk ids
    assert {r["subsample_id"] for r in rows} == {r["bulk_id"] for r in rows}


def test_external_predictions_flow(tiny_fixture, tmp_path):
    external = tmp_path / "external.csv"
    subs_path = tiny_fixture / "subsamples.csv"
    with subs_path.open() as fh:
        subsample_rows = list(csv.DictReader(fh))
    with external.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subsample_id", "bulk_id", "split", "fold",
                         "constituent", "yhat"])
        for rec in subsample_rows:
            for c in range(5):
                writer.writerow([rec["subsample_id"], rec["bulk_id"], rec["split"],
                                 rec["fold"], c, 12.0 + 0.1 * c])
    out = tmp_path / "pred.csv"
    assert run_cli("predict", "--external", str(external),
                   "--subsamples", str(subs_path), "--out", str(out)) == 0
    with out.open() as fh:
        rows = [r for r in csv.DictReader(fh)
                if r["constituent"] == "ensemble" and r["split"] == "test"]
    assert rows and all(abs(float(r["yhat"]) - 12.2) < 1e-12 for r in rows)


def test_report_bundles_everything(tiny_pipeline, tmp_path):
    fixture, out = tiny_pipeline
    bundle = tmp_path / "bundle"
    assert run_cli("report", "--predictions", str(out / "predictions.csv"),
                   "--subsamples", str(fixture / "subsamples.csv"),
                   "--references", str(fixture / "references.csv"),
                   "--out-dir", str(bundle)) == 0
    names = {p.name for p in bundle.iterdir()}
    assert "correction_report.json" in names
    assert "distribution_train.csv" in names
    assert "density_bins.csv" in names


def test_classification_flow(tmp_path):
    import numpy as np

    from chemocal.cube import Subsample, write_subsample_csv
    from chemocal.synth import default_baseline

    rng = np.random.default_rng(9)
    baseline = default_baseline(102)
    direction = np.zeros(102)
    direction[30:50] = 0.05
    rows, refs = [], []
    for i in range(12):
        bulk = f"V{i:02d}"
        label = "wheat" if i % 2 == 0 else "rye"
        refs.append(f"{bulk},{label}")
        split = "train" if i < 9 else "test"
        sign = 1.0 if label == "wheat" else -1.0
        for j in range(30):
            spec = baseline + sign * direction + rng.normal(0, 0.01, 102)
            rows.append(Subsample(f"{bulk}_S{j:03d}", bulk, split, None,
                                  float(rng.uniform(0.1, 1.0)), spec))
    subs = tmp_path / "subsamples.csv"
    write_subsample_csv(rows, subs)
    ref_path = tmp_path / "references.csv"
    ref_path.write_text("bulk_id,value\n" + "\n".join(refs) + "\n")

    model = tmp_path / "clf.json"
    assert run_cli("calibrate", "--subsamples", str(subs),
                   "--references", str(ref_path), "--out", str(model),
                   "--task", "classification", "--pipeline", "center",
                   "--components", "2", "--seed", "9") == 0
    pred = tmp_path / "pred.csv"
    assert run_cli("predict", "--model", str(model), "--subsamples", str(subs),
                   "--out", str(pred)) == 0
    with pred.open() as fh:
        label_rows = [r for r in csv.DictReader(fh) if r["split"] == "test"
                      and r["constituent"] == "ensemble"]
    assert label_rows and set(r["yhat"] for r in label_rows) <= {"wheat", "rye"}

    dens_dir = tmp_path / "dens"
    assert run_cli("density", "--predictions", str(pred),
                   "--subsamples", str(subs), "--references", str(ref_path),
                   "--out-dir", str(dens_dir), "--metric", "acc",
                   "--no-plots") == 0
    header = (dens_dir / "density_bins.csv").read_text().splitlines()[0]
    assert header == "bin_lo,bin_hi,count,metric_mean,metric_sem"


def test_preprocess_cubes_to_subsample_table(tmp_path):
    import numpy as np

    from chemocal.cube import HsiCube, read_subsample_csv, write_cube

    rng = np.random.default_rng(3)
    for name, split in (("lotA", "train"), ("lotB", "test")):
        reflectance = rng.uniform(0.05, 0.15, (224, 192, 192))
        reflectance[:, 20:150, 30:170] += 0.6  # bright grain region
        write_cube(HsiCube(reflectance), tmp_path / f"{name}.raw")
    bulk_map = tmp_path / "map.csv"
    bulk_map.write_text("file,bulk_id,split,fold\n"
                        "lotA.raw,LOT_A,train,0\n"
                        "lotB.raw,LOT_B,test,\n")
    out = tmp_path / "subsamples.csv"
    assert run_cli("preprocess", "--cubes", str(tmp_path / "lotA.raw"),
                   str(tmp_path / "lotB.raw"), "--bulk-map", str(bulk_map),
                   "--out", str(out)) == 0
    rows = read_subsample_csv(out)
    assert rows and all(r.mean_spectrum.size == 102 for r in rows)
    assert {r.bulk_id for r in rows} == {"LOT_A", "LOT_B"}
    assert all(r.split == "test" and r.fold is None
               for r in rows if r.bulk_id == "LOT_B")
    assert all(r.density >= 0.1 for r in rows)
    # 192x192 with window 128 / stride 64 gives at most 2x2 anchors per cube
    assert all(r.row in (0, 64) and r.col in (0, 64) for r in rows)


def test_threads_env_fallback(tiny_fixture, tmp_path, monkeypatch):
    monkeypatch.setenv("CHEMOCAL_THREADS", "3")
    model = tmp_path / "model.json"
    assert run_cli("calibrate", "--subsamples", str(tiny_fixture / "subsamples.csv"),
                   "--references", str(tiny_fixture / "references.csv"),
                   "--out", str(model), "--components", "2", "--seed", "7") == 0
    assert model.exists()


def test_svg_artifacts_carry_no_timestamp(tiny_pipeline):
    fixture, out = tiny_pipeline
    svg_dir = out / "svg_check"
    assert run_cli("correct", "--predictions", str(out / "predictions.csv"),
                   "--references", str(fixture / "references.csv"),
                   "--out-dir", str(svg_dir), "--source", "train") == 0
    for svg in svg_dir.glob("*.svg"):
        text = svg.read_text()
        assert "dc:date" not in text and "Date:" not in text


def test_console_entry_point_runs():
    proc = subprocess.run([sys.executable, "-m", "chemocal", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert "chemocal" in proc.stdout


def _pipeline_artifacts(root: Path, seed: str, threads: str):
    fixture = root / "fixture"
    run = root / "run"
    run.mkdir(parents=True)
    assert run_cli("synth", "--size", "tiny", "--seed", seed,
                   "--out", str(fixture)) == 0
    assert run_cli("calibrate", "--subsamples", str(fixture / "subsamples.csv"),
                   "--references", str(fixture / "references.csv"),
                   "--out", str(run / "model.json"), "--components", "3",
                   "--pipeline", "snv_sg", "--seed", seed,
                   "--threads", threads) == 0
    assert run_cli("predict", "--model", str(run / "model.json"),
                   "--subsamples", str(fixture / "subsamples.csv"),
                   "--out", str(run / "predictions.csv")) == 0
    assert run_cli("report", "--predictions", str(run / "predictions.csv"),
                   "--subsamples", str(fixture / "subsamples.csv"),
                   "--references", str(fixture / "references.csv"),
                   "--out-dir", str(run / "report"), "--no-plots") == 0
    out = {}
    for path in sorted(root.rglob("*")):
        if path.suffix in (".csv", ".json"):
            out[str(path.relative_to(root))] = path.read_bytes()
    return out


def test_threads_do_not_change_outputs(tmp_path):
    a = _pipeline_artifacts(tmp_path / "t1", "21", "1")
    b = _pipeline_artifacts(tmp_path / "t4", "21", "4")
    assert a.keys() == b.keys()
    for key in a:
        assert a[key] == b[key], f"artifact differs: {key}"
