import os
import random

import numpy as np
import pytest

from dropleak import data
from dropleak.harness import (ExperimentConfig, RunResult, SweepReport, emit_figures, run_sweep, train_classifier,
                              write_synthetic_cifar)


def small_config(tmp_path, **kw):
    base = dict(dropout_rates=[0.0], seeds=[0], image_indices=[0], image_size=8, iterations=5,
                out_dir=str(tmp_path / "out"))
    base.update(kw)
    return ExperimentConfig(**base)


def listing(root):
    return sorted(os.path.relpath(os.path.join(d, f), root) for d, _, files in os.walk(root) for f in files)


def test_config_text_roundtrip():
    cfg = ExperimentConfig(dropout_rates=[0.0, 0.25], seeds=[1, 2], iterations=10, clamp_pixels=True)
    again = ExperimentConfig.from_text(cfg.to_text())
    assert again == cfg


def test_config_parsing_and_errors():
    cfg = ExperimentConfig.from_text("# comment\nsweep.seeds = 3, 4\n\nattack.lr = 0.5  # inline\n")
    assert cfg.seeds == [3, 4] and cfg.lr == 0.5 and cfg.iterations == 5800
    with pytest.raises(ValueError, match="unknown key"):
        ExperimentConfig.from_text("sweep.bogus = 1\n")
    with pytest.raises(ValueError):
        ExperimentConfig.from_text("sweep.seeds\n")
    with pytest.raises(ValueError):
        ExperimentConfig(dropout_rates=[1.0])
    with pytest.raises(ValueError):
        ExperimentConfig(seeds=[])
    with pytest.raises(ValueError):
        ExperimentConfig(image_indices=[])


def test_single_cell_sweep_bookkeeping(tmp_path):
    cfg = small_config(tmp_path)
    report = run_sweep(cfg)
    out = tmp_path / "out"
    assert listing(out) == ["config.txt", "report.csv", "runs/p0.00_s0_i0.recon.ppm",
                            "runs/p0.00_s0_i0.trace.csv", "runs/p0.00_s0_i0.truth.ppm", "summary.csv"]
    assert len(report.rows) == 1
    lines = (out / "report.csv").read_text().splitlines()
    assert len(lines) == 2 and lines[0].startswith("rate,seed,image")
    assert (out / "config.txt").read_text() == cfg.to_text()
    assert report.rows[0].label_correct


def test_config_snapshot_is_verbatim(tmp_path):
    text = "# my sweep\nsweep.dropout_rates = 0.0\nimage.size = 8\nattack.iterations = 3\n" \
           f"output.dir = {tmp_path / 'snap'}\n"
    run_sweep(ExperimentConfig.from_text(text), config_text=text)
    assert (tmp_path / "snap" / "config.txt").read_text() == text


def test_sweep_rerun_is_byte_identical(tmp_path):
    cfg_a = small_config(tmp_path, dropout_rates=[0.0, 0.5], out_dir=str(tmp_path / "a"))
    cfg_b = small_config(tmp_path, dropout_rates=[0.0, 0.5], out_dir=str(tmp_path / "b"))
    emit_figures(run_sweep(cfg_a), cfg_a.out_dir)
    emit_figures(run_sweep(cfg_b), cfg_b.out_dir)
    files = listing(tmp_path / "a")
    assert files == listing(tmp_path / "b")
    for f in files:
        if f != "config.txt":
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f


def test_parallel_jobs_match_serial(tmp_path):
    serial = run_sweep(small_config(tmp_path, seeds=[0, 1], out_dir=str(tmp_path / "s")))
    parallel = run_sweep(small_config(tmp_path, seeds=[0, 1], jobs=2, out_dir=str(tmp_path / "p")))
    assert (tmp_path / "s" / "report.csv").read_bytes() == (tmp_path / "p" / "report.csv").read_bytes()
    assert [r.final_rmse for r in serial.rows] == [r.final_rmse for r in parallel.rows]


def test_failed_runs_are_recorded_and_sweep_continues(tmp_path):
    batch = tmp_path / "b.bin"
    data.write_cifar10(batch, [(3, np.zeros((3, 32, 32), np.uint8))])
    cfg = small_config(tmp_path, image_source="cifar", cifar_path=str(batch), image_size=32,
                       image_indices=[0, 5], iterations=2)
    report = run_sweep(cfg)
    assert [r.status == "ok" for r in report.rows] == [True, False]
    assert "IndexError" in report.rows[1].status
    assert len((tmp_path / "out" / "report.csv").read_text().splitlines()) == 3


def test_timing_column_is_opt_in(tmp_path):
    run_sweep(small_config(tmp_path, record_timing=True))
    assert (tmp_path / "out" / "report.csv").read_text().splitlines()[0].endswith("wall_clock_s")


def fake_rows():
    rng = np.random.default_rng(0)
    rows = []
    for rate in (0.0, 0.5):
        for seed in range(5):
            r = RunResult(rate=rate, seed=seed, image=0, true_label=1, extracted_label=1,
                          final_rmse=float(rng.random()), final_distance=float(rng.random()))
            r.rmse_curve = list(rng.random(4))
            r.reconstruction = rng.random((3, 32, 32))
            r.ground_truth = np.full((3, 32, 32), 0.25)
            rows.append(r)
    return rows


def test_medians_invariant_to_row_order():
    rows = fake_rows()
    ref = SweepReport(rows).medians()
    for seed in range(5):
        shuffled = rows[:]
        random.Random(seed).shuffle(shuffled)
        assert SweepReport(shuffled).medians() == ref
    assert ref[0.0]["median_rmse"] == pytest.approx(np.median([r.final_rmse for r in rows[:5]]))


def test_emit_figures_strip_layout(tmp_path):
    rows = []
    for rate in (0.0, 0.1, 0.2, 0.3, 0.4, 0.5):
        r = RunResult(rate=rate, seed=0, image=0)
        r.rmse_curve = [0.5, 0.4]
        r.reconstruction = np.full((3, 32, 32), rate)
        r.ground_truth = data.synth_image(1, "gradient-ramp")
        rows.append(r)
    emit_figures(SweepReport(rows), tmp_path)
    strip = data.read_ppm(tmp_path / "strip.ppm")
    assert strip.shape == (3, 32, 7 * 32)
    data.export_ppm(rows[0].ground_truth, tmp_path / "gt.ppm")
    np.testing.assert_array_equal(strip[:, :, :32], data.read_ppm(tmp_path / "gt.ppm"))
    curves = (tmp_path / "rmse_curves.csv").read_text().splitlines()
    assert curves[0] == "iteration,rmse_p0.00,rmse_p0.10,rmse_p0.20,rmse_p0.30,rmse_p0.40,rmse_p0.50"
    assert len(curves) == 3


def test_emit_figures_empty_report_writes_nothing(tmp_path):
    out = tmp_path / "figs"
    with pytest.raises(ValueError):
        emit_figures(SweepReport([]), out)
    assert not out.exists()


def test_untrained_accuracy_is_chance(tmp_path):
    d = write_synthetic_cifar(tmp_path / "syn", n_train=64, n_test=1000, seed=0)
    acc = train_classifier(0.0, 64, 0, 0, d)
    n = 1000
    assert abs(acc - 0.1) < 3 * np.sqrt(0.1 * 0.9 / n) + 0.1  # chance plus class-imbalance slack


def test_short_training_beats_chance(tmp_path):
    d = write_synthetic_cifar(tmp_path / "syn", n_train=1500, n_test=300, seed=1)
    assert train_classifier(0.0, 1500, 3, 1, d) > 0.15


def test_training_requires_dataset(tmp_path):
    with pytest.raises(FileNotFoundError):
        train_classifier(0.0, 10, 1, 0, str(tmp_path))
