import csv
import io

import pytest

from devmat.bench import (
    BenchConfig,
    BenchRecord,
    crossover_report,
    main,
    parse_cli,
    records_to_csv,
    run_task,
)


class TestParseCli:
    def test_full_flag_set(self):
        cfg = parse_cli(["--task", "accu", "--sizes", "1e3,1e4", "--dtype", "f32",
                         "--backend", "parallel", "--trials", "5", "--seed", "42",
                         "--out", "r.csv"])
        assert cfg.task == "accu"
        assert cfg.sizes == (1000, 10000)
        assert cfg.backend == "parallel"
        assert cfg.trials == 5
        assert cfg.out == "r.csv"

    def test_unknown_task_lists_valid_ones(self, capsys):
        with pytest.raises(SystemExit) as exc:
            parse_cli(["--task", "sort", "--sizes", "10"])
        assert exc.value.code == 2
        err = capsys.readouterr().err
        assert "accu" in err and "matmul" in err

    def test_non_increasing_sizes_rejected(self, capsys):
        with pytest.raises(SystemExit):
            parse_cli(["--task", "accu", "--sizes", "100,50"])
        assert "strictly increasing" in capsys.readouterr().err

    def test_too_few_trials_rejected(self):
        with pytest.raises(SystemExit):
            parse_cli(["--task", "accu", "--sizes", "10", "--trials", "2"])

    def test_unknown_flag_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            parse_cli(["--task", "accu", "--sizes", "10", "--frobnicate"])
        assert exc.value.code == 2

    def test_config_invariants_direct(self):
        with pytest.raises(ValueError):
            BenchConfig(task="accu", sizes=(10, 10))
        with pytest.raises(ValueError):
            BenchConfig(task="accu", sizes=(10,), dtype="i32")


class TestRunTask:
    def test_accu_deterministic_across_trials(self):
        cfg = BenchConfig(task="accu", sizes=(1024,), backend="reference", trials=3)
        records = run_task(cfg)
        assert len(records) == 3
        values = {r.value for r in records}
        assert len(values) == 1
        assert all(r.seconds > 0 for r in records)

    def test_lu_records_launches(self):
        cfg = BenchConfig(task="lu", sizes=(64,), backend="reference", trials=3)
        records = run_task(cfg)
        assert all(r.launches >= 1 for r in records)

    def test_f64_skipped_on_gated_device(self):
        cfg = BenchConfig(task="matmul", sizes=(32, 64), dtype="f64",
                          backend="parallel", device=1, trials=3)
        records = run_task(cfg)
        assert len(records) == 6
        assert all(r.skip_reason == "precision-unsupported" for r in records)

    @pytest.mark.parametrize("task", ["accu", "axpy", "matmul"])
    def test_timed_region_has_no_staging_transfers(self, task):
        cfg = BenchConfig(task=task, sizes=(256,), backend="reference", trials=3)
        records = run_task(cfg)
        for r in records:
            assert r.transfers_h2d == 0
            # accu's single scalar readback is the task's own result
            assert r.transfers_d2h <= (1 if task == "accu" else 0)


class TestCsv:
    def test_header_and_row_shape(self):
        cfg = BenchConfig(task="accu", sizes=(64,), backend="reference", trials=3)
        text = records_to_csv(run_task(cfg))
        rows = list(csv.reader(io.StringIO(text)))
        assert rows[0] == ["task", "backend", "dtype", "n", "trial", "seconds",
                           "launches", "transfers_d2h", "transfers_h2d"]
        assert len(rows) == 4
        float(rows[1][5])  # seconds parse

    def test_newline_terminated(self):
        cfg = BenchConfig(task="accu", sizes=(64,), backend="reference", trials=3)
        assert records_to_csv(run_task(cfg)).endswith("\n")

    def test_non_timing_columns_deterministic(self):
        cfg = BenchConfig(task="axpy", sizes=(128, 256), backend="reference",
                          trials=3, seed=99)
        strip = lambda text: [row[:5] + row[6:] for row in csv.reader(io.StringIO(text))]
        first = strip(records_to_csv(run_task(cfg)))
        second = strip(records_to_csv(run_task(cfg)))
        assert first == second

    def test_skip_rows_carry_reason(self):
        cfg = BenchConfig(task="accu", sizes=(32,), dtype="f64",
                          backend="parallel", device=1, trials=3)
        text = records_to_csv(run_task(cfg))
        rows = list(csv.reader(io.StringIO(text)))
        assert rows[1][5] == "skipped:precision-unsupported"


def _fake(backend, n, seconds, trial=0):
    return BenchRecord("matmul", backend, "f32", n, trial, seconds, 1, 0, 0)


class TestCrossoverReport:
    def test_identical_timings_mean_no_crossover(self):
        records = []
        for n in (64, 128):
            for t in range(3):
                records.append(_fake("reference", n, 1.0, t))
                records.append(_fake("parallel", n, 1.0, t))
        text, status = crossover_report(records)
        assert "no crossover in range" in text
        assert status == 3

    def test_parallel_winning_from_512(self):
        records = []
        for n in (64, 256, 512, 1024):
            for t in range(3):
                records.append(_fake("reference", n, 1.0, t))
                records.append(_fake("parallel", n, 2.0 if n < 512 else 0.5, t))
        text, status = crossover_report(records)
        assert "crossover at n=512" in text
        assert status == 0

    def test_median_not_mean(self):
        records = []
        for t, s in enumerate((1.0, 1.0, 100.0)):  # median 1.0, mean 34
            records.append(_fake("reference", 64, s, t))
        for t in range(3):
            records.append(_fake("parallel", 64, 1.5, t))
        text, status = crossover_report(records)
        assert status == 3

    def test_grid_mismatch_rejected(self):
        records = [_fake("reference", 64, 1.0), _fake("parallel", 128, 1.0)]
        with pytest.raises(ValueError):
            crossover_report(records)

    def test_single_backend_rejected(self):
        with pytest.raises(ValueError):
            crossover_report([_fake("reference", 64, 1.0)])


class TestMain:
    def test_single_backend_writes_csv(self, tmp_path):
        out = tmp_path / "r.csv"
        rc = main(["--task", "accu", "--sizes", "64,128", "--backend", "reference",
                   "--trials", "3", "--out", str(out)])
        assert rc == 0
        rows = list(csv.reader(out.open()))
        assert len(rows) == 7

    def test_report_mode_runs_both_backends(self, tmp_path, capsys):
        out = tmp_path / "r.csv"
        report = tmp_path / "report.txt"
        rc = main(["--task", "accu", "--sizes", "128,512", "--trials", "3",
                   "--out", str(out), "--report", str(report)])
        text = report.read_text()
        assert "crossover report: task=accu dtype=f32" in text
        assert rc in (0, 3)
        rows = list(csv.reader(out.open()))
        backends = {row[1] for row in rows[1:]}
        assert backends == {"reference", "parallel"}
