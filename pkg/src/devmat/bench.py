"""Benchmark harness: four timing tasks, CSV output, crossover report.

Tasks (one expression each, bracketed by queue barriers so wall time covers
exactly the device work):

* ``accu``   - sum all elements of a random vector
* ``axpy``   - ``B += 3 * A`` on random vectors
* ``matmul`` - square matrix product
* ``lu``     - LU factorization (folded two-output form)

Operands are staged and the queue drained before the clock starts, so the
timed region carries no data-staging transfers (``accu`` moves its single
result scalar back, which is inherent to the task).  The crossover report
compares per-size medians on the reference and parallel backends and names
the smallest size where parallel wins.
"""

from __future__ import annotations

import argparse
import csv
import io
import os
import statistics
import sys
from dataclasses import dataclass, replace

from . import linalg, ops
from . import runtime as _rt
from .errors import PrecisionUnsupportedError
from .matrix import Col, Matrix

TASKS = ("accu", "axpy", "matmul", "lu")

CSV_HEADER = ("task", "backend", "dtype", "n", "trial", "seconds",
              "launches", "transfers_d2h", "transfers_h2d")


@dataclass(frozen=True)
class BenchConfig:
    task: str
    sizes: tuple[int, ...]
    dtype: str = "f32"
    backend: str = "reference"
    device: int = 0
    trials: int = 3
    seed: int = 42
    out: str | None = None
    report: str | None = None

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; valid tasks: {', '.join(TASKS)}")
        if self.trials < 3:
            raise ValueError("trials must be >= 3")
        if self.dtype not in ("f32", "f64"):
            raise ValueError("dtype must be f32 or f64")
        if not self.sizes or any(b <= a for a, b in zip(self.sizes, self.sizes[1:])):
            raise ValueError("sizes must be strictly increasing")


@dataclass(frozen=True)
class BenchRecord:
    task: str
    backend: str
    dtype: str
    n: int
    trial: int
    seconds: float | None
    launches: int = 0
    transfers_d2h: int = 0
    transfers_h2d: int = 0
    skip_reason: str | None = None
    value: float | None = None  # task result, for determinism checks; not in CSV

    def csv_row(self) -> tuple:
        if self.skip_reason is not None:
            seconds = f"skipped:{self.skip_reason}"
        else:
            seconds = f"{self.seconds:.9f}"
        return (self.task, self.backend, self.dtype, self.n, self.trial,
                seconds, self.launches, self.transfers_d2h, self.transfers_h2d)


def _ensure_backend(backend: str, device: int) -> None:
    if _rt.is_initialised():
        desc = _rt.get_runtime().descriptor
        if desc.backend_name == backend and desc.device_id == device:
            return
        _rt.shutdown()
    _rt.init(backend, device_id=device)


def _stage(task: str, n: int, dtype: str):
    if task == "accu":
        return (Col(n, fill="randu", elem_type=dtype),)
    if task == "axpy":
        return (Col(n, fill="randu", elem_type=dtype),
                Col(n, fill="randu", elem_type=dtype))
    # square-matrix tasks
    if task == "matmul":
        return (Matrix(n, n, fill="randu", elem_type=dtype),
                Matrix(n, n, fill="randu", elem_type=dtype))
    return (Matrix(n, n, fill="randu", elem_type=dtype),)


def _run_once(task: str, operands) -> tuple[float | None, list]:
    if task == "accu":
        return ops.accu(operands[0]), []
    if task == "axpy":
        a, b = operands
        b += 3 * a
        return None, []
    if task == "matmul":
        a, b = operands
        return None, [(a @ b).eval()]
    low, upper = linalg.lu_folded(operands[0])
    return None, [low, upper]


def run_task(cfg: BenchConfig) -> list[BenchRecord]:
    """Execute one task across the size grid; one record per (size, trial)."""
    _ensure_backend(cfg.backend, cfg.device)
    rt = _rt.get_runtime()
    records: list[BenchRecord] = []
    for n in cfg.sizes:
        for trial in range(cfg.trials):
            _rt.set_seed(cfg.seed)
            try:
                operands = _stage(cfg.task, n, cfg.dtype)
            except PrecisionUnsupportedError:
                records.append(BenchRecord(cfg.task, cfg.backend, cfg.dtype, n,
                                           trial, None,
                                           skip_reason="precision-unsupported"))
                continue
            _rt.synchronise()
            before = rt.counters_snapshot()
            clock = _rt.wall_clock()
            clock.tic()
            value, extra = _run_once(cfg.task, operands)
            _rt.synchronise()
            seconds = clock.toc()
            delta = rt.counters_snapshot() - before
            records.append(BenchRecord(
                cfg.task, cfg.backend, cfg.dtype, n, trial, seconds,
                delta.launches, delta.transfers_d2h, delta.transfers_h2d,
                value=value))
            for m in list(operands) + extra:
                m._release_storage()
    return records


def write_csv(records, stream) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in records:
        writer.writerow(r.csv_row())


def records_to_csv(records) -> str:
    buf = io.StringIO()
    write_csv(records, buf)
    return buf.getvalue()


def crossover_report(records) -> tuple[str, int]:
    """Compare per-size medians across the two backends.

    Returns the report text and an exit status (0 when the parallel backend
    beats the reference backend at some size, 3 otherwise).  A tie never
    counts as a win.
    """
    usable = [r for r in records if r.skip_reason is None]
    tasks = {(r.task, r.dtype) for r in usable}
    if len(tasks) != 1:
        raise ValueError("crossover report needs records for exactly one (task, dtype)")
    task, dtype = tasks.pop()

    by_backend: dict[str, dict[int, list[float]]] = {}
    for r in usable:
        by_backend.setdefault(r.backend, {}).setdefault(r.n, []).append(r.seconds)
    if set(by_backend) != {"reference", "parallel"}:
        raise ValueError("crossover report needs both reference and parallel records")
    ref, par = by_backend["reference"], by_backend["parallel"]
    if sorted(ref) != sorted(par):
        raise ValueError("size grids differ between backends")

    lines = [
        f"crossover report: task={task} dtype={dtype}",
        f"hardware-threads: {os.cpu_count()}",
        f"{'n':>8}  {'reference':>13}  {'parallel':>13}  winner",
    ]
    crossover = None
    for n in sorted(ref):
        mr = statistics.median(ref[n])
        mp = statistics.median(par[n])
        winner = "parallel" if mp < mr else "reference"
        lines.append(f"{n:>8}  {mr:>13.6e}  {mp:>13.6e}  {winner}")
        if crossover is None and mp < mr:
            crossover = n
    if crossover is None:
        lines.append("no crossover in range")
        status = 3
    else:
        lines.append(f"crossover at n={crossover}")
        status = 0
    return "\n".join(lines) + "\n", status


# ---------------------------------------------------------------------------
# CLI

def parse_cli(argv) -> BenchConfig:
    parser = argparse.ArgumentParser(
        prog="devmat-bench",
        description="Time devmat operations across backends and sizes.")
    parser.add_argument("--task", required=True,
                        help=f"one of: {', '.join(TASKS)}")
    parser.add_argument("--sizes", required=True,
                        help="comma-separated, strictly increasing (1e3 shorthand ok)")
    parser.add_argument("--dtype", default="f32", help="f32 or f64")
    parser.add_argument("--backend", default="reference",
                        help="reference or parallel (ignored with --report)")
    parser.add_argument("--device", type=int, default=0, help="device id")
    parser.add_argument("--trials", type=int, default=3, help="trials per size (>= 3)")
    parser.add_argument("--seed", type=int, default=42, help="RNG seed")
    parser.add_argument("--out", default=None, help="CSV output path (default: stdout)")
    parser.add_argument("--report", default=None,
                        help="run both backends and write the crossover report here")
    args = parser.parse_args(argv)

    try:
        sizes = tuple(int(float(tok)) for tok in args.sizes.split(",") if tok)
    except ValueError:
        parser.error(f"could not parse sizes {args.sizes!r}")
    try:
        return BenchConfig(task=args.task, sizes=sizes, dtype=args.dtype,
                           backend=args.backend, device=args.device,
                           trials=args.trials, seed=args.seed,
                           out=args.out, report=args.report)
    except ValueError as exc:
        parser.error(str(exc))


def main(argv=None) -> int:
    cfg = parse_cli(argv if argv is not None else sys.argv[1:])
    if cfg.report:
        records = run_task(replace(cfg, backend="reference", device=0))
        records += run_task(replace(cfg, backend="parallel"))
        text, status = crossover_report(records)
    else:
        records = run_task(cfg)
        text, status = None, 0

    if cfg.out:
        with open(cfg.out, "w", encoding="utf-8") as fh:
            write_csv(records, fh)
    elif not cfg.report:
        write_csv(records, sys.stdout)

    if text is not None:
        with open(cfg.report, "w", encoding="utf-8") as fh:
            fh.write(text)
        sys.stdout.write(text)
    return status


if __name__ == "__main__":
    sys.exit(main())
