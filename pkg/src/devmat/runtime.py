"""Process-wide runtime: devices, command queue, memory, kernel cache, counters.

This module is the single gateway between the rest of the library and the
simulated accelerator devices.  Device memory is owned here; other modules
hold only opaque :class:`DeviceBuffer` handles and interact through the
operations below (allocate, enqueue, synchronise, copy, scalar reads).

Two backends are provided:

* ``"reference"`` executes every invocation synchronously on the calling
  thread with a single worker.  It stands in for the host CPU baseline.
* ``"parallel"`` owns a FIFO command queue drained by a dispatcher thread;
  each invocation's block grid is spread over a pool of worker threads.
  Device id 0 supports f64; device id 1 does not, which makes the
  precision-gating path testable.

Kernels are "compiled" at init by rendering and hashing their source
templates; hashes are cached in ``kernels.manifest`` under the directory
named by ``KERNEL_CACHE_DIR`` (default ``~/.devmat``) so a warm start does
zero compiles.
"""

from __future__ import annotations

import hashlib
import os
import queue
import threading
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import kernels
from .errors import (
    BackendError,
    BufferError_,
    KernelCacheWarning,
    PrecisionUnsupportedError,
)

__version__ = "0.1.0"

BACKENDS = ("reference", "parallel")

CACHE_DIR_ENV = "KERNEL_CACHE_DIR"
BACKEND_ENV = "DEFAULT_BACKEND"
SEED_ENV = "RNG_SEED"

MANIFEST_NAME = "kernels.manifest"


# ---------------------------------------------------------------------------
# Domain types

@dataclass(frozen=True)
class DeviceDescriptor:
    backend_name: str
    device_id: int
    worker_count: int
    supports_f64: bool

    @property
    def descriptor_hash(self) -> str:
        text = (
            f"backend={self.backend_name};device={self.device_id};"
            f"workers={self.worker_count};f64={int(self.supports_f64)};"
            f"version={__version__}"
        )
        return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class DeviceBuffer:
    device_id: int
    buffer_id: int
    length: int
    elem_type: str


@dataclass(frozen=True)
class FlatView:
    """1-D strided window into a buffer (offsets and strides in elements)."""
    buf: DeviceBuffer
    offset: int = 0
    count: int = -1  # -1 means the whole buffer
    stride: int = 1


@dataclass(frozen=True)
class BlockView:
    """2-D column-major window: element (r, c) sits at offset + r + c * lda."""
    buf: DeviceBuffer
    offset: int
    rows: int
    cols: int
    lda: int


@dataclass(frozen=True)
class KernelInvocation:
    kind: str
    inputs: tuple = ()
    output: object = None  # FlatView | BlockView | None
    scalars: tuple = ()
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class KernelCacheEntry:
    descriptor_hash: str
    kind: str
    in_type: str
    out_type: str
    source_hash: str

    def line(self) -> str:
        return "\t".join((self.descriptor_hash, self.kind, self.in_type,
                          self.out_type, self.source_hash))


@dataclass
class Counters:
    launches: int = 0
    compiles: int = 0
    cache_hits: int = 0
    transfers_h2d: int = 0
    transfers_d2h: int = 0
    bytes_h2d: int = 0
    bytes_d2h: int = 0
    buffers_acquired: int = 0
    buffers_released: int = 0

    def __sub__(self, other: "Counters") -> "Counters":
        return Counters(**{
            f.name: getattr(self, f.name) - getattr(other, f.name)
            for f in fields(Counters)
        })

    def copy(self) -> "Counters":
        return replace(self)


# ---------------------------------------------------------------------------
# Kernel cache manifest

def _manifest_path(cache_dir: Path) -> Path:
    return cache_dir / MANIFEST_NAME


def _is_hash(text: str) -> bool:
    return len(text) == 16 and all(c in "0123456789abcdef" for c in text)


def load_manifest(cache_dir: Path) -> dict[tuple, KernelCacheEntry]:
    """Parse the cache manifest; a corrupt file degrades to a cold cache."""
    path = _manifest_path(cache_dir)
    if not path.exists():
        return {}
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        warnings.warn(f"unreadable kernel cache {path}: {exc}", KernelCacheWarning)
        return {}
    if text and not text.endswith("\n"):
        warnings.warn(f"truncated kernel cache {path}; treating as cold",
                      KernelCacheWarning)
        return {}
    entries: dict[tuple, KernelCacheEntry] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line:
            continue
        parts = line.split("\t")
        ok = (len(parts) == 5 and _is_hash(parts[0]) and _is_hash(parts[4])
              and parts[1] in kernels.ALL_KINDS
              and parts[2] in kernels.ELEM_TYPES
              and parts[3] in kernels.ELEM_TYPES)
        if not ok:
            warnings.warn(
                f"corrupt kernel cache {path} (line {lineno}); treating as cold",
                KernelCacheWarning,
            )
            return {}
        e = KernelCacheEntry(*parts)
        entries[(e.descriptor_hash, e.kind, e.in_type, e.out_type)] = e
    return entries


def store_manifest(cache_dir: Path, entries: dict[tuple, KernelCacheEntry]) -> None:
    cache_dir.mkdir(parents=True, exist_ok=True)
    lines = sorted(e.line() for e in entries.values())
    tmp = _manifest_path(cache_dir).with_suffix(".tmp")
    tmp.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    tmp.replace(_manifest_path(cache_dir))


# ---------------------------------------------------------------------------
# Devices

class _DeviceState:
    """Owns the backing arrays for one simulated device. Internal only."""

    def __init__(self, descriptor: DeviceDescriptor):
        self.descriptor = descriptor
        self._arrays: dict[int, np.ndarray] = {}

    def allocate(self, buf: DeviceBuffer) -> None:
        self._arrays[buf.buffer_id] = np.empty(buf.length, dtype=kernels.NP_DTYPE[buf.elem_type])

    def free(self, buffer_id: int) -> None:
        del self._arrays[buffer_id]

    def live(self, buffer_id: int) -> bool:
        return buffer_id in self._arrays

    def resolve(self, view) -> np.ndarray:
        """Materialize a numpy view for a FlatView/BlockView; validates bounds."""
        arr = self._arrays.get(view.buf.buffer_id)
        if arr is None:
            raise BufferError_(f"use of released buffer #{view.buf.buffer_id}")
        isz = arr.itemsize
        if isinstance(view, FlatView):
            count = view.count if view.count >= 0 else view.buf.length
            if count == 0:
                return arr[0:0]
            last = view.offset + view.stride * (count - 1)
            if view.offset < 0 or last >= arr.shape[0] or last < 0:
                raise BufferError_(
                    f"view range out of bounds (offset={view.offset} "
                    f"stride={view.stride} count={count} len={arr.shape[0]})")
            return np.lib.stride_tricks.as_strided(
                arr[view.offset:], (count,), (view.stride * isz,))
        if isinstance(view, BlockView):
            if view.rows == 0 or view.cols == 0:
                return np.empty((view.rows, view.cols), dtype=arr.dtype)
            last = view.offset + (view.cols - 1) * view.lda + (view.rows - 1)
            if view.offset < 0 or last >= arr.shape[0]:
                raise BufferError_("block view out of bounds")
            return np.lib.stride_tricks.as_strided(
                arr[view.offset:], (view.rows, view.cols), (isz, view.lda * isz))
        raise TypeError(f"not a view: {view!r}")


def _execute_invocation(device: _DeviceState, inv: KernelInvocation,
                        pool: ThreadPoolExecutor | None, workers: int) -> None:
    impl = kernels.KERNEL_IMPLS[inv.kind]
    ins = [device.resolve(v) for v in inv.inputs]
    out = device.resolve(inv.output) if inv.output is not None else None

    if impl.grid is None:
        partials = [impl.run(ins, out, inv.scalars, inv.params, 0, 0)]
        blocks = None
    else:
        total, blk = impl.grid(ins, out, inv.params)
        blocks = kernels.block_ranges(total, blk)
        if pool is None or workers <= 1 or len(blocks) <= 1:
            partials = [impl.run(ins, out, inv.scalars, inv.params, lo, hi)
                        for lo, hi in blocks]
        else:
            # contiguous chunks of blocks per worker; partial order follows
            # block order regardless of scheduling
            chunk = -(-len(blocks) // workers)
            groups = [blocks[i:i + chunk] for i in range(0, len(blocks), chunk)]

            def run_group(group):
                return [impl.run(ins, out, inv.scalars, inv.params, lo, hi)
                        for lo, hi in group]

            futures = [pool.submit(run_group, g) for g in groups]
            partials = [p for f in futures for p in f.result()]

    if impl.combine is not None or inv.kind == "pred_all_any":
        combine = impl.combine
        if inv.kind == "pred_all_any":
            combine = lambda ps: kernels.all_any_combine(inv.params["want_all"])(ps)  # noqa: E731
        if blocks is not None and not blocks:
            if "empty_value" not in inv.params:
                raise ValueError(f"{inv.kind}: reduction over an empty range")
            value = inv.params["empty_value"]
        else:
            value = combine(partials)
        inv.params["_result_slot"][0] = value
        if impl.finalize is not None and out is not None:
            impl.finalize(out, value, inv.params)


class _ReferenceDevice:
    """Synchronous single-worker execution; enqueue runs the work inline."""

    def __init__(self, state: _DeviceState):
        self.state = state

    def submit(self, item) -> None:
        kind, payload = item
        if kind == "inv":
            _execute_invocation(self.state, payload, None, 1)
        elif kind == "release":
            payload()

    def drain(self) -> None:
        pass

    def stop(self) -> None:
        pass


class _ParallelDevice:
    """FIFO command queue + dispatcher thread + worker pool.

    Invocations execute strictly in queue order; a single invocation's block
    grid is spread across the workers.
    """

    def __init__(self, state: _DeviceState):
        self.state = state
        self.workers = state.descriptor.worker_count
        self._q: queue.Queue = queue.Queue()
        self._error: BaseException | None = None
        self._pool = (ThreadPoolExecutor(max_workers=self.workers,
                                         thread_name_prefix="devmat-worker")
                      if self.workers > 1 else None)
        self._dispatcher = threading.Thread(
            target=self._loop, name="devmat-dispatch", daemon=True)
        self._dispatcher.start()

    def _loop(self) -> None:
        while True:
            item = self._q.get()
            try:
                kind, payload = item
                if kind == "stop":
                    return
                if kind == "inv":
                    _execute_invocation(self.state, payload, self._pool, self.workers)
                elif kind == "release":
                    payload()
            except BaseException as exc:  # surfaced at the next synchronise
                if self._error is None:
                    self._error = exc
            finally:
                self._q.task_done()

    def submit(self, item) -> None:
        self._q.put(item)

    def drain(self) -> None:
        self._q.join()
        if self._error is not None:
            err, self._error = self._error, None
            raise err

    def stop(self) -> None:
        self._q.put(("stop", None))
        self._q.join()
        self._dispatcher.join(timeout=10)
        if self._pool is not None:
            self._pool.shutdown(wait=True)


# ---------------------------------------------------------------------------
# Runtime

class Runtime:
    def __init__(self, descriptor: DeviceDescriptor, print_info: bool):
        self.descriptor = descriptor
        self.counters = Counters()
        self._lock = threading.RLock()
        self._next_buffer_id = 0
        self._next_stream_id = 0
        self.seed = int(os.environ.get(SEED_ENV, "42"))
        self.cache_dir = Path(
            os.environ.get(CACHE_DIR_ENV, str(Path.home() / ".devmat")))
        self._section_mark = Counters()

        state = _DeviceState(descriptor)
        if descriptor.backend_name == "reference":
            self._device = _ReferenceDevice(state)
        else:
            self._device = _ParallelDevice(state)
        self._state = state

        self._compile_kernels()
        if print_info:
            mode = "cold" if self.counters.compiles else "warm"
            print(
                f"devmat runtime: backend={descriptor.backend_name} "
                f"device={descriptor.device_id} workers={descriptor.worker_count} "
                f"f64={'yes' if descriptor.supports_f64 else 'no'} "
                f"kernels={self.kernel_inventory_size()} cache={mode}"
            )

    # -- kernel compilation and cache ---------------------------------------

    def kernel_inventory_size(self) -> int:
        return len(kernels.full_inventory(self.descriptor.supports_f64))

    def _compile_kernels(self) -> None:
        entries = load_manifest(self.cache_dir)
        dh = self.descriptor.descriptor_hash
        for kind, in_t, out_t in kernels.full_inventory(self.descriptor.supports_f64):
            key = (dh, kind, in_t, out_t)
            if key in entries:
                with self._lock:
                    self.counters.cache_hits += 1
                continue
            sh = kernels.source_hash(kind, in_t, out_t)
            entries[key] = KernelCacheEntry(dh, kind, in_t, out_t, sh)
            with self._lock:
                self.counters.compiles += 1
        if self.counters.compiles:
            try:
                store_manifest(self.cache_dir, entries)
            except OSError as exc:
                warnings.warn(f"could not store kernel cache: {exc}", KernelCacheWarning)
        self._cache_entries = entries

    # -- memory ---------------------------------------------------------------

    def _check_precision(self, elem_type: str) -> None:
        if elem_type == "f64" and not self.descriptor.supports_f64:
            raise PrecisionUnsupportedError(
                f"device {self.descriptor.device_id} ({self.descriptor.backend_name}) "
                "has no 64-bit float support")

    def acquire_memory(self, n: int, elem_type: str) -> DeviceBuffer:
        if n < 0:
            raise ValueError("negative buffer length")
        if elem_type not in kernels.ELEM_TYPES:
            raise TypeError(f"unknown element type {elem_type!r}")
        self._check_precision(elem_type)
        with self._lock:
            buf = DeviceBuffer(self.descriptor.device_id, self._next_buffer_id, n, elem_type)
            self._next_buffer_id += 1
            self._state.allocate(buf)
            self.counters.buffers_acquired += 1
        return buf

    def release(self, buf: DeviceBuffer) -> None:
        """Immediately release a buffer; the handle becomes invalid."""
        with self._lock:
            if not self._state.live(buf.buffer_id):
                raise BufferError_(f"double release of buffer #{buf.buffer_id}")
            self._state.free(buf.buffer_id)
            self.counters.buffers_released += 1

    def release_deferred(self, buf: DeviceBuffer) -> None:
        """Stream-ordered release: frees after all queued work has run."""
        self._device.submit(("release", lambda: self.release(buf)))

    def next_stream_id(self) -> int:
        with self._lock:
            s = self._next_stream_id
            self._next_stream_id += 1
        return s

    # -- queue ------------------------------------------------------------------

    def _validate(self, inv: KernelInvocation) -> None:
        views = list(inv.inputs) + ([inv.output] if inv.output is not None else [])
        for v in views:
            if v.buf.device_id != self.descriptor.device_id:
                raise BufferError_("cross-device buffer mix")
            if not self._state.live(v.buf.buffer_id):
                raise BufferError_(f"use of released buffer #{v.buf.buffer_id}")

    def enqueue(self, inv: KernelInvocation) -> None:
        self._validate(inv)
        inv.params.setdefault("_result_slot", [None])
        with self._lock:
            self.counters.launches += 1
        self._device.submit(("inv", inv))

    def synchronise(self) -> None:
        self._device.drain()

    def execute_reduce(self, inv: KernelInvocation):
        """Enqueue a reducing kernel, wait, and move its scalar to the host.

        Counts one device-to-host transfer for the combined result.
        """
        self.enqueue(inv)
        self.synchronise()
        value = inv.params["_result_slot"][0]
        nbytes = kernels.itemsize(inv.inputs[0].buf.elem_type) if inv.inputs else 8
        if isinstance(value, tuple):
            nbytes *= len(value)
        with self._lock:
            self.counters.transfers_d2h += 1
            self.counters.bytes_d2h += nbytes
        return value

    # -- transfers ----------------------------------------------------------------

    def copy_h2d(self, host: np.ndarray, buf: DeviceBuffer, offset: int = 0) -> None:
        self.synchronise()
        arr = self._state.resolve(FlatView(buf, offset, host.shape[0]))
        arr[:] = host.astype(arr.dtype, copy=False)
        with self._lock:
            self.counters.transfers_h2d += 1
            self.counters.bytes_h2d += host.shape[0] * arr.itemsize

    def copy_d2h(self, buf: DeviceBuffer, offset: int = 0, count: int = -1) -> np.ndarray:
        self.synchronise()
        arr = self._state.resolve(FlatView(buf, offset, count))
        out = arr.copy()
        with self._lock:
            self.counters.transfers_d2h += 1
            self.counters.bytes_d2h += out.shape[0] * out.itemsize
        return out

    def copy_d2d(self, src: DeviceBuffer, dst: DeviceBuffer, count: int = -1) -> None:
        """Device-side memcpy; not a kernel launch, not a host transfer."""
        self.synchronise()
        a = self._state.resolve(FlatView(src, 0, count))
        b = self._state.resolve(FlatView(dst, 0, count if count >= 0 else src.length))
        b[:] = a

    def read_scalar(self, buf: DeviceBuffer, index: int):
        """One-element device-to-host read (drains the queue first)."""
        return self.read_elems(buf, [index])[0]

    def read_elems(self, buf: DeviceBuffer, indices) -> np.ndarray:
        self.synchronise()
        arr = self._state.resolve(FlatView(buf))
        out = arr[np.asarray(indices, dtype=np.intp)].copy()
        with self._lock:
            self.counters.transfers_d2h += 1
            self.counters.bytes_d2h += out.shape[0] * out.itemsize
        return out

    def write_scalar(self, buf: DeviceBuffer, index: int, value) -> None:
        self.synchronise()
        arr = self._state.resolve(FlatView(buf))
        arr[index] = value
        with self._lock:
            self.counters.transfers_h2d += 1
            self.counters.bytes_h2d += arr.itemsize

    # -- counters ---------------------------------------------------------------

    def counters_snapshot(self) -> Counters:
        with self._lock:
            return self.counters.copy()

    def counters_reset_section(self) -> Counters:
        """Delta since the previous section mark; starts a new section."""
        with self._lock:
            delta = self.counters - self._section_mark
            self._section_mark = self.counters.copy()
        return delta

    def stop(self) -> None:
        self._device.drain()
        self._device.stop()


# ---------------------------------------------------------------------------
# Singleton management

_runtime: Runtime | None = None
_runtime_lock = threading.Lock()
_generation = 0
_blas_limiter = None


def _limit_blas_threads() -> None:
    # Device parallelism must come from the runtime's own worker pool; a
    # multithreaded BLAS underneath would skew the backend comparison.
    global _blas_limiter
    if _blas_limiter is not None:
        return
    try:
        from threadpoolctl import threadpool_limits
        _blas_limiter = threadpool_limits(limits=1, user_api="blas")
    except Exception:
        _blas_limiter = None


def default_worker_count() -> int:
    return max(1, min(8, os.cpu_count() or 1))


def _make_descriptor(backend: str, device_id: int, worker_count: int | None) -> DeviceDescriptor:
    if backend not in BACKENDS:
        raise BackendError(
            f"unknown backend {backend!r}; valid backends: {', '.join(BACKENDS)}")
    if backend == "reference":
        if device_id != 0:
            raise BackendError("reference backend exposes a single device id 0")
        return DeviceDescriptor("reference", 0, 1, True)
    if device_id not in (0, 1):
        raise BackendError("parallel backend exposes device ids 0 and 1")
    workers = worker_count if worker_count is not None else default_worker_count()
    if workers < 1:
        raise BackendError("worker_count must be >= 1")
    return DeviceDescriptor("parallel", device_id, workers, supports_f64=(device_id == 0))


def init(backend: str | None = None, print_info: bool = False,
         device_id: int = 0, worker_count: int | None = None) -> None:
    """Select and start a device. Callable at most once before shutdown().

    Omitting ``backend`` performs automatic selection: the ``DEFAULT_BACKEND``
    environment variable if set, otherwise "parallel".
    """
    global _runtime, _generation
    with _runtime_lock:
        if _runtime is not None:
            raise BackendError("runtime already initialised; call shutdown() first")
        if backend is None:
            backend = os.environ.get(BACKEND_ENV) or "parallel"
        desc = _make_descriptor(backend, device_id, worker_count)
        _limit_blas_threads()
        _runtime = Runtime(desc, print_info)
        _generation += 1


def shutdown() -> None:
    """Drain the queue, stop workers, free leftover buffers, clear the runtime."""
    global _runtime, _generation
    with _runtime_lock:
        if _runtime is None:
            return
        rt = _runtime
        _generation += 1  # stale GC finalizers become no-ops from here on
        rt.stop()
        with rt._lock:
            for buffer_id in list(rt._state._arrays.keys()):
                if rt._state.live(buffer_id):
                    rt._state.free(buffer_id)
                    rt.counters.buffers_released += 1
        _runtime = None


def get_runtime() -> Runtime:
    """The active runtime, auto-initialising with backend selection if needed."""
    rt = _runtime
    if rt is None:
        try:
            init()
        except BackendError:
            rt = _runtime
            if rt is None:
                raise
        rt = _runtime
    return rt


def is_initialised() -> bool:
    return _runtime is not None


def generation() -> int:
    return _generation


def release_if_current(gen: int, buf: DeviceBuffer) -> None:
    """GC finalizer hook: deferred-release iff the owning runtime is still up.

    Deliberately lock-free: finalizers can fire at any allocation point,
    including inside runtime calls that hold locks.
    """
    rt = _runtime
    if rt is None or gen != _generation:
        return
    try:
        rt.release_deferred(buf)
    except Exception:
        pass


def set_seed(seed: int) -> None:
    """Set the global RNG seed and restart the generator stream sequence."""
    rt = get_runtime()
    with rt._lock:
        rt.seed = int(seed)
        rt._next_stream_id = 0


def counters() -> Counters:
    return get_runtime().counters_snapshot()


def synchronise() -> None:
    """Barrier: return once the device queue is empty and effects are visible."""
    if _runtime is not None:
        _runtime.synchronise()


class wall_clock:
    """Minimal tic/toc timer used by the benchmark harness."""

    def __init__(self):
        self._t0 = time.perf_counter()

    def tic(self) -> None:
        self._t0 = time.perf_counter()

    def toc(self) -> float:
        return time.perf_counter() - self._t0
