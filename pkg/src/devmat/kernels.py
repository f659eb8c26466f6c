"""Device kernel inventory: pure programs over device buffers.

Every kernel is a pure function of its inputs, scalar arguments, and the
global RNG seed.  Work is decomposed into fixed-size blocks that depend only
on the problem geometry, never on the worker count, so results are
bit-identical on the synchronous reference device and the queued parallel
device at any worker count.  Reductions return per-block partials that the
executor combines on a fixed pairwise tree (see ``combine_pairwise``).

Each kernel kind also carries a source template.  "Compiling" a kernel means
rendering its template for a concrete (input type, output type) pair and
hashing the text; the hashes back the on-disk kernel cache.  The templates
are never executed.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

# ---------------------------------------------------------------------------
# Element types

ELEM_TYPES = ("f32", "f64", "i32", "u64")

NP_DTYPE = {
    "f32": np.dtype(np.float32),
    "f64": np.dtype(np.float64),
    "i32": np.dtype(np.int32),
    "u64": np.dtype(np.uint64),
}

C_NAME = {"f32": "float", "f64": "double", "i32": "int", "u64": "ulong"}

FLOAT_TYPES = ("f32", "f64")
INT_TYPES = ("i32", "u64")


def is_float(elem_type: str) -> bool:
    return elem_type in FLOAT_TYPES


def itemsize(elem_type: str) -> int:
    return NP_DTYPE[elem_type].itemsize


# ---------------------------------------------------------------------------
# Kernel kinds

EOP_UNARY = (
    "eop_exp", "eop_log", "eop_log10", "eop_sqrt", "eop_square", "eop_pow",
    "eop_abs", "eop_cos", "eop_sin", "eop_tan", "eop_acos", "eop_asin",
    "eop_atan",
)
EOP_SCALAR = (
    "eop_scalar_plus", "eop_scalar_minus_pre", "eop_scalar_minus_post",
    "eop_scalar_times", "eop_scalar_div_pre", "eop_scalar_div_post",
)
EGLUE = ("eglue_plus", "eglue_minus", "eglue_schur", "eglue_div")
FUSED = ("fused_chain",)
REDUCE = ("reduce_accu", "reduce_min", "reduce_max", "reduce_dot", "reduce_argmax_abs")
REDUCE_DIM = ("rdim_sum", "rdim_min", "rdim_max", "rdim_mean", "rdim_var")
GENERATOR = ("gen_fill_const", "gen_eye", "gen_linspace", "gen_randu", "gen_randn", "gen_repmat")
MOVEMENT = (
    "mov_copy", "mov_transpose", "mov_resize", "mov_reshape_copy",
    "mov_extract_strided", "mov_insert_strided", "mov_join_rows",
    "mov_join_cols", "mov_diagmat_build", "mov_diagvec_extract",
)
PREDICATE = ("pred_find_build", "pred_all_any", "pred_count")
# Factorization-step kernels used by the decomposition layer.  These have no
# two-way variants and compile for float types only.
FACTOR = (
    "fact_swap_rows", "fact_permute_rows", "fact_tri_keep",
    "fact_rank1_update", "fact_rot_cols", "fact_rot_rows",
)

ELEMENTWISE = EOP_UNARY + EOP_SCALAR + EGLUE
TWOWAY_FAMILIES = ELEMENTWISE + FUSED + GENERATOR + MOVEMENT
ALL_KINDS = ELEMENTWISE + FUSED + REDUCE + REDUCE_DIM + GENERATOR + MOVEMENT + PREDICATE + FACTOR

# Fixed block geometry. Pure functions of problem size; never of workers.
ELEM_BLOCK = 1 << 16
REDUCE_BLOCK = 1 << 13
GEMM_PANEL = 64
DIM_BLOCK = 64

# Maximum number of element-wise stages a single fused launch may carry.
FUSED_CHAIN_MAX = 8


def type_pairs(kind: str, supports_f64: bool = True) -> list[tuple[str, str]]:
    """All (in_type, out_type) pairs a kind is compiled for on a device."""
    types = [t for t in ELEM_TYPES if supports_f64 or t != "f64"]
    if kind in TWOWAY_FAMILIES:
        return [(a, b) for a in types for b in types]
    if kind in PREDICATE:
        return [(a, "u64") for a in types]
    if kind in FACTOR:
        return [(a, a) for a in types if a in FLOAT_TYPES]
    # plain reductions and per-dimension reductions stay in their input type
    return [(a, a) for a in types]


def full_inventory(supports_f64: bool = True) -> list[tuple[str, str, str]]:
    """Every (kind, in_type, out_type) triple compiled at device init."""
    out = []
    for kind in ALL_KINDS:
        for a, b in type_pairs(kind, supports_f64):
            out.append((kind, a, b))
    return out


# ---------------------------------------------------------------------------
# Source templates (hashed for the kernel cache; never executed)

_GEMM_KINDS = ("gemm",)
ALL_KINDS = ALL_KINDS + _GEMM_KINDS

_BODY = {
    "eop_exp": "dst[i] = ({out_c}) exp((double) src[i]);",
    "eop_log": "dst[i] = ({out_c}) log((double) src[i]);",
    "eop_log10": "dst[i] = ({out_c}) log10((double) src[i]);",
    "eop_sqrt": "dst[i] = ({out_c}) sqrt((double) src[i]);",
    "eop_square": "dst[i] = ({out_c}) (src[i] * src[i]);",
    "eop_pow": "dst[i] = ({out_c}) pow((double) src[i], (double) k0);",
    "eop_abs": "dst[i] = ({out_c}) (src[i] < 0 ? -src[i] : src[i]);",
    "eop_cos": "dst[i] = ({out_c}) cos((double) src[i]);",
    "eop_sin": "dst[i] = ({out_c}) sin((double) src[i]);",
    "eop_tan": "dst[i] = ({out_c}) tan((double) src[i]);",
    "eop_acos": "dst[i] = ({out_c}) acos((double) src[i]);",
    "eop_asin": "dst[i] = ({out_c}) asin((double) src[i]);",
    "eop_atan": "dst[i] = ({out_c}) atan((double) src[i]);",
    "eop_scalar_plus": "dst[i] = ({out_c}) (src[i] + k0);",
    "eop_scalar_minus_pre": "dst[i] = ({out_c}) (k0 - src[i]);",
    "eop_scalar_minus_post": "dst[i] = ({out_c}) (src[i] - k0);",
    "eop_scalar_times": "dst[i] = ({out_c}) (src[i] * k0);",
    "eop_scalar_div_pre": "dst[i] = ({out_c}) (k0 / src[i]);",
    "eop_scalar_div_post": "dst[i] = ({out_c}) (src[i] / k0);",
    "eglue_plus": "dst[i] = ({out_c}) (a[i] + b[i]);",
    "eglue_minus": "dst[i] = ({out_c}) (a[i] - b[i]);",
    "eglue_schur": "dst[i] = ({out_c}) (a[i] * b[i]);",
    "eglue_div": "dst[i] = ({out_c}) (a[i] / b[i]);",
    "fused_chain": (
        "{in_c} v = load(stage_inputs, i);\n"
        "  for (uint s = 0; s < n_stages; ++s) v = apply_stage(prog[s], v, i);\n"
        "  dst[i] = ({out_c}) v;"
    ),
    "reduce_accu": "partial[b] = block_sum(src, lo, hi);",
    "reduce_min": "partial[b] = block_min(src, lo, hi);",
    "reduce_max": "partial[b] = block_max(src, lo, hi);",
    "reduce_dot": "partial[b] = block_dot(a, b_in, lo, hi);",
    "reduce_argmax_abs": "partial[b] = block_argmax_abs(src, lo, hi);",
    "rdim_sum": "dst[j] = slice_sum(src, j, extent);",
    "rdim_min": "dst[j] = slice_min(src, j, extent);",
    "rdim_max": "dst[j] = slice_max(src, j, extent);",
    "rdim_mean": "dst[j] = slice_sum(src, j, extent) / extent;",
    "rdim_var": "dst[j] = slice_var_unbiased(src, j, extent);",
    "gen_fill_const": "dst[i] = ({out_c}) k0;",
    "gen_eye": "dst[i] = ({out_c}) ((i % n_rows) == (i / n_rows) ? 1 : 0);",
    "gen_linspace": "dst[i] = ({out_c}) (k0 + (k1 - k0) * i / (n - 1));",
    "gen_randu": "dst[i] = ({out_c}) counter_uniform(seed, stream, i);",
    "gen_randn": "dst[i] = ({out_c}) counter_normal(seed, stream, i);",
    "gen_repmat": "dst[i] = ({out_c}) src[tile_index(i, src_rows, src_cols, dst_rows)];",
    "mov_copy": "dst[i] = ({out_c}) src[i];",
    "mov_transpose": "dst[r + c * n_cols_out] = ({out_c}) src[c + r * n_rows_in];",
    "mov_resize": "dst[i] = ({out_c}) (in_old(i) ? src[old_index(i)] : 0);",
    "mov_reshape_copy": "dst[i] = ({out_c}) (i < n_src ? src[i] : 0);",
    "mov_extract_strided": "dst[i] = ({out_c}) src[region_index(i)];",
    "mov_insert_strided": "dst[region_index(i)] = ({out_c}) src[i];",
    "mov_join_rows": "dst[i] = ({out_c}) (col(i) < a_cols ? a[i] : b[shift(i)]);",
    "mov_join_cols": "dst[i] = ({out_c}) (row(i) < a_rows ? a[down(i)] : b[up(i)]);",
    "mov_diagmat_build": "dst[i] = ({out_c}) ((i % n) == (i / n) ? src[i % n] : 0);",
    "mov_diagvec_extract": "dst[i] = ({out_c}) src[diag_index(i, k)];",
    "pred_find_build": "if (pred(src[i], op, k0)) dst[scan(i)] = (ulong) i;",
    "pred_all_any": "flag[b] = block_all_any(src, lo, hi, op, k0, want_all);",
    "pred_count": "partial[b] = block_count(src, lo, hi, op, k0);",
    "fact_swap_rows": "tmp = W[r1 + c * n]; W[r1 + c * n] = W[r2 + c * n]; W[r2 + c * n] = tmp;",
    "fact_permute_rows": "dst[i + c * n] = src[perm[i] + c * n];",
    "fact_tri_keep": "dst[i] = keep(i, side, unit_diag) ? src[i] : (unit_diag && on_diag(i) ? 1 : 0);",
    "fact_rank1_update": "A[r + c * lda] -= alpha * x[r] * y[c];",
    "fact_rot_cols": "p = A[i + pcol * lda]; q = A[i + qcol * lda]; A[i + pcol * lda] = c * p - s * q; A[i + qcol * lda] = s * p + c * q;",
    "fact_rot_rows": "p = A[prow + i * lda]; q = A[qrow + i * lda]; A[prow + i * lda] = c * p - s * q; A[qrow + i * lda] = s * p + c * q;",
    "gemm": (
        "for (uint kk = 0; kk < K; ++kk)\n"
        "    acc += ({out_c}) A[r + kk * lda] * B[kk + c * ldb];\n"
        "  C[r + c * ldc] = acc;"
    ),
}

_TEMPLATE = """\
// devmat generated kernel
// kind: {kind}   in: {in_t}   out: {out_t}
__kernel void {kind}__{in_t}_{out_t}(__global const {in_c}* restrict src,
                                     __global {out_c}* restrict dst,
                                     const ulong n)
{{
  const ulong i = get_global_id(0);
  if (i >= n) return;
  {body}
}}
"""


def kernel_source(kind: str, in_t: str, out_t: str) -> str:
    """Render the source text for one compiled kernel instance."""
    body = _BODY[kind].format(in_c=C_NAME[in_t], out_c=C_NAME[out_t])
    return _TEMPLATE.format(
        kind=kind, in_t=in_t, out_t=out_t,
        in_c=C_NAME[in_t], out_c=C_NAME[out_t], body=body,
    )


def source_hash(kind: str, in_t: str, out_t: str) -> str:
    return hashlib.sha256(kernel_source(kind, in_t, out_t).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Counter-based RNG
#
# value = f(seed, stream, element_index) with a splitmix64-style mixer, so
# fills are independent of block decomposition and worker scheduling.

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _mix64(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = x + _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))


def uniform_stream(seed: int, stream: int, start: int, count: int) -> np.ndarray:
    """f64 uniform values in [0, 1) for element indices start..start+count."""
    idx = np.arange(start, start + count, dtype=np.uint64)
    key = _mix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) ^ _mix64(np.uint64(stream)))
    bits = _mix64(idx ^ key)
    return (bits >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)


def normal_stream(seed: int, stream: int, start: int, count: int) -> np.ndarray:
    """Standard normal values via Box-Muller over the paired uniform stream."""
    u1 = uniform_stream(seed, stream, 2 * start, 2 * count)[0::2]
    u2 = uniform_stream(seed, stream, 2 * start + 1, 2 * count)[0::2]
    # 1 - u1 keeps the log argument in (0, 1]
    return np.sqrt(-2.0 * np.log1p(-u1)) * np.cos(2.0 * np.pi * u2)


# ---------------------------------------------------------------------------
# Execution helpers

def cast_out(values: np.ndarray, out_dtype: np.dtype) -> np.ndarray:
    """Write-time conversion of a two-way kernel (C-cast semantics).

    float -> int truncates toward zero, matching the native cast convention.
    """
    if values.dtype == out_dtype:
        return values
    with np.errstate(invalid="ignore", over="ignore"):
        return values.astype(out_dtype)


def _stage_cast(values: np.ndarray, dtype: np.dtype) -> np.ndarray:
    # Integer kernels compute each stage in the element type, like a real
    # device kernel would; transcendentals produce floats that get C-cast
    # back immediately so fused and unfused pipelines agree bit-for-bit.
    if values.dtype == dtype:
        return values
    with np.errstate(invalid="ignore", over="ignore"):
        return values.astype(dtype)


def _scalar(k, dtype: np.dtype):
    if dtype.kind in "iu":
        return dtype.type(int(k))
    return dtype.type(k)


def _int_div(a, b, dtype: np.dtype):
    # signed integer division truncates toward zero (C semantics); unsigned
    # floor division is already truncation
    if dtype.kind == "u":
        return np.floor_divide(a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        return (np.asarray(a, dtype=np.float64) / np.asarray(b, dtype=np.float64)).astype(dtype)


_UNARY_FN = {
    "eop_exp": np.exp,
    "eop_log": np.log,
    "eop_log10": np.log10,
    "eop_sqrt": np.sqrt,
    "eop_square": lambda x: x * x,
    "eop_abs": np.abs,
    "eop_cos": np.cos,
    "eop_sin": np.sin,
    "eop_tan": np.tan,
    "eop_acos": np.arccos,
    "eop_asin": np.arcsin,
    "eop_atan": np.arctan,
}


def _apply_unary(op: str, x: np.ndarray, k, dtype: np.dtype) -> np.ndarray:
    if op == "eop_pow":
        with np.errstate(invalid="ignore", divide="ignore"):
            return _stage_cast(np.power(x, _scalar(k, dtype)), dtype)
    with np.errstate(invalid="ignore", divide="ignore"):
        return _stage_cast(_UNARY_FN[op](x), dtype)


def _apply_scalar(op: str, x: np.ndarray, k, dtype: np.dtype) -> np.ndarray:
    kv = _scalar(k, dtype)
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        if op == "eop_scalar_plus":
            r = x + kv
        elif op == "eop_scalar_minus_pre":
            r = kv - x
        elif op == "eop_scalar_minus_post":
            r = x - kv
        elif op == "eop_scalar_times":
            r = x * kv
        elif op == "eop_scalar_div_pre":
            r = _int_div(kv, x, dtype) if dtype.kind in "iu" else kv / x
        elif op == "eop_scalar_div_post":
            r = _int_div(x, kv, dtype) if dtype.kind in "iu" else x / kv
        else:
            raise KeyError(op)
    return _stage_cast(r, dtype)


def _apply_glue(op: str, a: np.ndarray, b: np.ndarray, dtype: np.dtype) -> np.ndarray:
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        if op == "eglue_plus":
            r = a + b
        elif op == "eglue_minus":
            r = a - b
        elif op == "eglue_schur":
            r = a * b
        elif op == "eglue_div":
            r = _int_div(a, b, dtype) if dtype.kind in "iu" else a / b
        else:
            raise KeyError(op)
    return _stage_cast(r, dtype)


def run_chain_program(program, ins, compute_dtype: np.dtype) -> np.ndarray:
    """Evaluate a fused element-wise stage program on equally sized inputs.

    ``program`` is a post-order tuple of stages:
      ('load', input_index) | ('unary', op, k) | ('scalar', op, k) | ('glue', op)
    """
    stack: list[np.ndarray] = []
    for stage in program:
        tag = stage[0]
        if tag == "load":
            stack.append(ins[stage[1]])
        elif tag == "unary":
            stack.append(_apply_unary(stage[1], stack.pop(), stage[2], compute_dtype))
        elif tag == "scalar":
            stack.append(_apply_scalar(stage[1], stack.pop(), stage[2], compute_dtype))
        elif tag == "glue":
            b = stack.pop()
            a = stack.pop()
            stack.append(_apply_glue(stage[1], a, b, compute_dtype))
        else:
            raise KeyError(tag)
    if len(stack) != 1:
        raise ValueError("malformed chain program")
    return stack[0]


def combine_pairwise(partials: list, op: Callable):
    """Deterministic binary-tree fold over block partials, in block order."""
    vals = list(partials)
    if not vals:
        raise ValueError("no partials to combine")
    while len(vals) > 1:
        nxt = []
        for i in range(0, len(vals) - 1, 2):
            nxt.append(op(vals[i], vals[i + 1]))
        if len(vals) % 2:
            nxt.append(vals[-1])
        vals = nxt
    return vals[0]


# ---------------------------------------------------------------------------
# Kernel implementations
#
# Each implementation is a block runner: the executor resolves buffer views,
# derives the block grid from `grid(...)` (a pure function of geometry), and
# calls `run(ins, out, scalars, params, lo, hi)` per block.  Reductions
# return a partial per block; `combine` folds them and `finalize` writes the
# folded value into the output view.


@dataclass(frozen=True)
class KernelImpl:
    run: Callable
    grid: Callable | None = None     # (ins, out, params) -> (total, block)
    combine: Callable | None = None  # ordered partials -> value
    finalize: Callable | None = None  # (out_view, value, params) -> None


def _grid_out_flat(ins, out, params):
    return out.shape[0], ELEM_BLOCK


def _grid_in_flat(ins, out, params):
    return ins[0].shape[0], REDUCE_BLOCK


def _grid_rows(ins, out, params):
    return out.shape[0], GEMM_PANEL


def _grid_dim(ins, out, params):
    return out.shape[0], DIM_BLOCK


def _run_eop_unary(kind):
    def run(ins, out, scalars, params, lo, hi):
        k = scalars[0] if scalars else None
        out[lo:hi] = cast_out(_apply_unary(kind, ins[0][lo:hi], k, ins[0].dtype), out.dtype)
    return run


def _run_eop_scalar(kind):
    def run(ins, out, scalars, params, lo, hi):
        out[lo:hi] = cast_out(_apply_scalar(kind, ins[0][lo:hi], scalars[0], ins[0].dtype), out.dtype)
    return run


def _run_eglue(kind):
    def run(ins, out, scalars, params, lo, hi):
        out[lo:hi] = cast_out(_apply_glue(kind, ins[0][lo:hi], ins[1][lo:hi], ins[0].dtype), out.dtype)
    return run


def _run_fused(ins, out, scalars, params, lo, hi):
    program = params["program"]
    if sum(1 for s in program if s[0] != "load") > FUSED_CHAIN_MAX:
        raise ValueError("fused chain exceeds the stage cap")
    sliced = [a[lo:hi] for a in ins]
    compute = np.dtype(params["compute_dtype"])
    out[lo:hi] = cast_out(run_chain_program(program, sliced, compute), out.dtype)


# -- reductions --------------------------------------------------------------

def _run_reduce_accu(ins, out, scalars, params, lo, hi):
    return ins[0][lo:hi].sum(dtype=ins[0].dtype)


def _run_reduce_min(ins, out, scalars, params, lo, hi):
    return ins[0][lo:hi].min()


def _run_reduce_max(ins, out, scalars, params, lo, hi):
    return ins[0][lo:hi].max()


def _run_reduce_dot(ins, out, scalars, params, lo, hi):
    return np.dot(ins[0][lo:hi], ins[1][lo:hi])


def _run_argmax_abs(ins, out, scalars, params, lo, hi):
    seg = np.abs(ins[0][lo:hi])
    j = int(np.argmax(seg))
    return (seg[j], lo + j)


def _combine_argmax(partials):
    best = partials[0]
    for p in partials[1:]:
        if p[0] > best[0]:  # strict: ties keep the lowest index
            best = p
    return best


def _finalize_scalar(out, value, params):
    if out is not None:
        out[0] = value


# -- per-dimension reductions ------------------------------------------------

def _dim_view(ins, params):
    # inputs arrive as a 2-D column-major view
    a = ins[0]
    return a, params["dim"]


def _run_rdim(op):
    def run(ins, out, scalars, params, lo, hi):
        a, dim = _dim_view(ins, params)
        axis = 0 if dim == 0 else 1
        if dim == 0:
            seg = a[:, lo:hi]
        else:
            seg = a[lo:hi, :]
        if op == "sum":
            r = seg.sum(axis=axis, dtype=a.dtype)
        elif op == "min":
            r = seg.min(axis=axis)
        elif op == "max":
            r = seg.max(axis=axis)
        elif op == "mean":
            r = _apply_scalar("eop_scalar_div_post", seg.sum(axis=axis, dtype=a.dtype),
                              seg.shape[axis], a.dtype)
        elif op == "var":
            extent = seg.shape[axis]
            if extent < 2:
                r = np.zeros(seg.shape[1 - axis], dtype=a.dtype)
            else:
                mean = seg.sum(axis=axis, dtype=np.float64) / extent
                mean = np.expand_dims(mean, axis)
                d = seg.astype(np.float64) - mean
                r = _stage_cast((d * d).sum(axis=axis) / (extent - 1), a.dtype)
        else:
            raise KeyError(op)
        out[lo:hi] = cast_out(np.ascontiguousarray(r), out.dtype)
    return run


# -- generators ---------------------------------------------------------------

def _run_fill_const(ins, out, scalars, params, lo, hi):
    out[lo:hi] = cast_out(np.full(hi - lo, _scalar(scalars[0], NP_DTYPE[params["gen_type"]])), out.dtype)


def _run_eye(ins, out, scalars, params, lo, hi):
    rows = params["rows"]
    idx = np.arange(lo, hi)
    vals = ((idx % rows) == (idx // rows)).astype(NP_DTYPE[params["gen_type"]])
    out[lo:hi] = cast_out(vals, out.dtype)


def _run_linspace(ins, out, scalars, params, lo, hi):
    start, end = float(scalars[0]), float(scalars[1])
    n = params["n"]
    idx = np.arange(lo, hi, dtype=np.float64)
    if n == 1:
        vals = np.full(hi - lo, start)
    else:
        vals = start + (end - start) * idx / (n - 1)
    out[lo:hi] = cast_out(_stage_cast(vals, NP_DTYPE[params["gen_type"]]), out.dtype)


def _run_randu(ins, out, scalars, params, lo, hi):
    u = uniform_stream(params["seed"], params["stream"], lo, hi - lo)
    out[lo:hi] = cast_out(_stage_cast(u, NP_DTYPE[params["gen_type"]]), out.dtype)


def _run_randn(ins, out, scalars, params, lo, hi):
    z = normal_stream(params["seed"], params["stream"], lo, hi - lo)
    out[lo:hi] = cast_out(_stage_cast(z, NP_DTYPE[params["gen_type"]]), out.dtype)


def _run_repmat(ins, out, scalars, params, lo, hi):
    src = ins[0]  # 2-D view
    sr, sc = src.shape
    rows_out = params["rows_out"]
    idx = np.arange(lo, hi)
    r = (idx % rows_out) % sr
    c = (idx // rows_out) % sc
    out[lo:hi] = cast_out(src[r, c], out.dtype)


# -- data movement -------------------------------------------------------------

def _run_copy(ins, out, scalars, params, lo, hi):
    out[lo:hi] = cast_out(ins[0][lo:hi], out.dtype)


def _run_transpose(ins, out, scalars, params, lo, hi):
    # out is 2-D (rows_out x cols_out); block over output rows
    out[lo:hi, :] = cast_out(ins[0][:, lo:hi].T, out.dtype)


def _run_resize(ins, out, scalars, params, lo, hi):
    src = ins[0]
    dst = out
    keep_r = min(src.shape[0], dst.shape[0])
    keep_c = min(src.shape[1], dst.shape[1])
    dst[:, :] = 0
    dst[:keep_r, :keep_c] = cast_out(src[:keep_r, :keep_c], dst.dtype)


def _run_reshape_copy(ins, out, scalars, params, lo, hi):
    src = ins[0]
    n = min(src.shape[0], out.shape[0])
    out[:n] = cast_out(src[:n], out.dtype)
    if out.shape[0] > n:
        out[n:] = 0


def _run_extract(ins, out, scalars, params, lo, hi):
    src = ins[0]
    out[:] = cast_out(src.reshape(-1, order="F") if src.ndim == 2 else src, out.dtype)


def _run_insert(ins, out, scalars, params, lo, hi):
    src = ins[0]
    if out.ndim == 2:
        out[:, :] = cast_out(src.reshape(out.shape, order="F"), out.dtype)
    else:
        out[:] = cast_out(src, out.dtype)


def _run_join_rows(ins, out, scalars, params, lo, hi):
    a, b = ins
    out[:, : a.shape[1]] = cast_out(a, out.dtype)
    out[:, a.shape[1]:] = cast_out(b, out.dtype)


def _run_join_cols(ins, out, scalars, params, lo, hi):
    a, b = ins
    out[: a.shape[0], :] = cast_out(a, out.dtype)
    out[a.shape[0]:, :] = cast_out(b, out.dtype)


def _run_diagmat_build(ins, out, scalars, params, lo, hi):
    out[:, :] = 0
    n = min(out.shape)
    out[np.arange(n), np.arange(n)] = cast_out(ins[0][:n], out.dtype)


def _run_diagvec_extract(ins, out, scalars, params, lo, hi):
    src = ins[0]
    k = params["k"]
    out[:] = cast_out(np.diagonal(src, offset=k), out.dtype)


# -- predicates ----------------------------------------------------------------

def _predicate_mask(x: np.ndarray, op: str, k) -> np.ndarray:
    kv = _scalar(k, x.dtype)
    if op == ">":
        return x > kv
    if op == "<":
        return x < kv
    if op == ">=":
        return x >= kv
    if op == "<=":
        return x <= kv
    if op == "==":
        return x == kv
    if op == "!=":
        return x != kv
    raise KeyError(op)


def _run_find_build(ins, out, scalars, params, lo, hi):
    mask = _predicate_mask(ins[0][lo:hi], params["op"], params["threshold"])
    return (np.nonzero(mask)[0] + lo).astype(np.uint64)


def _combine_concat(partials):
    return np.concatenate(partials) if partials else np.empty(0, dtype=np.uint64)


def _finalize_indices(out, value, params):
    out[: value.shape[0]] = value


def _run_count(ins, out, scalars, params, lo, hi):
    mask = _predicate_mask(ins[0][lo:hi], params["op"], params["threshold"])
    return np.uint64(np.count_nonzero(mask))


def _run_all_any(ins, out, scalars, params, lo, hi):
    mask = _predicate_mask(ins[0][lo:hi], params["op"], params["threshold"])
    return bool(mask.all()) if params["want_all"] else bool(mask.any())


def _combine_all(partials):
    return all(partials)


def _combine_any(partials):
    return any(partials)


def _finalize_flag(out, value, params):
    if out is not None:
        out[0] = np.uint64(1 if value else 0)


def _run_pred_all_any(ins, out, scalars, params, lo, hi):
    return _run_all_any(ins, out, scalars, params, lo, hi)


# -- matrix product -------------------------------------------------------------

def _run_gemm(ins, out, scalars, params, lo, hi):
    # fixed row panels; identical panel shapes on every backend and worker
    # count, so float results match bit-for-bit across devices
    a, b = ins
    out[lo:hi, :] = np.dot(a[lo:hi, :], b)


# -- factorization steps --------------------------------------------------------

def _run_swap_rows(ins, out, scalars, params, lo, hi):
    r1, r2 = params["r1"], params["r2"]
    w = out
    w[[r1, r2], :] = w[[r2, r1], :]


def _run_permute_rows(ins, out, scalars, params, lo, hi):
    perm = np.asarray(params["perm"], dtype=np.intp)
    out[:, :] = ins[0][perm, :]


def _run_tri_keep(ins, out, scalars, params, lo, hi):
    src = ins[0]
    side = params["side"]
    if side == "upper":
        out[:, :] = np.triu(src)
    else:
        out[:, :] = np.tril(src)
    if params.get("unit_diag"):
        n = min(out.shape)
        out[np.arange(n), np.arange(n)] = 1


def _run_rank1_update(ins, out, scalars, params, lo, hi):
    x, y = ins
    alpha = scalars[0]
    out[:, :] -= _scalar(alpha, out.dtype) * np.outer(x, y)


def _run_rot_cols(ins, out, scalars, params, lo, hi):
    c, s = scalars
    p, q = params["p"], params["q"]
    a = out
    cp = a[:, p].copy()
    cq = a[:, q].copy()
    a[:, p] = c * cp - s * cq
    a[:, q] = s * cp + c * cq


def _run_rot_rows(ins, out, scalars, params, lo, hi):
    c, s = scalars
    p, q = params["p"], params["q"]
    a = out
    rp = a[p, :].copy()
    rq = a[q, :].copy()
    a[p, :] = c * rp - s * rq
    a[q, :] = s * rp + c * rq


# ---------------------------------------------------------------------------

def _single(run, combine=None, finalize=None):
    return KernelImpl(run=run, grid=None, combine=combine, finalize=finalize)


KERNEL_IMPLS: dict[str, KernelImpl] = {}

for _k in EOP_UNARY:
    KERNEL_IMPLS[_k] = KernelImpl(run=_run_eop_unary(_k), grid=_grid_out_flat)
for _k in EOP_SCALAR:
    KERNEL_IMPLS[_k] = KernelImpl(run=_run_eop_scalar(_k), grid=_grid_out_flat)
for _k in EGLUE:
    KERNEL_IMPLS[_k] = KernelImpl(run=_run_eglue(_k), grid=_grid_out_flat)

KERNEL_IMPLS["fused_chain"] = KernelImpl(run=_run_fused, grid=_grid_out_flat)

KERNEL_IMPLS["reduce_accu"] = KernelImpl(
    run=_run_reduce_accu, grid=_grid_in_flat,
    combine=lambda ps: combine_pairwise(ps, lambda a, b: a + b),
    finalize=_finalize_scalar,
)
KERNEL_IMPLS["reduce_min"] = KernelImpl(
    run=_run_reduce_min, grid=_grid_in_flat,
    combine=lambda ps: combine_pairwise(ps, lambda a, b: min(a, b)),
    finalize=_finalize_scalar,
)
KERNEL_IMPLS["reduce_max"] = KernelImpl(
    run=_run_reduce_max, grid=_grid_in_flat,
    combine=lambda ps: combine_pairwise(ps, lambda a, b: max(a, b)),
    finalize=_finalize_scalar,
)
KERNEL_IMPLS["reduce_dot"] = KernelImpl(
    run=_run_reduce_dot, grid=_grid_in_flat,
    combine=lambda ps: combine_pairwise(ps, lambda a, b: a + b),
    finalize=_finalize_scalar,
)
KERNEL_IMPLS["reduce_argmax_abs"] = KernelImpl(
    run=_run_argmax_abs, grid=_grid_in_flat,
    combine=_combine_argmax,
    finalize=_finalize_scalar,
)

for _k, _op in (("rdim_sum", "sum"), ("rdim_min", "min"), ("rdim_max", "max"),
                ("rdim_mean", "mean"), ("rdim_var", "var")):
    KERNEL_IMPLS[_k] = KernelImpl(run=_run_rdim(_op), grid=_grid_dim)

KERNEL_IMPLS["gen_fill_const"] = KernelImpl(run=_run_fill_const, grid=_grid_out_flat)
KERNEL_IMPLS["gen_eye"] = KernelImpl(run=_run_eye, grid=_grid_out_flat)
KERNEL_IMPLS["gen_linspace"] = KernelImpl(run=_run_linspace, grid=_grid_out_flat)
KERNEL_IMPLS["gen_randu"] = KernelImpl(run=_run_randu, grid=_grid_out_flat)
KERNEL_IMPLS["gen_randn"] = KernelImpl(run=_run_randn, grid=_grid_out_flat)
KERNEL_IMPLS["gen_repmat"] = KernelImpl(run=_run_repmat, grid=_grid_out_flat)

KERNEL_IMPLS["mov_copy"] = KernelImpl(run=_run_copy, grid=_grid_out_flat)
KERNEL_IMPLS["mov_transpose"] = KernelImpl(run=_run_transpose, grid=_grid_rows)
KERNEL_IMPLS["mov_resize"] = _single(_run_resize)
KERNEL_IMPLS["mov_reshape_copy"] = _single(_run_reshape_copy)
KERNEL_IMPLS["mov_extract_strided"] = _single(_run_extract)
KERNEL_IMPLS["mov_insert_strided"] = _single(_run_insert)
KERNEL_IMPLS["mov_join_rows"] = _single(_run_join_rows)
KERNEL_IMPLS["mov_join_cols"] = _single(_run_join_cols)
KERNEL_IMPLS["mov_diagmat_build"] = _single(_run_diagmat_build)
KERNEL_IMPLS["mov_diagvec_extract"] = _single(_run_diagvec_extract)

KERNEL_IMPLS["pred_find_build"] = KernelImpl(
    run=_run_find_build, grid=_grid_in_flat,
    combine=_combine_concat, finalize=_finalize_indices,
)
KERNEL_IMPLS["pred_count"] = KernelImpl(
    run=_run_count, grid=_grid_in_flat,
    combine=lambda ps: combine_pairwise(ps, lambda a, b: a + b),
    finalize=_finalize_scalar,
)
KERNEL_IMPLS["pred_all_any"] = KernelImpl(
    run=_run_pred_all_any, grid=_grid_in_flat,
    combine=None,  # chosen at execution from params["want_all"]
    finalize=_finalize_flag,
)

KERNEL_IMPLS["gemm"] = KernelImpl(run=_run_gemm, grid=_grid_rows)

KERNEL_IMPLS["fact_swap_rows"] = _single(_run_swap_rows)
KERNEL_IMPLS["fact_permute_rows"] = _single(_run_permute_rows)
KERNEL_IMPLS["fact_tri_keep"] = _single(_run_tri_keep)
KERNEL_IMPLS["fact_rank1_update"] = _single(_run_rank1_update)
KERNEL_IMPLS["fact_rot_cols"] = _single(_run_rot_cols)
KERNEL_IMPLS["fact_rot_rows"] = _single(_run_rot_rows)


def all_any_combine(want_all: bool) -> Callable:
    return _combine_all if want_all else _combine_any


def block_ranges(total: int, block: int) -> list[tuple[int, int]]:
    """The fixed block grid for a problem of `total` elements."""
    if total == 0:
        return []
    n_blocks = math.ceil(total / block)
    return [(i * block, min((i + 1) * block, total)) for i in range(n_blocks)]
