"""Higher linear algebra on device matrices.

Everything here is driven through the runtime's kernel queue: factorizations
are right-looking unblocked algorithms issuing one kernel per elimination
step (pivot search, row swap, scale, rank-1 trailing update), with only the
pivot decisions travelling to the host.  The symmetric eigensolver runs
cyclic Jacobi rotations; ``pinv`` uses a one-sided Jacobi SVD internally.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import expr as _expr
from . import ops as _ops
from . import runtime as _rt
from .errors import (
    DimensionError,
    ElemTypeError,
    NotPositiveDefiniteError,
    NotSymmetricError,
    SingularMatrixError,
)
from .expr import as_expr, evaluate
from .kernels import NP_DTYPE
from .matrix import Col, Matrix
from .runtime import BlockView, FlatView, KernelInvocation


@dataclass(frozen=True)
class PermutationVector:
    """Row-pivot record: row i of P @ X is row indices[i] of X."""
    indices: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.uint64)
        object.__setattr__(self, "indices", idx)
        if sorted(int(i) for i in idx) != list(range(len(idx))):
            raise ValueError("not a permutation of 0..n-1")

    def __len__(self):
        return len(self.indices)

    def __getitem__(self, i):
        return int(self.indices[i])

    def to_matrix(self, elem_type: str = "f32") -> Matrix:
        n = len(self.indices)
        p = np.zeros((n, n), dtype=NP_DTYPE[elem_type])
        p[np.arange(n), self.indices.astype(np.intp)] = 1
        return Matrix.from_numpy(p, elem_type)


def _as_matrix(x) -> tuple[Matrix, bool]:
    if isinstance(x, Matrix):
        return x, False
    return evaluate(as_expr(x)), True


def _require_float(m: Matrix, op: str) -> None:
    if m.elem_type not in ("f32", "f64"):
        raise ElemTypeError(f"{op} requires a float matrix, got {m.elem_type}")


def _require_square(m: Matrix, op: str) -> None:
    if m.n_rows != m.n_cols:
        raise DimensionError(op, (m.n_rows, m.n_cols))


def _clone(m: Matrix) -> Matrix:
    w = Matrix._uninitialised(m.n_rows, m.n_cols, m.elem_type)
    _rt.get_runtime().copy_d2d(m.mem, w.mem, m.n_elem)
    return w


def _enqueue(kind, ins, out, scalars=(), params=None) -> None:
    _rt.get_runtime().enqueue(
        KernelInvocation(kind, tuple(ins), out, tuple(scalars), params or {}))


def _full2d(m: Matrix) -> BlockView:
    return BlockView(m.mem, 0, m.n_rows, m.n_cols, m.n_rows)


def _fro_norm(m: Matrix) -> float:
    if m.n_elem == 0:
        return 0.0
    v = _rt.get_runtime().execute_reduce(KernelInvocation(
        "reduce_dot",
        (FlatView(m.mem, 0, m.n_elem), FlatView(m.mem, 0, m.n_elem)), None))
    return math.sqrt(float(v))


def _check_symmetric(m: Matrix, op: str, rel_tol: float = 1e-5) -> None:
    t = evaluate(_expr.rewrite_trans(m._as_expr_node()))
    d = evaluate(m._as_expr_node() - t._as_expr_node())
    off = _fro_norm(d)
    base = _fro_norm(m)
    t._release_storage()
    d._release_storage()
    if off > rel_tol * max(base, 1e-30):
        raise NotSymmetricError(f"{op}: input is not symmetric to tolerance")


# ---------------------------------------------------------------------------
# matrix product

def gemm(a, b) -> Matrix:
    """Matrix product (fixed row-panel kernel on every backend)."""
    return evaluate(as_expr(a) @ as_expr(b))


def gemv(a, x) -> Matrix:
    return gemm(a, x)


# ---------------------------------------------------------------------------
# LU with partial pivoting

def _lu_packed(x: Matrix) -> tuple[Matrix, list[int], int]:
    """Factor in place into a packed working matrix; returns (W, perm, swaps)."""
    rt = _rt.get_runtime()
    n = x.n_rows
    w = _clone(x)
    perm = list(range(n))
    swaps = 0
    for k in range(n):
        sub = FlatView(w.mem, k * n + k, n - k, 1)
        val, local = rt.execute_reduce(
            KernelInvocation("reduce_argmax_abs", (sub,), None))
        if float(val) == 0.0:
            raise SingularMatrixError(f"zero pivot column at step {k}")
        p = k + int(local)
        if p != k:
            _enqueue("fact_swap_rows", [], _full2d(w), params={"r1": k, "r2": p})
            perm[k], perm[p] = perm[p], perm[k]
            swaps += 1
        piv = rt.read_scalar(w.mem, k + k * n)
        if k + 1 < n:
            below = FlatView(w.mem, k * n + k + 1, n - k - 1, 1)
            _enqueue("eop_scalar_times", [below], below, (1.0 / float(piv),))
            rowk = FlatView(w.mem, k + (k + 1) * n, n - k - 1, n)
            trail = BlockView(w.mem, (k + 1) + (k + 1) * n, n - k - 1, n - k - 1, n)
            _enqueue("fact_rank1_update", [below, rowk], trail, (1.0,))
    return w, perm, swaps


def _tri_keep(w: Matrix, side: str, unit_diag: bool = False) -> Matrix:
    out = Matrix._uninitialised(w.n_rows, w.n_cols, w.elem_type)
    _enqueue("fact_tri_keep", [_full2d(w)], _full2d(out),
             params={"side": side, "unit_diag": unit_diag})
    return out


def lu(x) -> tuple[Matrix, Matrix, PermutationVector]:
    """P @ X = L @ U with partial (row) pivoting by max absolute value."""
    m, owned = _as_matrix(x)
    try:
        _require_square(m, "lu")
        _require_float(m, "lu")
        w, perm, _ = _lu_packed(m)
        lower = _tri_keep(w, "lower", unit_diag=True)
        upper = _tri_keep(w, "upper")
        w._release_storage()
        return lower, upper, PermutationVector(np.asarray(perm))
    finally:
        if owned:
            m._release_storage()


def lu_folded(x) -> tuple[Matrix, Matrix]:
    """X = L @ U with the permutation folded into L (L = P' @ L_unit)."""
    low, upper, perm = lu(x)
    n = low.n_rows
    inv = np.empty(n, dtype=np.intp)
    inv[np.asarray(perm.indices, dtype=np.intp)] = np.arange(n)
    folded = Matrix._uninitialised(n, n, low.elem_type)
    _enqueue("fact_permute_rows", [_full2d(low)], _full2d(folded),
             params={"perm": tuple(int(i) for i in inv)})
    low._release_storage()
    return folded, upper


# ---------------------------------------------------------------------------
# Cholesky

def chol(x) -> Matrix:
    """Upper-triangular R with X = R' @ R for symmetric positive-definite X."""
    m, owned = _as_matrix(x)
    try:
        _require_square(m, "chol")
        _require_float(m, "chol")
        _check_symmetric(m, "chol")
        rt = _rt.get_runtime()
        n = m.n_rows
        w = _clone(m)
        for k in range(n):
            d = float(rt.read_scalar(w.mem, k + k * n))
            if d <= 0.0 or not math.isfinite(d):
                w._release_storage()
                raise NotPositiveDefiniteError(k)
            s = math.sqrt(d)
            rowk = FlatView(w.mem, k + k * n, n - k, n)
            _enqueue("eop_scalar_times", [rowk], rowk, (1.0 / s,))
            if k + 1 < n:
                tail = FlatView(w.mem, k + (k + 1) * n, n - k - 1, n)
                trail = BlockView(w.mem, (k + 1) + (k + 1) * n, n - k - 1, n - k - 1, n)
                _enqueue("fact_rank1_update", [tail, tail], trail, (1.0,))
        r = _tri_keep(w, "upper")
        w._release_storage()
        return r
    finally:
        if owned:
            m._release_storage()


# ---------------------------------------------------------------------------
# solve / det

def solve(a, b) -> Matrix:
    """Solve A @ X = B through the LU factorization plus substitution."""
    ma, owned_a = _as_matrix(a)
    mb, owned_b = _as_matrix(b)
    try:
        _require_square(ma, "solve")
        _require_float(ma, "solve")
        if mb.n_rows != ma.n_rows:
            raise DimensionError("solve", (ma.n_rows, ma.n_cols),
                                 (mb.n_rows, mb.n_cols))
        rt = _rt.get_runtime()
        n, k = ma.n_rows, mb.n_cols
        w, perm, _ = _lu_packed(ma)
        xm = Matrix._uninitialised(n, k, mb.elem_type)
        _enqueue("fact_permute_rows", [_full2d(mb)], _full2d(xm),
                 params={"perm": tuple(perm)})
        # forward substitution against unit-lower L
        for j in range(n - 1):
            colj = FlatView(w.mem, j * n + j + 1, n - j - 1, 1)
            rowj = FlatView(xm.mem, j, k, n)
            below = BlockView(xm.mem, j + 1, n - j - 1, k, n)
            _enqueue("fact_rank1_update", [colj, rowj], below, (1.0,))
        # back substitution against U
        diag = rt.read_elems(w.mem, [j + j * n for j in range(n)])
        for j in range(n - 1, -1, -1):
            rowj = FlatView(xm.mem, j, k, n)
            _enqueue("eop_scalar_times", [rowj], rowj, (1.0 / float(diag[j]),))
            if j > 0:
                colj = FlatView(w.mem, j * n, j, 1)
                above = BlockView(xm.mem, 0, j, k, n)
                _enqueue("fact_rank1_update", [colj, rowj], above, (1.0,))
        w._release_storage()
        return xm
    finally:
        if owned_a:
            ma._release_storage()
        if owned_b:
            mb._release_storage()


def det(a) -> float:
    """Determinant via LU: product of U's diagonal times the pivot sign."""
    m, owned = _as_matrix(a)
    try:
        _require_square(m, "det")
        _require_float(m, "det")
        if m.n_rows == 0:
            return 1.0
        rt = _rt.get_runtime()
        try:
            w, _, swaps = _lu_packed(m)
        except SingularMatrixError:
            return 0.0
        n = m.n_rows
        diag = rt.read_elems(w.mem, [j + j * n for j in range(n)])
        w._release_storage()
        sign = -1.0 if swaps % 2 else 1.0
        return sign * float(np.prod(diag.astype(np.float64)))
    finally:
        if owned:
            m._release_storage()


# ---------------------------------------------------------------------------
# symmetric eigenvalues (cyclic Jacobi)

_MAX_SWEEPS = 30
_OFF_TOL = 1e-10


def _jacobi_cs(app: float, apq: float, aqq: float) -> tuple[float, float]:
    tau = (aqq - app) / (2.0 * apq)
    if tau >= 0:
        t = 1.0 / (tau + math.sqrt(1.0 + tau * tau))
    else:
        t = -1.0 / (-tau + math.sqrt(1.0 + tau * tau))
    c = 1.0 / math.sqrt(1.0 + t * t)
    return c, t * c


def _off_diag_norm(w: Matrix) -> float:
    rt = _rt.get_runtime()
    n = w.n_rows
    total = float(rt.execute_reduce(KernelInvocation(
        "reduce_dot", (FlatView(w.mem, 0, w.n_elem), FlatView(w.mem, 0, w.n_elem)), None)))
    dv = Col(n, elem_type=w.elem_type)
    _enqueue("mov_diagvec_extract", [_full2d(w)], FlatView(dv.mem, 0, n),
             params={"k": 0})
    dsq = float(rt.execute_reduce(KernelInvocation(
        "reduce_dot", (FlatView(dv.mem, 0, n), FlatView(dv.mem, 0, n)), None)))
    dv._release_storage()
    return math.sqrt(max(total - dsq, 0.0))


def _eig_sym_values(m: Matrix) -> np.ndarray:
    rt = _rt.get_runtime()
    n = m.n_rows
    w = _clone(m)
    norm_x = _fro_norm(m)
    prev_off = math.inf
    for _ in range(_MAX_SWEEPS):
        for p in range(n - 1):
            for q in range(p + 1, n):
                vals = rt.read_elems(w.mem, [p + p * n, p + q * n, q + q * n])
                app, apq, aqq = (float(v) for v in vals)
                if apq == 0.0:
                    continue
                c, s = _jacobi_cs(app, apq, aqq)
                full = _full2d(w)
                _enqueue("fact_rot_cols", [], full, (c, s), {"p": p, "q": q})
                _enqueue("fact_rot_rows", [], full, (c, s), {"p": p, "q": q})
        off = _off_diag_norm(w)
        # second condition: float32 bottoms out above the fixed tolerance
        if off <= _OFF_TOL * norm_x or off >= prev_off:
            break
        prev_off = off
    diag = rt.read_elems(w.mem, [j + j * n for j in range(n)])
    w._release_storage()
    return np.sort(diag)


def eig_sym(x) -> Col:
    """Eigenvalues of a symmetric matrix, ascending."""
    m, owned = _as_matrix(x)
    try:
        _require_square(m, "eig_sym")
        _require_float(m, "eig_sym")
        _check_symmetric(m, "eig_sym")
        vals = _eig_sym_values(m)
        out = Col(m.n_rows, elem_type=m.elem_type)
        if m.n_rows:
            _rt.get_runtime().copy_h2d(vals, out.mem)
        return out
    finally:
        if owned:
            m._release_storage()


# ---------------------------------------------------------------------------
# singular values / pseudo-inverse

def svd(x) -> Col:
    """Singular values, descending (square roots of the smaller Gram's spectrum)."""
    m, owned = _as_matrix(x)
    try:
        _require_float(m, "svd")
        node = m._as_expr_node()
        if m.n_rows >= m.n_cols:
            gram = evaluate(_expr.rewrite_trans(node) @ node)
        else:
            gram = evaluate(node @ _expr.rewrite_trans(node))
        vals = _eig_sym_values(gram)
        gram._release_storage()
        sv = np.sqrt(np.clip(vals, 0.0, None))[::-1].copy()
        out = Col(sv.shape[0], elem_type=m.elem_type)
        if sv.shape[0]:
            _rt.get_runtime().copy_h2d(sv, out.mem)
        return out
    finally:
        if owned:
            m._release_storage()


def _col_view(m: Matrix, j: int) -> FlatView:
    return FlatView(m.mem, j * m.n_rows, m.n_rows, 1)


def _one_sided_jacobi(w: Matrix) -> Matrix:
    """Orthogonalize the columns of w in place; returns the accumulated V."""
    rt = _rt.get_runtime()
    n = w.n_cols
    v = Matrix(n, n, fill="eye", elem_type=w.elem_type)
    eps = float(np.finfo(NP_DTYPE[w.elem_type]).eps)
    for _ in range(_MAX_SWEEPS):
        rotated = 0
        for p in range(n - 1):
            for q in range(p + 1, n):
                app = float(rt.execute_reduce(KernelInvocation(
                    "reduce_dot", (_col_view(w, p), _col_view(w, p)), None)))
                aqq = float(rt.execute_reduce(KernelInvocation(
                    "reduce_dot", (_col_view(w, q), _col_view(w, q)), None)))
                apq = float(rt.execute_reduce(KernelInvocation(
                    "reduce_dot", (_col_view(w, p), _col_view(w, q)), None)))
                if abs(apq) <= 10 * eps * math.sqrt(app * aqq) or apq == 0.0:
                    continue
                c, s = _jacobi_cs(app, apq, aqq)
                _enqueue("fact_rot_cols", [], _full2d(w), (c, s), {"p": p, "q": q})
                _enqueue("fact_rot_cols", [], _full2d(v), (c, s), {"p": p, "q": q})
                rotated += 1
        if rotated == 0:
            break
    return v


def pinv(x) -> Matrix:
    """Moore-Penrose pseudo-inverse via a full one-sided Jacobi SVD."""
    m, owned = _as_matrix(x)
    try:
        _require_float(m, "pinv")
        if m.n_rows < m.n_cols:
            tall = evaluate(_expr.rewrite_trans(m._as_expr_node()))
            p = pinv(tall)
            tall._release_storage()
            out = evaluate(_expr.rewrite_trans(p._as_expr_node()))
            p._release_storage()
            return out
        rt = _rt.get_runtime()
        n = m.n_cols
        w = _clone(m)
        v = _one_sided_jacobi(w)
        sigma = np.array([
            math.sqrt(max(float(rt.execute_reduce(KernelInvocation(
                "reduce_dot", (_col_view(w, j), _col_view(w, j)), None))), 0.0))
            for j in range(n)
        ])
        cutoff = 1e-6 * (sigma.max() if n else 0.0)
        # A+ = sum over kept j of v_j (1/sigma_j^2) w_j', since u_j = w_j/sigma_j
        for j in range(n):
            scale = 1.0 / (sigma[j] ** 2) if sigma[j] > cutoff else 0.0
            _enqueue("eop_scalar_times", [_col_view(w, j)], _col_view(w, j), (scale,))
        result = evaluate(v._as_expr_node() @ _expr.rewrite_trans(w._as_expr_node()))
        w._release_storage()
        v._release_storage()
        return result
    finally:
        if owned:
            m._release_storage()


# ---------------------------------------------------------------------------
# scalar-valued functions

def trace(a) -> float:
    """Sum of the diagonal of a square matrix."""
    m, owned = _as_matrix(a)
    try:
        _require_square(m, "trace")
        n = m.n_rows
        if n == 0:
            return 0
        dv = Col(n, elem_type=m.elem_type)
        _enqueue("mov_diagvec_extract", [_full2d(m)], FlatView(dv.mem, 0, n),
                 params={"k": 0})
        total = _ops.accu(dv)
        dv._release_storage()
        return total
    finally:
        if owned:
            m._release_storage()


def as_scalar(x):
    """Evaluate a 1x1 expression and return its single element."""
    m, owned = _as_matrix(x)
    try:
        if (m.n_rows, m.n_cols) != (1, 1):
            raise DimensionError("as_scalar", (m.n_rows, m.n_cols))
        return _rt.get_runtime().read_scalar(m.mem, 0).item()
    finally:
        if owned:
            m._release_storage()


def _reduce_over(kind: str, m: Matrix) -> float:
    return float(_rt.get_runtime().execute_reduce(KernelInvocation(
        kind, (FlatView(m.mem, 0, m.n_elem),), None)))


def norm(x, kind=2) -> float:
    """Vector p-norms (p >= 1, "inf", "-inf") and matrix "fro"/"inf"/"-inf"."""
    m, owned = _as_matrix(x)
    try:
        _require_float(m, "norm")
        if m.n_elem == 0:
            return 0.0
        node = m._as_expr_node()
        if m.is_vec():
            if kind == "fro" or kind == 2:
                return _fro_norm(m)
            if kind == "inf":
                av = evaluate(_ops.absolute(node))
                r = _reduce_over("reduce_max", av)
                av._release_storage()
                return r
            if kind == "-inf":
                av = evaluate(_ops.absolute(node))
                r = _reduce_over("reduce_min", av)
                av._release_storage()
                return r
            if isinstance(kind, int) and kind >= 1:
                av = evaluate(_ops.power(_ops.absolute(node), kind))
                total = _ops.accu(av)
                av._release_storage()
                return float(total) ** (1.0 / kind)
            raise ValueError(f"bad vector norm kind {kind!r}")
        if kind == "fro":
            return _fro_norm(m)
        if kind in ("inf", "-inf"):
            sums = evaluate(_ops.sum(_ops.absolute(node), dim=1))
            r = _reduce_over("reduce_max" if kind == "inf" else "reduce_min", sums)
            sums._release_storage()
            return r
        raise ValueError(
            f"matrix norm kind {kind!r} not supported (use 'fro', 'inf', '-inf')")
    finally:
        if owned:
            m._release_storage()
