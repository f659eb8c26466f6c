"""Free functions over device matrices and expressions.

Structural and element-wise functions return expression nodes (nothing runs
until evaluation); scalar-returning reductions and ``find`` execute eagerly
and move one scalar (or one index buffer) back to the host.
"""

from __future__ import annotations

from . import expr as _expr
from . import runtime as _rt
from .errors import DimensionError, ElemTypeError
from .expr import ExprNode, Relational, as_expr, build_node, rewrite_trans
from .matrix import Col, Matrix, Subview, conv_to, to_device, to_host
from .runtime import FlatView, KernelInvocation

__all__ = [
    "zeros", "ones", "eye", "randu", "randn", "linspace",
    "exp", "log", "log10", "sqrt", "square", "power", "absolute",
    "cos", "sin", "tan", "acos", "asin", "atan",
    "trans", "diagmat", "diagvec", "vectorise", "resize", "reshape",
    "repmat", "join_rows", "join_cols",
    "sum", "min", "max", "mean", "var", "stddev",
    "accu", "dot", "find", "all", "any",
    "conv_to", "to_host", "to_device",
]


# -- generators (lazy: building performs no device work) ----------------------

def _dims(rows, cols):
    if cols is None:
        return rows, 1
    return rows, cols


def zeros(rows, cols=None, elem_type="f32"):
    r, c = _dims(rows, cols)
    return build_node("gen_zeros", (), (r, c), elem_type)


def ones(rows, cols=None, elem_type="f32"):
    r, c = _dims(rows, cols)
    return build_node("gen_ones", (), (r, c), elem_type)


def eye(rows, cols, elem_type="f32"):
    return build_node("gen_eye", (), (rows, cols), elem_type)


def randu(rows, cols=None, elem_type="f32"):
    r, c = _dims(rows, cols)
    return build_node("gen_randu", (), (r, c), elem_type)


def randn(rows, cols=None, elem_type="f32"):
    r, c = _dims(rows, cols)
    return build_node("gen_randn", (), (r, c), elem_type)


def linspace(start, end, n, elem_type="f32"):
    if n < 1:
        raise ValueError("linspace needs n >= 1")
    return build_node("gen_linspace", (), (n, 1, start, end), elem_type)


# -- element-wise functions -----------------------------------------------------

def _unary(kind):
    def fn(x):
        return build_node(kind, (as_expr(x),))
    fn.__name__ = kind.removeprefix("eop_")
    return fn


exp = _unary("eop_exp")
log = _unary("eop_log")
log10 = _unary("eop_log10")
sqrt = _unary("eop_sqrt")
square = _unary("eop_square")
absolute = _unary("eop_abs")
cos = _unary("eop_cos")
sin = _unary("eop_sin")
tan = _unary("eop_tan")
acos = _unary("eop_acos")
asin = _unary("eop_asin")
atan = _unary("eop_atan")


def power(x, p):
    return build_node("eop_pow", (as_expr(x),), (p,))


# -- structure ---------------------------------------------------------------------

def trans(x) -> ExprNode:
    return rewrite_trans(x)


def diagmat(v) -> ExprNode:
    return build_node("op_diagmat", (as_expr(v),))


def diagvec(x, k: int = 0) -> ExprNode:
    return build_node("op_diagvec", (as_expr(x),), (k,))


def vectorise(x) -> ExprNode:
    return build_node("op_vectorise", (as_expr(x),))


def resize(x, rows: int, cols: int) -> ExprNode:
    return build_node("op_resize", (as_expr(x),), (rows, cols))


def reshape(x, rows: int, cols: int) -> ExprNode:
    return build_node("op_reshape", (as_expr(x),), (rows, cols))


def repmat(x, p: int, q: int) -> ExprNode:
    if p < 1 or q < 1:
        raise ValueError("repmat needs p, q >= 1")
    return build_node("op_repmat", (as_expr(x),), (p, q))


def join_rows(a, b) -> ExprNode:
    return build_node("glue_join_rows", (as_expr(a), as_expr(b)))


def join_cols(a, b) -> ExprNode:
    return build_node("glue_join_cols", (as_expr(a), as_expr(b)))


# -- per-dimension reductions (lazy) -----------------------------------------------

def _rdim(kind):
    def fn(x, dim: int = 0):
        return build_node(kind, (as_expr(x),), (dim,))
    fn.__name__ = kind.removeprefix("op_").removesuffix("_dim")
    return fn


sum = _rdim("op_sum_dim")
min = _rdim("op_min_dim")
max = _rdim("op_max_dim")
mean = _rdim("op_mean_dim")
var = _rdim("op_var_dim")
stddev = _rdim("op_stddev_dim")


# -- eager scalar reductions ----------------------------------------------------------

def _materialize(x) -> tuple[Matrix, bool]:
    if isinstance(x, Matrix):
        return x, False
    if isinstance(x, (ExprNode, Subview)):
        return _expr.evaluate(as_expr(x)), True
    raise TypeError(f"not a matrix or expression: {x!r}")


def _run_scalar_reduce(kind, views, params):
    rt = _rt.get_runtime()
    return rt.execute_reduce(KernelInvocation(kind, tuple(views), None, (), params))


def accu(x):
    """Sum of all elements (empty sums to zero)."""
    m, owned = _materialize(x)
    try:
        if m.n_elem == 0:
            return 0
        v = _run_scalar_reduce("reduce_accu",
                               [FlatView(m.mem, 0, m.n_elem)], {})
        return v.item()
    finally:
        if owned:
            m._release_storage()


def dot(a, b):
    """Dot product of two equally long vectors."""
    ma, owned_a = _materialize(a)
    mb, owned_b = _materialize(b)
    try:
        if not ma.is_vec() or not mb.is_vec() or ma.n_elem != mb.n_elem:
            raise DimensionError("dot", (ma.n_rows, ma.n_cols), (mb.n_rows, mb.n_cols))
        if ma.elem_type != mb.elem_type:
            raise ElemTypeError("dot: element types differ")
        if ma.n_elem == 0:
            return 0
        v = _run_scalar_reduce(
            "reduce_dot",
            [FlatView(ma.mem, 0, ma.n_elem), FlatView(mb.mem, 0, mb.n_elem)], {})
        return v.item()
    finally:
        if owned_a:
            ma._release_storage()
        if owned_b:
            mb._release_storage()


def _as_relational(x) -> Relational:
    if isinstance(x, Relational):
        return x
    return Relational("!=", x, 0)


def find(x) -> Matrix:
    """Ascending column-major linear indices of matching elements.

    Accepts a matrix/expression (nonzero test) or a relational like
    ``A > 0.3``.  Runs one counting kernel plus one index-building kernel;
    the only host transfer is the count scalar.
    """
    rel = _as_relational(x)
    m, owned = _materialize(rel.operand)
    try:
        params = {"op": rel.op, "threshold": rel.threshold}
        if m.n_elem == 0:
            return Col(0, elem_type="u64")
        count = int(_run_scalar_reduce(
            "pred_count", [FlatView(m.mem, 0, m.n_elem)], dict(params)))
        out = Col(count, elem_type="u64")
        if count:
            rt = _rt.get_runtime()
            rt.enqueue(KernelInvocation(
                "pred_find_build", (FlatView(m.mem, 0, m.n_elem),),
                FlatView(out.mem, 0, count), (), dict(params)))
        return out
    finally:
        if owned:
            m._release_storage()


def all(x) -> bool:
    """True when every element matches (nonzero by default)."""
    rel = _as_relational(x)
    m, owned = _materialize(rel.operand)
    try:
        if m.n_elem == 0:
            return True
        params = {"op": rel.op, "threshold": rel.threshold, "want_all": True}
        return bool(_run_scalar_reduce(
            "pred_all_any", [FlatView(m.mem, 0, m.n_elem)], params))
    finally:
        if owned:
            m._release_storage()


def any(x) -> bool:
    """True when at least one element matches (nonzero by default)."""
    rel = _as_relational(x)
    m, owned = _materialize(rel.operand)
    try:
        if m.n_elem == 0:
            return False
        params = {"op": rel.op, "threshold": rel.threshold, "want_all": False}
        return bool(_run_scalar_reduce(
            "pred_all_any", [FlatView(m.mem, 0, m.n_elem)], params))
    finally:
        if owned:
            m._release_storage()
