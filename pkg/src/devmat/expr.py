"""Expression DAG: construction-time rewrites, shape inference, planning.

User-facing calls assemble immutable :class:`ExprNode` trees without touching
the device.  Evaluation lowers a tree into an :class:`EvalPlan`, a minimal
sequence of kernel invocations in which element-wise chains collapse into one
fused launch and type conversions are absorbed into two-way kernels, and
drives the plan through the runtime queue.

``tree_walk_oracle`` is the independent reference evaluator used by the test
suite: it computes every node into a host array with no rewrites, no fusion,
and no planner.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import kernels, runtime
from .errors import DimensionError, ElemTypeError
from .kernels import FUSED_CHAIN_MAX, NP_DTYPE
from .runtime import BlockView, FlatView, KernelInvocation


class Shape(NamedTuple):
    rows: int
    cols: int

    @property
    def n_elem(self) -> int:
        return self.rows * self.cols


# ---------------------------------------------------------------------------
# Node kinds

EOP_UNARY_KINDS = frozenset(kernels.EOP_UNARY)
EOP_SCALAR_KINDS = frozenset(kernels.EOP_SCALAR)
EGLUE_KINDS = frozenset(kernels.EGLUE)
ELEMENTWISE_KINDS = EOP_UNARY_KINDS | EOP_SCALAR_KINDS | EGLUE_KINDS

GEN_KINDS = frozenset({"gen_zeros", "gen_ones", "gen_fill", "gen_eye",
                       "gen_linspace", "gen_randu", "gen_randn"})

UNARY_OP_KINDS = frozenset({
    "op_htrans", "op_diagmat", "op_diagvec", "op_vectorise", "op_resize",
    "op_reshape", "op_repmat",
})
REDUCE_DIM_KINDS = frozenset({
    "op_sum_dim", "op_min_dim", "op_max_dim", "op_mean_dim", "op_var_dim",
    "op_stddev_dim",
})
GLUE_KINDS = frozenset({"glue_times", "glue_join_rows", "glue_join_cols"})

# conv_to fuses into any of these (the child's kernel has a two-way variant);
# matrix products and reductions keep their own launch.
CONV_FUSABLE_KINDS = (ELEMENTWISE_KINDS | GEN_KINDS | UNARY_OP_KINDS
                      | frozenset({"subview"}))


@dataclass(frozen=True)
class ExprNode:
    """Immutable expression-DAG node.

    Leaves (kind ``"leaf"``) reference a device matrix; interior nodes
    reference only other nodes.  ``aux`` carries up to a couple of scalar
    parameters (a shift ``k``, target dimensions, a dim index and so on).
    Shape is inferred externally by :func:`shape_of`, never stored.
    """
    kind: str
    operands: tuple = ()
    aux: tuple = ()
    elem_type: str = "f32"

    # numpy scalars must defer to our operator overloads
    __array_ufunc__ = None

    # -- operator sugar (shared with Matrix through ExpressionOps) ----------
    def __add__(self, other):
        return _add(self, other)

    def __radd__(self, other):
        return _add(self, other)

    def __sub__(self, other):
        return _sub(self, other)

    def __rsub__(self, other):
        return _rsub(self, other)

    def __mul__(self, other):
        return _mul(self, other)

    def __rmul__(self, other):
        return _mul(self, other)

    def __truediv__(self, other):
        return _div(self, other)

    def __rtruediv__(self, other):
        return _rdiv(self, other)

    def __matmul__(self, other):
        return build_node("glue_times", (as_expr(self), as_expr(other)))

    def __neg__(self):
        return build_node("eop_scalar_minus_pre", (as_expr(self),), (0,))

    def __pos__(self):
        return as_expr(self)

    def __abs__(self):
        return build_node("eop_abs", (as_expr(self),))

    def __gt__(self, k):
        return Relational(">", self, k)

    def __lt__(self, k):
        return Relational("<", self, k)

    def __ge__(self, k):
        return Relational(">=", self, k)

    def __le__(self, k):
        return Relational("<=", self, k)

    def t(self) -> "ExprNode":
        return rewrite_trans(self)

    def eval(self, elem_type: str | None = None):
        """Force evaluation into a fresh device matrix."""
        node = self if elem_type is None else conv_node(self, elem_type)
        return evaluate(node)

    def __repr__(self):
        s = shape_of(self)
        return f"ExprNode({self.kind}, {s.rows}x{s.cols}, {self.elem_type})"


@dataclass(frozen=True)
class Relational:
    """A pending element-vs-scalar comparison consumed by find/all/any."""
    op: str
    operand: object
    threshold: float


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.integer, np.floating)) and not isinstance(x, bool)


def as_expr(x) -> ExprNode:
    if isinstance(x, ExprNode):
        return x
    to_node = getattr(x, "_as_expr_node", None)
    if to_node is not None:
        return to_node()
    raise TypeError(f"not an expression or matrix: {x!r}")


def _add(a, b):
    if _is_scalar(b):
        return build_node("eop_scalar_plus", (as_expr(a),), (b,))
    return build_node("eglue_plus", (as_expr(a), as_expr(b)))


def _sub(a, b):
    if _is_scalar(b):
        return build_node("eop_scalar_minus_post", (as_expr(a),), (b,))
    return build_node("eglue_minus", (as_expr(a), as_expr(b)))


def _rsub(a, k):
    return build_node("eop_scalar_minus_pre", (as_expr(a),), (k,))


def _mul(a, b):
    if _is_scalar(b):
        return scalar_times(as_expr(a), b)
    return build_node("eglue_schur", (as_expr(a), as_expr(b)))


def _div(a, b):
    if _is_scalar(b):
        return build_node("eop_scalar_div_post", (as_expr(a),), (b,))
    return build_node("eglue_div", (as_expr(a), as_expr(b)))


def _rdiv(a, k):
    return build_node("eop_scalar_div_pre", (as_expr(a),), (k,))


class ExpressionOps:
    """Mixin giving containers the same operator surface as ExprNode."""

    __slots__ = ()

    # keep numpy from trying to treat containers as sequences
    __array_ufunc__ = None

    __add__ = ExprNode.__add__
    __radd__ = ExprNode.__radd__
    __sub__ = ExprNode.__sub__
    __rsub__ = ExprNode.__rsub__
    __mul__ = ExprNode.__mul__
    __rmul__ = ExprNode.__rmul__
    __truediv__ = ExprNode.__truediv__
    __rtruediv__ = ExprNode.__rtruediv__
    __matmul__ = ExprNode.__matmul__
    __neg__ = ExprNode.__neg__
    __pos__ = ExprNode.__pos__
    __abs__ = ExprNode.__abs__
    __gt__ = ExprNode.__gt__
    __lt__ = ExprNode.__lt__
    __ge__ = ExprNode.__ge__
    __le__ = ExprNode.__le__


# ---------------------------------------------------------------------------
# Shape inference (external to nodes; no device work)

def _leaf_shape(node: ExprNode) -> Shape:
    m = node.operands[0]
    return Shape(m.n_rows, m.n_cols)


def _diag_length(rows: int, cols: int, k: int) -> int:
    if k >= 0:
        return max(0, min(rows, cols - k))
    return max(0, min(rows + k, cols))


def _region_shape(parent: Shape, region: tuple) -> Shape:
    kind = region[0]
    if kind == "diag":
        return Shape(_diag_length(parent.rows, parent.cols, region[1]), 1)
    if kind == "row":
        return Shape(1, parent.cols)
    if kind == "col":
        return Shape(parent.rows, 1)
    if kind == "rows":
        return Shape(region[2] - region[1] + 1, parent.cols)
    if kind == "cols":
        return Shape(parent.rows, region[2] - region[1] + 1)
    if kind == "submat":
        p, q, r, s = region[1:]
        return Shape(r - p + 1, s - q + 1)
    raise ValueError(f"unknown region kind {kind!r}")


def shape_of(node: ExprNode) -> Shape:
    """Result shape of an expression; deterministic, launches nothing."""
    kind = node.kind
    if kind == "leaf":
        return _leaf_shape(node)
    if kind == "subview":
        return _region_shape(shape_of(node.operands[0]), node.aux[0])
    if kind in GEN_KINDS:
        return Shape(node.aux[0], node.aux[1])
    if kind in ELEMENTWISE_KINDS or kind == "mtop_conv_to":
        return shape_of(node.operands[0])
    if kind == "op_htrans":
        s = shape_of(node.operands[0])
        return Shape(s.cols, s.rows)
    if kind == "op_diagmat":
        s = shape_of(node.operands[0])
        n = s.n_elem
        return Shape(n, n)
    if kind == "op_diagvec":
        s = shape_of(node.operands[0])
        return Shape(_diag_length(s.rows, s.cols, node.aux[0]), 1)
    if kind == "op_vectorise":
        s = shape_of(node.operands[0])
        return Shape(s.n_elem, 1)
    if kind in ("op_resize", "op_reshape"):
        return Shape(node.aux[0], node.aux[1])
    if kind == "op_repmat":
        s = shape_of(node.operands[0])
        return Shape(s.rows * node.aux[0], s.cols * node.aux[1])
    if kind in REDUCE_DIM_KINDS:
        s = shape_of(node.operands[0])
        return Shape(1, s.cols) if node.aux[0] == 0 else Shape(s.rows, 1)
    if kind == "glue_times":
        a = shape_of(node.operands[0])
        b = shape_of(node.operands[1])
        return Shape(a.rows, b.cols)
    if kind == "glue_join_rows":
        a = shape_of(node.operands[0])
        b = shape_of(node.operands[1])
        return Shape(a.rows, a.cols + b.cols)
    if kind == "glue_join_cols":
        a = shape_of(node.operands[0])
        b = shape_of(node.operands[1])
        return Shape(a.rows + b.rows, a.cols)
    raise ValueError(f"unknown node kind {kind!r}")


# ---------------------------------------------------------------------------
# Construction

def build_node(kind: str, operands: tuple = (), aux: tuple = (),
               elem_type: str | None = None) -> ExprNode:
    """Raw node constructor: validates shapes/types, performs no rewrites
    and zero device work."""
    operands = tuple(operands)
    if elem_type is None:
        elem_type = operands[0].elem_type if operands else "f32"

    if kind in EGLUE_KINDS:
        a, b = operands
        sa, sb = shape_of(a), shape_of(b)
        if sa != sb:
            raise DimensionError(kind, sa, sb)
        _require_same_type(kind, a, b)
    elif kind == "glue_times":
        a, b = operands
        sa, sb = shape_of(a), shape_of(b)
        if sa.cols != sb.rows:
            raise DimensionError(kind, sa, sb)
        _require_same_type(kind, a, b)
    elif kind == "glue_join_rows":
        a, b = operands
        sa, sb = shape_of(a), shape_of(b)
        if sa.rows != sb.rows:
            raise DimensionError(kind, sa, sb)
        _require_same_type(kind, a, b)
    elif kind == "glue_join_cols":
        a, b = operands
        sa, sb = shape_of(a), shape_of(b)
        if sa.cols != sb.cols:
            raise DimensionError(kind, sa, sb)
        _require_same_type(kind, a, b)
    elif kind == "op_diagmat":
        s = shape_of(operands[0])
        if s.rows != 1 and s.cols != 1:
            raise DimensionError(kind, s)
    elif kind in ("op_resize", "op_reshape"):
        if aux[0] < 0 or aux[1] < 0:
            raise DimensionError(kind, (aux[0], aux[1]))
    elif kind in GEN_KINDS:
        if aux[0] < 0 or aux[1] < 0:
            raise DimensionError(kind, (aux[0], aux[1]))
    elif kind in REDUCE_DIM_KINDS:
        if aux[0] not in (0, 1):
            raise ValueError(f"{kind}: dim must be 0 or 1")

    return ExprNode(kind, operands, tuple(aux), elem_type)


def _require_same_type(kind: str, a: ExprNode, b: ExprNode) -> None:
    if a.elem_type != b.elem_type:
        raise ElemTypeError(
            f"{kind}: element types differ ({a.elem_type} vs {b.elem_type}); "
            "insert an explicit conversion")


def conv_node(x, elem_type: str) -> ExprNode:
    node = as_expr(x)
    if elem_type not in NP_DTYPE:
        raise ElemTypeError(f"unknown element type {elem_type!r}")
    if node.elem_type == elem_type:
        return node
    return build_node("mtop_conv_to", (node,), (), elem_type)


def rewrite_trans(x) -> ExprNode:
    """Transpose with construction-time rewrites.

    The transpose of a diagonal matrix is the matrix itself, so a diagmat
    node passes through unchanged; a double transpose collapses to the
    original operand.  Everything else gets a transpose node.
    """
    node = as_expr(x)
    if node.kind == "op_diagmat":
        return node
    if node.kind == "op_htrans":
        return node.operands[0]
    return build_node("op_htrans", (node,))


def scalar_times(x, k) -> ExprNode:
    """Scalar multiply with constant folding: k1*(k2*A) becomes (k1*k2)*A."""
    node = as_expr(x)
    if node.kind == "eop_scalar_times":
        return build_node("eop_scalar_times", node.operands, (node.aux[0] * k,))
    return build_node("eop_scalar_times", (node,), (k,))


def census(x) -> dict[str, int]:
    """Count node kinds in a DAG (each shared node counted once)."""
    counts: dict[str, int] = {}
    seen: set[int] = set()

    def walk(n: ExprNode) -> None:
        if id(n) in seen:
            return
        seen.add(id(n))
        counts[n.kind] = counts.get(n.kind, 0) + 1
        if n.kind != "leaf":
            for c in n.operands:
                walk(c)

    walk(as_expr(x))
    return counts


# ---------------------------------------------------------------------------
# Planning

@dataclass(frozen=True)
class PlanStep:
    kernel: str
    inputs: tuple            # refs: ("slot", i) | ("leaf", Matrix)
    in_modes: tuple          # "flat" | "2d" | ("flat-region"/"block-region", ...)
    out_slot: int
    out_mode: str            # "flat" | "2d"
    scalars: tuple = ()
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class SlotInfo:
    rows: int
    cols: int
    elem_type: str


@dataclass
class EvalPlan:
    """Ordered kernel schedule for one expression evaluation."""
    steps: list
    slots: list
    result: tuple            # ("slot", i) | ("leaf", Matrix)
    absorbed: list           # (step_index, from_type, to_type) conversions fused away

    @property
    def n_invocations(self) -> int:
        return len(self.steps)

    @property
    def temp_schedule(self) -> dict:
        """slot -> (producing step, last consuming step); the result slot
        has no release point."""
        final = self.result[1] if self.result[0] == "slot" else None
        schedule = {}
        for i, step in enumerate(self.steps):
            schedule[step.out_slot] = [i, None]
        for i, step in enumerate(self.steps):
            for ref in step.inputs:
                if ref[0] == "slot" and ref[1] != final:
                    schedule[ref[1]][1] = i
        return {slot: tuple(span) for slot, span in schedule.items()}

    def leaf_buffer_ids(self) -> set[int]:
        ids = set()
        for step in self.steps:
            for ref in step.inputs:
                if ref[0] == "leaf":
                    ids.add(ref[1].mem.buffer_id)
        if self.result[0] == "leaf":
            ids.add(self.result[1].mem.buffer_id)
        return ids


_GEN_KERNEL = {
    "gen_zeros": "gen_fill_const",
    "gen_ones": "gen_fill_const",
    "gen_fill": "gen_fill_const",
    "gen_eye": "gen_eye",
    "gen_linspace": "gen_linspace",
    "gen_randu": "gen_randu",
    "gen_randn": "gen_randn",
}

_RDIM_KERNEL = {
    "op_sum_dim": "rdim_sum",
    "op_min_dim": "rdim_min",
    "op_max_dim": "rdim_max",
    "op_mean_dim": "rdim_mean",
    "op_var_dim": "rdim_var",
    "op_stddev_dim": "rdim_var",  # followed by an element-wise sqrt
}


class _Lowerer:
    def __init__(self, fuse: bool):
        self.fuse = fuse
        self.steps: list[PlanStep] = []
        self.slots: list[SlotInfo] = []
        self.absorbed: list[tuple] = []

    def new_slot(self, shape: Shape, elem_type: str) -> int:
        self.slots.append(SlotInfo(shape.rows, shape.cols, elem_type))
        return len(self.slots) - 1

    def emit(self, kernel, inputs, in_modes, shape, out_type, out_mode,
             scalars=(), params=None, absorbed_from=None) -> tuple:
        slot = self.new_slot(shape, out_type)
        self.steps.append(PlanStep(kernel, tuple(inputs), tuple(in_modes),
                                   slot, out_mode, tuple(scalars), params or {}))
        if absorbed_from is not None and absorbed_from != out_type:
            self.absorbed.append((len(self.steps) - 1, absorbed_from, out_type))
        return ("slot", slot)

    # -- main recursion ------------------------------------------------------

    def lower(self, node: ExprNode, want: str):
        kind = node.kind

        if kind == "leaf":
            m = node.operands[0]
            if want == m.elem_type:
                return ("leaf", m)
            # standalone element-type conversion of a materialized matrix
            return self.emit("mov_copy", [("leaf", m)], ["flat"],
                             shape_of(node), want, "flat")

        if kind == "mtop_conv_to":
            child = node.operands[0]
            if self.fuse and child.kind in CONV_FUSABLE_KINDS:
                return self.lower(child, want)
            src = self.lower(child, child.elem_type)
            return self.emit("mov_copy", [src], ["flat"], shape_of(node),
                             want, "flat")

        if kind in ELEMENTWISE_KINDS:
            return self._lower_chain(node, want)

        if kind in GEN_KINDS:
            return self._lower_generator(node, want)

        if kind == "subview":
            parent_node = node.operands[0]
            parent = parent_node.operands[0]
            region = node.aux[0]
            mode = _region_view_mode(parent, region)
            return self.emit("mov_extract_strided", [("leaf", parent)], [mode],
                             shape_of(node), want, "flat",
                             absorbed_from=node.elem_type)

        if kind == "op_htrans":
            child = node.operands[0]
            src = self.lower(child, child.elem_type)
            return self.emit("mov_transpose", [src], ["2d"], shape_of(node),
                             want, "2d", absorbed_from=node.elem_type)

        if kind == "op_diagmat":
            src = self.lower(node.operands[0], node.operands[0].elem_type)
            return self.emit("mov_diagmat_build", [src], ["flat"], shape_of(node),
                             want, "2d", absorbed_from=node.elem_type)

        if kind == "op_diagvec":
            src = self.lower(node.operands[0], node.operands[0].elem_type)
            return self.emit("mov_diagvec_extract", [src], ["2d"], shape_of(node),
                             want, "flat", params={"k": node.aux[0]},
                             absorbed_from=node.elem_type)

        if kind in ("op_vectorise", "op_reshape"):
            src = self.lower(node.operands[0], node.operands[0].elem_type)
            return self.emit("mov_reshape_copy", [src], ["flat"], shape_of(node),
                             want, "flat", absorbed_from=node.elem_type)

        if kind == "op_resize":
            src = self.lower(node.operands[0], node.operands[0].elem_type)
            return self.emit("mov_resize", [src], ["2d"], shape_of(node),
                             want, "2d", absorbed_from=node.elem_type)

        if kind == "op_repmat":
            src = self.lower(node.operands[0], node.operands[0].elem_type)
            return self.emit("gen_repmat", [src], ["2d"], shape_of(node),
                             want, "flat", params={"rows_out": shape_of(node).rows},
                             absorbed_from=node.elem_type)

        if kind in ("glue_join_rows", "glue_join_cols"):
            a = self.lower(node.operands[0], node.operands[0].elem_type)
            b = self.lower(node.operands[1], node.operands[1].elem_type)
            kernel = "mov_join_rows" if kind == "glue_join_rows" else "mov_join_cols"
            return self.emit(kernel, [a, b], ["2d", "2d"], shape_of(node),
                             want, "2d", absorbed_from=node.elem_type)

        if kind in REDUCE_DIM_KINDS:
            child = node.operands[0]
            src = self.lower(child, child.elem_type)
            ref = self.emit(_RDIM_KERNEL[kind], [src], ["2d"], shape_of(node),
                            child.elem_type, "flat", params={"dim": node.aux[0]})
            if kind == "op_stddev_dim":
                ref = self.emit("eop_sqrt", [ref], ["flat"], shape_of(node),
                                child.elem_type, "flat")
            if want != child.elem_type:
                ref = self.emit("mov_copy", [ref], ["flat"], shape_of(node),
                                want, "flat")
            return ref

        if kind == "glue_times":
            a, b = node.operands
            ra = self.lower(a, a.elem_type)
            rb = self.lower(b, b.elem_type)
            ref = self.emit("gemm", [ra, rb], ["2d", "2d"], shape_of(node),
                            a.elem_type, "2d")
            if want != a.elem_type:
                ref = self.emit("mov_copy", [ref], ["flat"], shape_of(node),
                                want, "flat")
            return ref

        raise ValueError(f"cannot lower node kind {kind!r}")

    # -- element-wise chains ---------------------------------------------------

    def _lower_chain(self, root: ExprNode, want: str):
        elem = root.elem_type
        program: list[tuple] = []
        inputs: list[tuple] = []
        budget = [FUSED_CHAIN_MAX if self.fuse else 1]

        def load(node: ExprNode) -> None:
            ref = self.lower(node, elem)
            inputs.append(ref)
            program.append(("load", len(inputs) - 1))

        def collect(node: ExprNode) -> None:
            if node.kind not in ELEMENTWISE_KINDS or budget[0] <= 0:
                load(node)
                return
            budget[0] -= 1
            if node.kind in EGLUE_KINDS:
                collect(node.operands[0])
                collect(node.operands[1])
                program.append(("glue", node.kind))
            elif node.kind in EOP_SCALAR_KINDS:
                collect(node.operands[0])
                program.append(("scalar", node.kind, node.aux[0]))
            else:
                collect(node.operands[0])
                program.append(("unary", node.kind,
                                node.aux[0] if node.aux else None))

        collect(root)
        shape = shape_of(root)
        n_stages = sum(1 for s in program if s[0] != "load")

        if n_stages == 1:
            # single stage: use the dedicated kernel rather than the chain
            stage = program[-1]
            if stage[0] == "glue":
                return self.emit(stage[1], inputs, ["flat"] * len(inputs),
                                 shape, want, "flat", absorbed_from=elem)
            scalars = (stage[2],) if stage[2] is not None else ()
            return self.emit(stage[1], inputs, ["flat"], shape, want, "flat",
                             scalars=scalars, absorbed_from=elem)

        return self.emit("fused_chain", inputs, ["flat"] * len(inputs),
                         shape, want, "flat",
                         params={"program": tuple(program),
                                 "compute_dtype": NP_DTYPE[elem].str},
                         absorbed_from=elem)

    def _lower_generator(self, node: ExprNode, want: str):
        shape = shape_of(node)
        kernel = _GEN_KERNEL[node.kind]
        params: dict = {"gen_type": node.elem_type}
        scalars: tuple = ()
        if node.kind == "gen_zeros":
            scalars = (0,)
        elif node.kind == "gen_ones":
            scalars = (1,)
        elif node.kind == "gen_fill":
            scalars = (node.aux[2],)
        elif node.kind == "gen_eye":
            params["rows"] = shape.rows
        elif node.kind == "gen_linspace":
            scalars = (node.aux[2], node.aux[3])
            params["n"] = shape.n_elem
        elif node.kind in ("gen_randu", "gen_randn"):
            params["rng"] = True
        return self.emit(kernel, [], [], shape, want, "flat",
                         scalars=scalars, params=params,
                         absorbed_from=node.elem_type)


def _region_view_mode(parent, region: tuple):
    """Translate a subview region into a concrete strided view descriptor."""
    n, kind = parent.n_rows, region[0]
    if kind == "diag":
        k = region[1]
        length = _diag_length(parent.n_rows, parent.n_cols, k)
        offset = k * n if k >= 0 else -k
        return ("flat-region", offset, length, n + 1)
    if kind == "row":
        return ("flat-region", region[1], parent.n_cols, n)
    if kind == "col":
        return ("flat-region", region[1] * n, parent.n_rows, 1)
    if kind == "rows":
        a, b = region[1], region[2]
        return ("block-region", a, b - a + 1, parent.n_cols, n)
    if kind == "cols":
        c, d = region[1], region[2]
        return ("block-region", c * n, parent.n_rows, d - c + 1, n)
    if kind == "submat":
        p, q, r, s = region[1:]
        return ("block-region", p + q * n, r - p + 1, s - q + 1, n)
    raise ValueError(f"unknown region kind {kind!r}")


def plan(x, out_elem_type: str | None = None, fuse: bool = True) -> EvalPlan:
    """Lower an expression to a minimal ordered kernel schedule."""
    node = as_expr(x)
    want = out_elem_type or node.elem_type
    low = _Lowerer(fuse)
    result = low.lower(node, want)
    return EvalPlan(low.steps, low.slots, result, low.absorbed)


# ---------------------------------------------------------------------------
# Plan execution

def _make_view(buf, rows: int, cols: int, mode):
    if mode == "flat":
        return FlatView(buf, 0, rows * cols)
    if mode == "2d":
        return BlockView(buf, 0, rows, cols, rows)
    tag = mode[0]
    if tag == "flat-region":
        return FlatView(buf, mode[1], mode[2], mode[3])
    if tag == "block-region":
        return BlockView(buf, mode[1], mode[2], mode[3], mode[4])
    raise ValueError(f"unknown view mode {mode!r}")


def _ref_geometry(plan_obj: EvalPlan, ref):
    if ref[0] == "leaf":
        m = ref[1]
        return m.mem, m.n_rows, m.n_cols
    info = plan_obj.slots[ref[1]]
    return None, info.rows, info.cols


def execute_plan(plan_obj: EvalPlan, target_buf=None):
    """Run a plan on the active runtime.

    ``target_buf`` maps the result slot onto an existing buffer; when None a
    fresh buffer is acquired for the result.  Returns the buffer holding the
    result (callers wrap it into a Matrix) or the leaf matrix for plans with
    no steps.
    """
    rt = runtime.get_runtime()
    if plan_obj.result[0] == "leaf":
        return plan_obj.result[1]

    final_slot = plan_obj.result[1]
    slot_bufs: dict[int, object] = {}
    release_after = {slot: span[1]
                     for slot, span in plan_obj.temp_schedule.items()}

    for i, step in enumerate(plan_obj.steps):
        views = []
        for ref, mode in zip(step.inputs, step.in_modes):
            if ref[0] == "leaf":
                m = ref[1]
                views.append(_make_view(m.mem, m.n_rows, m.n_cols, mode))
            else:
                info = plan_obj.slots[ref[1]]
                views.append(_make_view(slot_bufs[ref[1]], info.rows,
                                        info.cols, mode))
        info = plan_obj.slots[step.out_slot]
        if step.out_slot == final_slot and target_buf is not None:
            out_buf = target_buf
        else:
            out_buf = rt.acquire_memory(info.rows * info.cols, info.elem_type)
        slot_bufs[step.out_slot] = out_buf
        out_view = _make_view(out_buf, info.rows, info.cols, step.out_mode)

        params = dict(step.params)
        if params.pop("rng", None):
            params["seed"] = rt.seed
            params["stream"] = rt.next_stream_id()
        rt.enqueue(KernelInvocation(step.kernel, tuple(views), out_view,
                                    step.scalars, params))

        released = set()
        for ref in step.inputs:
            slot = ref[1]
            if ref[0] == "slot" and release_after.get(slot) == i \
                    and slot != final_slot and slot not in released:
                released.add(slot)
                rt.release_deferred(slot_bufs.pop(slot))

    return slot_bufs[final_slot]


def evaluate(x, out=None, fuse: bool = True):
    """Evaluate an expression into ``out`` (or a fresh matrix).

    A bare leaf copies device-to-device (value semantics, no kernel).  When
    ``out`` aliases an operand the plan runs into fresh buffers and ``out``
    adopts the result, so products and movements never trip over themselves;
    element-wise plans are pure per-element maps and could alias safely, but
    the adoption path is uniform and costs nothing extra.
    """
    from .matrix import Matrix

    node = as_expr(x)
    rt = runtime.get_runtime()
    shape = shape_of(node)

    if out is not None and out.elem_type != node.elem_type:
        raise ElemTypeError(
            f"cannot assign {node.elem_type} expression to {out.elem_type} "
            "matrix; convert explicitly")

    plan_obj = plan(node, node.elem_type, fuse=fuse)

    if plan_obj.result[0] == "leaf":
        src = plan_obj.result[1]
        if out is None:
            out = Matrix._uninitialised(shape.rows, shape.cols, node.elem_type)
        elif out is src:
            return out
        else:
            out._reshape_storage(shape.rows, shape.cols)
        rt.copy_d2d(src.mem, out.mem, shape.n_elem)
        return out

    aliased = out is not None and out.mem.buffer_id in plan_obj.leaf_buffer_ids()
    if out is None or aliased:
        result_buf = execute_plan(plan_obj, target_buf=None)
        if out is None:
            return Matrix._adopt(result_buf, shape.rows, shape.cols, node.elem_type)
        out._adopt_buffer(result_buf, shape.rows, shape.cols)
        return out

    out._reshape_storage(shape.rows, shape.cols)
    execute_plan(plan_obj, target_buf=out.mem)
    return out


# ---------------------------------------------------------------------------
# Independent reference evaluator

def tree_walk_oracle(x) -> np.ndarray:
    """Naive per-node host evaluator: no rewrites, no fusion, no planner.

    Returns a (rows, cols) numpy array in the node's element type.  Random
    generator nodes cannot be replayed host-side and are rejected.
    """
    node = as_expr(x)
    return _oracle(node)


def _oracle(node: ExprNode) -> np.ndarray:
    kind = node.kind
    dt = NP_DTYPE[node.elem_type]

    if kind == "leaf":
        m = node.operands[0]
        rt = runtime.get_runtime()
        flat = rt.copy_d2h(m.mem, 0, m.n_elem)
        return flat.reshape((m.n_rows, m.n_cols), order="F")

    if kind == "subview":
        parent = _oracle(node.operands[0])
        return _oracle_region(parent, node.aux[0]).astype(dt)

    if kind in GEN_KINDS:
        rows, cols = node.aux[0], node.aux[1]
        if kind == "gen_zeros":
            return np.zeros((rows, cols), dtype=dt)
        if kind == "gen_ones":
            return np.ones((rows, cols), dtype=dt)
        if kind == "gen_fill":
            return np.full((rows, cols), node.aux[2]).astype(dt)
        if kind == "gen_eye":
            return np.eye(rows, cols, dtype=dt)
        if kind == "gen_linspace":
            return np.linspace(node.aux[2], node.aux[3], rows).astype(dt).reshape(rows, 1)
        raise ValueError(f"oracle cannot replay device RNG stream for {kind}")

    if kind == "mtop_conv_to":
        inner = _oracle(node.operands[0])
        with np.errstate(invalid="ignore", over="ignore"):
            return inner.astype(dt)

    a = _oracle(node.operands[0])

    if kind in EOP_UNARY_KINDS:
        return _oracle_unary(kind, a, node.aux, dt)
    if kind in EOP_SCALAR_KINDS:
        return _oracle_scalar(kind, a, node.aux[0], dt)
    if kind in EGLUE_KINDS:
        b = _oracle(node.operands[1])
        return _oracle_glue(kind, a, b, dt)
    if kind == "op_htrans":
        return np.ascontiguousarray(a.T)
    if kind == "op_diagmat":
        return np.diag(a.reshape(-1, order="F")).astype(dt)
    if kind == "op_diagvec":
        return np.diagonal(a, offset=node.aux[0]).astype(dt).reshape(-1, 1)
    if kind == "op_vectorise":
        return a.reshape(-1, order="F").reshape(-1, 1)
    if kind == "op_reshape":
        r, c = node.aux
        flat = a.reshape(-1, order="F")
        out = np.zeros(r * c, dtype=dt)
        n = min(flat.shape[0], r * c)
        out[:n] = flat[:n]
        return out.reshape((r, c), order="F")
    if kind == "op_resize":
        r, c = node.aux
        out = np.zeros((r, c), dtype=dt)
        kr, kc = min(r, a.shape[0]), min(c, a.shape[1])
        out[:kr, :kc] = a[:kr, :kc]
        return out
    if kind == "op_repmat":
        return np.tile(a, (node.aux[0], node.aux[1]))
    if kind in REDUCE_DIM_KINDS:
        return _oracle_rdim(kind, a, node.aux[0], dt)
    if kind == "glue_times":
        b = _oracle(node.operands[1])
        return np.dot(a, b)
    if kind == "glue_join_rows":
        b = _oracle(node.operands[1])
        return np.hstack([a, b])
    if kind == "glue_join_cols":
        b = _oracle(node.operands[1])
        return np.vstack([a, b])
    raise ValueError(f"oracle: unknown node kind {kind!r}")


def _oracle_region(parent: np.ndarray, region: tuple) -> np.ndarray:
    kind = region[0]
    if kind == "diag":
        return np.diagonal(parent, offset=region[1]).reshape(-1, 1)
    if kind == "row":
        return parent[region[1]:region[1] + 1, :]
    if kind == "col":
        return parent[:, region[1]:region[1] + 1]
    if kind == "rows":
        return parent[region[1]:region[2] + 1, :]
    if kind == "cols":
        return parent[:, region[1]:region[2] + 1]
    if kind == "submat":
        p, q, r, s = region[1:]
        return parent[p:r + 1, q:s + 1]
    raise ValueError(kind)


def _trunc_to(x: np.ndarray, dt) -> np.ndarray:
    if x.dtype == dt:
        return x
    with np.errstate(invalid="ignore", over="ignore"):
        return x.astype(dt)


def _oracle_int_div(a, b, dt):
    # trunc-toward-zero division, matching the device convention
    if dt.kind == "u":
        return np.floor_divide(a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.trunc(np.asarray(a, dtype=np.float64) / np.asarray(b, dtype=np.float64))


def _oracle_unary(kind: str, a: np.ndarray, aux: tuple, dt) -> np.ndarray:
    fns = {
        "eop_exp": np.exp, "eop_log": np.log, "eop_log10": np.log10,
        "eop_sqrt": np.sqrt, "eop_square": np.square, "eop_abs": np.abs,
        "eop_cos": np.cos, "eop_sin": np.sin, "eop_tan": np.tan,
        "eop_acos": np.arccos, "eop_asin": np.arcsin, "eop_atan": np.arctan,
    }
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        if kind == "eop_pow":
            return _trunc_to(np.power(a, dt.type(aux[0]) if dt.kind in "iu" else aux[0]), dt)
        return _trunc_to(fns[kind](a), dt)


def _oracle_scalar(kind: str, a: np.ndarray, k, dt) -> np.ndarray:
    kv = dt.type(int(k)) if dt.kind in "iu" else dt.type(k)
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        if kind == "eop_scalar_plus":
            r = a + kv
        elif kind == "eop_scalar_minus_pre":
            r = kv - a
        elif kind == "eop_scalar_minus_post":
            r = a - kv
        elif kind == "eop_scalar_times":
            r = a * kv
        elif kind == "eop_scalar_div_pre":
            r = _oracle_int_div(kv, a, dt) if dt.kind in "iu" else kv / a
        else:
            r = _oracle_int_div(a, kv, dt) if dt.kind in "iu" else a / kv
    return _trunc_to(r, dt)


def _oracle_glue(kind: str, a: np.ndarray, b: np.ndarray, dt) -> np.ndarray:
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        if kind == "eglue_plus":
            r = a + b
        elif kind == "eglue_minus":
            r = a - b
        elif kind == "eglue_schur":
            r = a * b
        else:
            r = _oracle_int_div(a, b, dt) if dt.kind in "iu" else a / b
    return _trunc_to(r, dt)


def _oracle_rdim(kind: str, a: np.ndarray, dim: int, dt) -> np.ndarray:
    axis = 0 if dim == 0 else 1
    if kind == "op_sum_dim":
        r = a.sum(axis=axis, dtype=dt)
    elif kind == "op_min_dim":
        r = a.min(axis=axis)
    elif kind == "op_max_dim":
        r = a.max(axis=axis)
    elif kind == "op_mean_dim":
        r = _trunc_to(a.sum(axis=axis, dtype=dt) / a.shape[axis], dt)
    else:
        extent = a.shape[axis]
        if extent < 2:
            r = np.zeros(a.shape[1 - axis], dtype=dt)
        else:
            mean = a.astype(np.float64).mean(axis=axis, keepdims=True)
            d = a.astype(np.float64) - mean
            r = _trunc_to((d * d).sum(axis=axis) / (extent - 1), dt)
        if kind == "op_stddev_dim":
            r = _trunc_to(np.sqrt(r.astype(np.float64)), dt)
    r = np.asarray(r, dtype=dt)
    return r.reshape((1, -1)) if dim == 0 else r.reshape((-1, 1))
