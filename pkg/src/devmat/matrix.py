"""Device-resident dense matrices and vectors.

``Matrix`` stores its elements in device memory (column-major) and holds only
an opaque buffer handle; all touches of the data go through the runtime.
Reading or writing a single element therefore costs one host/device transfer
and drains the command queue first; bulk expressions are the intended way
to work.  For the same reason matrices are **not iterable**.

``HostMatrix`` is the host-resident counterpart used by ``conv_to`` for
explicit transfers in and out of device memory.
"""

from __future__ import annotations

import sys
import weakref

import numpy as np

from . import expr as _expr
from . import runtime as _rt
from .errors import BoundsError, DimensionError, ElemTypeError
from .expr import ExpressionOps, ExprNode, build_node, evaluate, shape_of
from .kernels import ELEM_TYPES, NP_DTYPE
from .runtime import FlatView, KernelInvocation

FILL_KINDS = ("none", "zeros", "ones", "eye", "randu", "randn")


def _finalise(gen: int, buf) -> None:
    _rt.release_if_current(gen, buf)


class Matrix(ExpressionOps):
    """Dense matrix in device memory (the base container).

    Matrix(rows, cols, fill="none", elem_type="f32") acquires a device
    buffer and, for any fill other than "none", launches one generator
    kernel to populate it.
    """

    __slots__ = ("n_rows", "n_cols", "elem_type", "mem", "_fin", "__weakref__")

    def __init__(self, rows: int = 0, cols: int = 0, fill: str = "none",
                 elem_type: str = "f32"):
        if elem_type not in ELEM_TYPES:
            raise ElemTypeError(f"unknown element type {elem_type!r}")
        if rows < 0 or cols < 0:
            raise DimensionError("construct", (rows, cols))
        if fill not in FILL_KINDS:
            raise ValueError(f"unknown fill kind {fill!r}; one of {FILL_KINDS}")
        rt = _rt.get_runtime()
        self.n_rows = rows
        self.n_cols = cols
        self.elem_type = elem_type
        self.mem = rt.acquire_memory(rows * cols, elem_type)
        self._fin = weakref.finalize(self, _finalise, _rt.generation(), self.mem)
        if fill != "none":
            self._run_fill(fill)

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _uninitialised(cls, rows: int, cols: int, elem_type: str) -> "Matrix":
        return cls(rows, cols, "none", elem_type)

    @classmethod
    def _adopt(cls, buf, rows: int, cols: int, elem_type: str) -> "Matrix":
        m = cls.__new__(cls)
        m.n_rows = rows
        m.n_cols = cols
        m.elem_type = elem_type
        m.mem = buf
        m._fin = weakref.finalize(m, _finalise, _rt.generation(), buf)
        return m

    @classmethod
    def from_host(cls, host: "HostMatrix") -> "Matrix":
        m = cls._uninitialised(host.n_rows, host.n_cols, host.elem_type)
        if host.n_elem:
            _rt.get_runtime().copy_h2d(host.data, m.mem)
        return m

    @classmethod
    def from_numpy(cls, array, elem_type: str | None = None) -> "Matrix":
        return cls.from_host(HostMatrix.from_numpy(array, elem_type))

    # -- internal plumbing ------------------------------------------------------

    def _as_expr_node(self) -> ExprNode:
        return ExprNode("leaf", (self,), (), self.elem_type)

    def _release_storage(self) -> None:
        self._fin.detach()
        _rt.get_runtime().release_deferred(self.mem)

    def _check_dims(self, rows: int, cols: int) -> None:
        pass  # vector subclasses pin one dimension

    def _adopt_buffer(self, buf, rows: int, cols: int) -> None:
        self._check_dims(rows, cols)
        self._release_storage()
        self.mem = buf
        self.n_rows = rows
        self.n_cols = cols
        self._fin = weakref.finalize(self, _finalise, _rt.generation(), buf)

    def _reshape_storage(self, rows: int, cols: int) -> None:
        self._check_dims(rows, cols)
        # reallocates only when the element count changes
        if rows * cols != self.n_elem:
            buf = _rt.get_runtime().acquire_memory(rows * cols, self.elem_type)
            self._adopt_buffer(buf, rows, cols)
        else:
            self.n_rows = rows
            self.n_cols = cols

    def _run_fill(self, fill: str, k=None) -> None:
        rt = _rt.get_runtime()
        out = FlatView(self.mem, 0, self.n_elem)
        params: dict = {"gen_type": self.elem_type}
        if fill == "zeros":
            inv = KernelInvocation("gen_fill_const", (), out, (0,), params)
        elif fill == "ones":
            inv = KernelInvocation("gen_fill_const", (), out, (1,), params)
        elif fill == "fill":
            inv = KernelInvocation("gen_fill_const", (), out, (k,), params)
        elif fill == "eye":
            params["rows"] = self.n_rows
            inv = KernelInvocation("gen_eye", (), out, (), params)
        elif fill in ("randu", "randn"):
            params["seed"] = rt.seed
            params["stream"] = rt.next_stream_id()
            inv = KernelInvocation("gen_" + fill, (), out, (), params)
        else:
            raise ValueError(fill)
        rt.enqueue(inv)

    # -- shape metadata ----------------------------------------------------------

    @property
    def n_elem(self) -> int:
        return self.n_rows * self.n_cols

    def is_empty(self) -> bool:
        return self.n_elem == 0

    def is_square(self) -> bool:
        return self.n_rows == self.n_cols

    def is_vec(self) -> bool:
        return self.n_rows == 1 or self.n_cols == 1

    def get_dev_mem(self):
        """The opaque device buffer handle (no transfer, no copy)."""
        return self.mem

    # -- element access (each access is one host/device transfer) ----------------

    def _linear_index(self, key) -> int:
        if isinstance(key, tuple):
            r, c = key
            if not (0 <= r < self.n_rows and 0 <= c < self.n_cols):
                raise BoundsError(
                    f"element ({r}, {c}) out of bounds for "
                    f"{self.n_rows}x{self.n_cols} matrix")
            return r + c * self.n_rows
        i = key
        if not 0 <= i < self.n_elem:
            raise BoundsError(f"element {i} out of bounds for n_elem={self.n_elem}")
        return i

    def __getitem__(self, key):
        value = _rt.get_runtime().read_scalar(self.mem, self._linear_index(key))
        return value.item()

    def __setitem__(self, key, value) -> None:
        _rt.get_runtime().write_scalar(self.mem, self._linear_index(key), value)

    def at(self, r: int, c: int | None = None):
        """Unchecked element read (linear or (row, col)): skips the bounds test."""
        i = r if c is None else r + c * self.n_rows
        return _rt.get_runtime().read_scalar(self.mem, i).item()

    def __iter__(self):
        raise TypeError(
            "element iteration over device matrices is not provided; "
            "use expressions, find(), or conv_to the host")

    def __len__(self):
        return self.n_elem

    def __bool__(self):
        raise TypeError("truth value of a matrix is ambiguous; use all()/any()")

    # -- mutation ------------------------------------------------------------------

    def assign(self, other) -> "Matrix":
        """Evaluate an expression (or copy a matrix) into this matrix."""
        return evaluate(other, out=self)

    def __iadd__(self, other):
        return evaluate(self + other, out=self)

    def __isub__(self, other):
        return evaluate(self - other, out=self)

    def __imul__(self, other):
        return evaluate(self * other, out=self)

    def __itruediv__(self, other):
        return evaluate(self / other, out=self)

    def set_size(self, rows: int, cols: int | None = None) -> "Matrix":
        """Set dimensions without preserving data."""
        if cols is None:
            rows, cols = self._vector_dims(rows)
        self._reshape_storage(rows, cols)
        return self

    def reshape(self, rows: int, cols: int) -> "Matrix":
        """Set dimensions, preserving the column-major element sequence
        (truncating or zero-padding when the element count changes)."""
        node = build_node("op_reshape", (self._as_expr_node(),), (rows, cols))
        result = evaluate(node)
        self._adopt_buffer(result.mem, rows, cols)
        result._fin.detach()
        return self

    def reset(self) -> "Matrix":
        self._reshape_storage(0, 0)
        return self

    def fill(self, value) -> "Matrix":
        self._run_fill("fill", value)
        return self

    def _refill(self, kind: str, rows: int | None, cols: int | None) -> "Matrix":
        if rows is not None:
            if cols is None:
                rows, cols = self._vector_dims(rows)
            self._reshape_storage(rows, cols)
        self._run_fill(kind)
        return self

    def zeros(self, rows: int | None = None, cols: int | None = None) -> "Matrix":
        return self._refill("zeros", rows, cols)

    def ones(self, rows: int | None = None, cols: int | None = None) -> "Matrix":
        return self._refill("ones", rows, cols)

    def eye(self, rows: int | None = None, cols: int | None = None) -> "Matrix":
        return self._refill("eye", rows, cols)

    def randu(self, rows: int | None = None, cols: int | None = None) -> "Matrix":
        return self._refill("randu", rows, cols)

    def randn(self, rows: int | None = None, cols: int | None = None) -> "Matrix":
        return self._refill("randn", rows, cols)

    @staticmethod
    def _vector_dims(n: int) -> tuple[int, int]:
        return n, 1

    # -- transpose and views ----------------------------------------------------------

    def t(self) -> ExprNode:
        return _expr.rewrite_trans(self._as_expr_node())

    def diag(self, k: int = 0) -> "Subview":
        length = _expr._diag_length(self.n_rows, self.n_cols, k)
        if length <= 0:
            raise BoundsError(f"diagonal {k} outside {self.n_rows}x{self.n_cols}")
        return Subview(self, ("diag", k))

    def row(self, i: int) -> "Subview":
        if not 0 <= i < self.n_rows:
            raise BoundsError(f"row {i} out of range")
        return Subview(self, ("row", i))

    def col(self, j: int) -> "Subview":
        if not 0 <= j < self.n_cols:
            raise BoundsError(f"col {j} out of range")
        return Subview(self, ("col", j))

    def rows(self, a: int, b: int) -> "Subview":
        if not (0 <= a <= b < self.n_rows):
            raise BoundsError(f"row span {a}..{b} out of range")
        return Subview(self, ("rows", a, b))

    def cols(self, c: int, d: int) -> "Subview":
        if not (0 <= c <= d < self.n_cols):
            raise BoundsError(f"col span {c}..{d} out of range")
        return Subview(self, ("cols", c, d))

    def submat(self, p: int, q: int, r: int, s: int) -> "Subview":
        if not (0 <= p <= r < self.n_rows and 0 <= q <= s < self.n_cols):
            raise BoundsError(f"submat ({p},{q})..({r},{s}) out of range")
        return Subview(self, ("submat", p, q, r, s))

    # -- output -------------------------------------------------------------------------

    def to_string(self, header: str | None = None) -> str:
        host = to_host(self)
        a = host.to_numpy()
        lines = [] if header is None else [header]
        for r in range(self.n_rows):
            lines.append(" ".join(f"{a[r, c]:g}" for c in range(self.n_cols)))
        return "\n".join(lines) + "\n"

    def print(self, header: str | None = None) -> str:
        text = self.to_string(header)
        sys.stdout.write(text)
        return text

    def to_numpy(self):
        return to_host(self).to_numpy()

    def eval(self, elem_type: str | None = None) -> "Matrix":
        if elem_type is None or elem_type == self.elem_type:
            return evaluate(self._as_expr_node())
        return evaluate(_expr.conv_node(self._as_expr_node(), elem_type))

    def __repr__(self):
        return (f"{type(self).__name__}({self.n_rows}x{self.n_cols}, "
                f"{self.elem_type}, buffer #{self.mem.buffer_id})")


class Col(Matrix):
    """Column vector: n_cols is pinned to 1."""

    def __init__(self, n: int = 0, fill: str = "none", elem_type: str = "f32"):
        super().__init__(n, 1 if n else 0, fill, elem_type)

    def _check_dims(self, rows: int, cols: int) -> None:
        if cols > 1:
            raise DimensionError("col-vector", (rows, cols))

    @staticmethod
    def _vector_dims(n: int) -> tuple[int, int]:
        return n, 1


class Row(Matrix):
    """Row vector: n_rows is pinned to 1."""

    def __init__(self, n: int = 0, fill: str = "none", elem_type: str = "f32"):
        super().__init__(1 if n else 0, n, fill, elem_type)

    def _check_dims(self, rows: int, cols: int) -> None:
        if rows > 1:
            raise DimensionError("row-vector", (rows, cols))

    @staticmethod
    def _vector_dims(n: int) -> tuple[int, int]:
        return 1, n


class Subview(ExpressionOps):
    """A rectangular or diagonal window into a parent matrix.

    Reading (using the subview in an expression) materializes the region
    with one strided extraction kernel; ``assign`` scatters an evaluated
    expression back with one strided insertion kernel.
    """

    def __init__(self, parent: Matrix, region: tuple):
        self.parent = parent
        self.region = region

    @property
    def shape(self):
        return _expr._region_shape(
            _expr.Shape(self.parent.n_rows, self.parent.n_cols), self.region)

    @property
    def elem_type(self) -> str:
        return self.parent.elem_type

    def _as_expr_node(self) -> ExprNode:
        return build_node("subview", (self.parent._as_expr_node(),),
                          (self.region,), self.parent.elem_type)

    def eval(self) -> Matrix:
        return evaluate(self._as_expr_node())

    def assign(self, other) -> None:
        value = _expr.as_expr(other)
        shape = self.shape
        vs = shape_of(value)
        if (vs.rows, vs.cols) != (shape.rows, shape.cols):
            raise DimensionError("subview-assign", (shape.rows, shape.cols),
                                 (vs.rows, vs.cols))
        if value.elem_type != self.elem_type:
            raise ElemTypeError("subview-assign: element types differ")
        rt = _rt.get_runtime()
        tmp = evaluate(value)
        mode = _expr._region_view_mode(self.parent, self.region)
        out_view = _expr._make_view(self.parent.mem, 0, 0, mode)
        rt.enqueue(KernelInvocation(
            "mov_insert_strided",
            (FlatView(tmp.mem, 0, shape.rows * shape.cols),),
            out_view))
        tmp._release_storage()

    def __repr__(self):
        return f"Subview({self.parent!r}, {self.region})"


class HostMatrix:
    """Host-resident column-major matrix (the CPU-side conversion target)."""

    def __init__(self, n_rows: int, n_cols: int, elem_type: str, data):
        if elem_type not in ELEM_TYPES:
            raise ElemTypeError(f"unknown element type {elem_type!r}")
        self.n_rows = n_rows
        self.n_cols = n_cols
        self.elem_type = elem_type
        self.data = np.asarray(data, dtype=NP_DTYPE[elem_type]).reshape(-1)
        if self.data.shape[0] != n_rows * n_cols:
            raise DimensionError("host-matrix", (n_rows, n_cols))

    @property
    def n_elem(self) -> int:
        return self.n_rows * self.n_cols

    @classmethod
    def from_numpy(cls, array, elem_type: str | None = None) -> "HostMatrix":
        a = np.asarray(array)
        if a.ndim == 1:
            a = a.reshape(-1, 1)
        if a.ndim != 2:
            raise DimensionError("host-matrix", a.shape[:2])
        if elem_type is None:
            elem_type = {
                "f": "f32" if a.dtype == np.float32 else "f64",
                "i": "i32", "u": "u64", "b": "i32",
            }[a.dtype.kind]
        flat = np.asfortranarray(a).reshape(-1, order="F")
        return cls(a.shape[0], a.shape[1], elem_type, flat)

    def to_numpy(self):
        return self.data.reshape((self.n_rows, self.n_cols), order="F")

    def __repr__(self):
        return f"HostMatrix({self.n_rows}x{self.n_cols}, {self.elem_type})"


# ---------------------------------------------------------------------------
# conversions

def to_host(x) -> HostMatrix:
    """Full device-to-host transfer (drains the queue; one bulk transfer)."""
    if isinstance(x, (ExprNode, Subview)):
        x = evaluate(_expr.as_expr(x))
    flat = _rt.get_runtime().copy_d2h(x.mem, 0, x.n_elem)
    return HostMatrix(x.n_rows, x.n_cols, x.elem_type, flat)


def to_device(host: HostMatrix, elem_type: str | None = None) -> Matrix:
    """Host-to-device transfer (one bulk transfer)."""
    m = Matrix.from_host(host)
    if elem_type is not None and elem_type != m.elem_type:
        return evaluate(_expr.conv_node(m._as_expr_node(), elem_type))
    return m


def conv_to(src, target):
    """Convert between residencies and element types.

    * ``conv_to(device_thing, "host")`` -> :class:`HostMatrix`
    * ``conv_to(host_matrix, "device")`` or an element type -> :class:`Matrix`
    * ``conv_to(device_thing, elem_type)`` -> lazy conversion node, fusable
      into the producing kernel as a two-way variant.
    """
    if isinstance(src, HostMatrix):
        if target == "device":
            return to_device(src)
        if target in ELEM_TYPES:
            return to_device(src, target)
        raise ValueError(f"bad conv_to target {target!r} for a host matrix")
    if target == "host":
        return to_host(src)
    if target in ELEM_TYPES:
        return _expr.conv_node(_expr.as_expr(src), target)
    raise ValueError(f"bad conv_to target {target!r}")
