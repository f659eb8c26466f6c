"""devmat: lazily evaluated dense linear algebra on simulated accelerator devices.

Matrices live in (simulated) device memory; expressions build a typed DAG
with construction-time rewrites and evaluate through a planner that fuses
element-wise chains and dtype conversions into single kernel launches.  A
process-wide runtime owns the device queue, memory, instrumentation
counters, and an on-disk kernel cache.

Quick tour::

    import devmat as dm

    dm.init("parallel")              # or omit for automatic selection
    X = dm.Matrix(1000, 1000, fill="randu")
    Y = dm.Matrix(1000, 2000, fill="randu")
    Z = ((X + dm.eye(1000, 1000)).t() @ (Y + 2)).eval()
    count = dm.find(Z > 0.5).n_rows
"""

from .errors import (
    BackendError,
    BoundsError,
    BufferError_,
    DevmatError,
    DimensionError,
    ElemTypeError,
    KernelCacheWarning,
    NotPositiveDefiniteError,
    NotSymmetricError,
    PrecisionUnsupportedError,
    SingularMatrixError,
)
from .expr import (
    EvalPlan,
    ExprNode,
    Relational,
    Shape,
    build_node,
    census,
    evaluate,
    plan,
    rewrite_trans,
    shape_of,
    tree_walk_oracle,
)
from .linalg import (
    PermutationVector,
    as_scalar,
    chol,
    det,
    eig_sym,
    gemm,
    gemv,
    lu,
    lu_folded,
    norm,
    pinv,
    solve,
    svd,
    trace,
)
from .matrix import Col, HostMatrix, Matrix, Row, Subview, conv_to, to_device, to_host
from .ops import (
    absolute,
    accu,
    acos,
    all,
    any,
    asin,
    atan,
    cos,
    diagmat,
    diagvec,
    dot,
    exp,
    eye,
    find,
    join_cols,
    join_rows,
    linspace,
    log,
    log10,
    max,
    mean,
    min,
    ones,
    power,
    randn,
    randu,
    repmat,
    reshape,
    resize,
    sin,
    sqrt,
    square,
    stddev,
    sum,
    tan,
    trans,
    var,
    vectorise,
    zeros,
)
from .runtime import (
    Counters,
    DeviceBuffer,
    DeviceDescriptor,
    KernelInvocation,
    __version__,
    counters,
    init,
    is_initialised,
    set_seed,
    shutdown,
    synchronise,
    wall_clock,
)
