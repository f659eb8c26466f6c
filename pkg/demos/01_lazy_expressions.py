"""Delayed evaluation: expressions are data structures until you ask for values.

Watch the instrumentation counters: assembling a compound expression does no
device work at all; every kernel launch happens at evaluation time.
"""

import devmat as dm

dm.init("parallel", print_info=True)
dm.set_seed(42)

X = dm.Matrix(1000, 1000, fill="randu")
Y = dm.Matrix(1000, 2000, fill="randu")
dm.synchronise()

before = dm.counters()
Z_expr = (X + dm.eye(1000, 1000)).t() @ (Y + 2)
built = dm.counters() - before
print(f"after building:   launches={built.launches}  buffers={built.buffers_acquired}")
print(f"expression value: {Z_expr!r}")

Z = Z_expr.eval()
dm.synchronise()
evaluated = dm.counters() - before
print(f"after evaluating: launches={evaluated.launches}  "
      f"buffers={evaluated.buffers_acquired}")
print(f"result: {Z!r}")

# the planner's schedule is inspectable
plan = dm.plan(Z_expr)
print(f"\nplanned invocations ({plan.n_invocations}):")
for step in plan.steps:
    print(f"  {step.kernel}")

# rewrites happen while the expression is constructed: transposing a
# diagonal matrix (or transposing twice) never creates a transpose node
V = dm.Col(5, fill="randu")
print("\nnode census of trans(diagmat(V)):", dm.census(dm.trans(dm.diagmat(V))))
print("node census of trans(trans(X)):  ", dm.census(dm.trans(dm.trans(X))))

dm.shutdown()
