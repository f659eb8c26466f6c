"""Kernel fusion: element-wise chains and dtype conversions share one launch.

Every element-wise kernel, generator, and data-movement kernel has a
"two-way" variant whose output element type differs from its input, so a
conversion wrapped around such an operation costs nothing extra.
"""

import devmat as dm

dm.init("reference")
dm.set_seed(1)

A = dm.Matrix(256, 256, fill="randu")
B = dm.Matrix(256, 256, fill="randu")

# an arbitrary chain of element-wise operations is a single kernel
dm.synchronise()
before = dm.counters()
C = dm.evaluate(4 * A + B - 2)
dm.synchronise()
print("4*A + B - 2        ->", (dm.counters() - before).launches, "launch(es)")

# conversion fused into the producing kernel
I = dm.Matrix(3, 3, fill="ones", elem_type="i32")
node = dm.conv_to(dm.resize(I, 5, 6), "f32")

before = dm.counters()
dm.evaluate(node)
dm.synchronise()
fused = dm.counters() - before

before = dm.counters()
dm.evaluate(node, fuse=False)  # the deliberately-unfused baseline
dm.synchronise()
unfused = dm.counters() - before

print(f"conv_to(resize(.)) -> fused {fused.launches} launch(es), "
      f"unfused {unfused.launches} launch(es)")

# a matrix product is never fused across; its element-wise operands are
before = dm.counters()
dm.evaluate((2 * A + 1) @ (3 * B - 1))
dm.synchronise()
print("(2A+1) @ (3B-1)    ->", (dm.counters() - before).launches,
      "launches (two fused operands + one product)")

dm.shutdown()
