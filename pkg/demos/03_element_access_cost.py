"""Why element loops hurt: every single read crosses the device boundary.

Counting elements above a threshold one read at a time pays one
device-to-host transfer per element.  The find() rewrite answers the same
question with two kernel launches and a single scalar transfer, which is
also why matrices deliberately refuse to iterate.
"""

import time

import devmat as dm

dm.init("reference")
dm.set_seed(3)

A = dm.Matrix(1000, 100, fill="randu")
dm.synchronise()

before = dm.counters()
t0 = time.perf_counter()
slow_count = 0
for i in range(A.n_elem):
    if A[i] > 0.3:
        slow_count += 1
slow_time = time.perf_counter() - t0
slow = dm.counters() - before

before = dm.counters()
t0 = time.perf_counter()
fast_count = dm.find(A > 0.3).n_rows
fast_time = time.perf_counter() - t0
fast = dm.counters() - before

print(f"element loop: count={slow_count}  transfers={slow.transfers_d2h}  "
      f"time={slow_time * 1e3:.1f} ms")
print(f"find rewrite: count={fast_count}  transfers={fast.transfers_d2h}  "
      f"time={fast_time * 1e3:.1f} ms")

try:
    for _ in A:
        pass
except TypeError as exc:
    print(f"\niteration is refused on purpose: {exc}")

dm.shutdown()
