"""Runtime kernel compilation and the on-disk warm-start cache.

The first init against a device renders and hashes every kernel source
(a cold start) and records the hashes in kernels.manifest.  A second process
pointed at the same cache directory never compiles anything.
"""

import os
import subprocess
import sys
import tempfile

cache_dir = tempfile.mkdtemp(prefix="devmat-cache-")
os.environ["KERNEL_CACHE_DIR"] = cache_dir

import devmat as dm  # noqa: E402  (env var must be set before first init)

dm.init("reference")
cold = dm.counters()
print(f"cold start: compiles={cold.compiles} cache_hits={cold.cache_hits}", flush=True)
manifest = os.path.join(cache_dir, "kernels.manifest")
with open(manifest) as fh:
    lines = fh.readlines()
print(f"manifest: {len(lines)} entries, e.g. {lines[0].strip()!r}", flush=True)

probe = (
    "import devmat\n"
    "devmat.init('reference')\n"
    "c = devmat.counters()\n"
    "print(f'warm start: compiles={c.compiles} cache_hits={c.cache_hits}')\n"
)
subprocess.run([sys.executable, "-c", probe], check=True)

# a damaged manifest degrades to a cold start with a warning, never a crash
dm.shutdown()
with open(manifest, "w") as fh:
    fh.write("not\ta\tvalid\tcache")
import warnings  # noqa: E402

with warnings.catch_warnings(record=True) as caught:
    warnings.simplefilter("always")
    dm.init("reference")
print(f"after corruption: compiles={dm.counters().compiles}, "
      f"warning: {caught[0].message if caught else None}")
dm.shutdown()
