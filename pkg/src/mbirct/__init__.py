"""Model-based iterative reconstruction for scientific CT."""
import os

# Allow explicit thread counts above the core count (used by the determinism checks).
os.environ.setdefault("NUMBA_NUM_THREADS", str(max(8, os.cpu_count() or 1)))
# OpenMP avoids numba probing (and warning about) an outdated TBB runtime.
os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

__version__ = "0.1.0"
