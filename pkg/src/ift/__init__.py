"""Image fusion transformer for ghost-free multi-exposure HDR imaging."""

import os

# BLAS threads default to 1 so reductions have a fixed order; IFT_THREADS overrides.
_threads = os.environ.get("IFT_THREADS", "1")
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"
