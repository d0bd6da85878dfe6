"""Map-aided visual-inertial sliding-window filter and evaluation harness."""

import os

# The filter works on many small (~150x150) matrices; multithreaded BLAS
# loses badly to synchronization overhead there, especially under container
# CPU quotas.  Pin the pools before the first large numpy operation.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

try:
    import threadpoolctl as _threadpoolctl

    _threadpoolctl.threadpool_limits(limits=1, user_api="blas")
except Exception:  # pragma: no cover - env vars above still apply
    pass

__version__ = "0.1.0"
