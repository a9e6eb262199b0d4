"""Desk-scale masked latent pre-training with discriminative neighbor targets."""

import os

# Cap BLAS parallelism before numpy is first imported so matmul reductions
# keep a fixed, reproducible order. Must run before any submodule import.
_threads = os.environ.get("DMT_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)
del os, _threads

from . import tensor  # noqa: E402

__version__ = "0.1.0"
