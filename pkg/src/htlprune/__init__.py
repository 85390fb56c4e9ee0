"""Pruning-assisted mining of hard-to-learn samples for lesion localization."""
import os as _os

_threads = _os.environ.get("HTLPRUNE_THREADS")
if _threads:
    # must run before numpy loads its BLAS
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"
