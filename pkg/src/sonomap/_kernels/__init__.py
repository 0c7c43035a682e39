"""Backend dispatch for the hot numeric kernels.

The env var SONOMAP_BACKEND selects the implementation at import time:
"numba" (default when numba imports cleanly) or "numpy" (pure-numpy
reference path). Both expose the same functions with identical semantics.
"""

from __future__ import annotations

import os

# default threading layer priority: omp then workqueue (TBB here is too old)
os.environ.setdefault("NUMBA_THREADING_LAYER_PRIORITY", "omp workqueue tbb")

_requested = os.environ.get("SONOMAP_BACKEND", "auto").strip().lower()

if _requested in ("", "auto"):
    try:
        from . import numba_impl as impl
    except ImportError:  # numba unavailable: fall back silently
        from . import numpy_impl as impl
elif _requested == "numba":
    from . import numba_impl as impl
elif _requested == "numpy":
    from . import numpy_impl as impl
else:
    raise RuntimeError(
        f"SONOMAP_BACKEND={_requested!r} is not a backend (use 'numba' or 'numpy')"
    )

BACKEND = impl.BACKEND_NAME

encode_fwd = impl.encode_fwd
encode_bwd_tables = impl.encode_bwd_tables
encode_bwd_points = impl.encode_bwd_points
volume_sample = impl.volume_sample
value_noise = impl.value_noise
set_num_threads = impl.set_num_threads
