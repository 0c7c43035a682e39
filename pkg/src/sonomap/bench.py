"""Rendering benchmarks: direct per-pixel decoding vs ray-march baseline,
and (when both are importable) the numba vs numpy kernel backends."""

from __future__ import annotations

import time

import numpy as np

from .field import ImpedanceField
from .geometry import Pose, ProbeGeometry
from .phantom import gen_trajectory


def _time_renders(render_fn, poses) -> float:
    """Mean wall-clock ms per image."""
    t0 = time.perf_counter()
    for pose in poses:
        render_fn(pose)
    return (time.perf_counter() - t0) / len(poses) * 1000.0


def bench_renderers(field: ImpedanceField, geom: ProbeGeometry, poses, k: int = 64):
    """Returns dict with direct/ray-march mean ms and the speedup ratio."""
    field.render_image(poses[0], geom)  # warm-up (JIT compilation, caches)
    field.render_image_raymarch(poses[0], geom, k=k)
    direct_ms = _time_renders(lambda p: field.render_image(p, geom), poses)
    march_ms = _time_renders(lambda p: field.render_image_raymarch(p, geom, k=k), poses)
    return {
        "images": len(poses),
        "k": k,
        "direct_ms": direct_ms,
        "raymarch_ms": march_ms,
        "speedup": march_ms / direct_ms if direct_ms > 0 else float("inf"),
    }


def bench_backends(field: ImpedanceField, geom: ProbeGeometry, poses):
    """Direct-render timing of each kernel backend on the same field."""
    from . import _kernels as K
    from ._kernels import numpy_impl

    results = {}
    try:
        from ._kernels import numba_impl
        impls = [numba_impl, numpy_impl]
    except ImportError:
        impls = [numpy_impl]
    active = K.encode_fwd
    try:
        for impl in impls:
            K.encode_fwd = impl.encode_fwd
            field.render_image(poses[0], geom)  # warm-up
            results[impl.BACKEND_NAME + "_ms"] = _time_renders(
                lambda p: field.render_image(p, geom), poses
            )
    finally:
        K.encode_fwd = active
    return results


def default_bench_poses(n_images: int):
    return gen_trajectory("circular", count=max(1, n_images))
