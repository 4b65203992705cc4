"""Backend selection for the gain kernels.

The compiled extension is used when it was built; otherwise, or when the
environment variable ``ENDKF_PURE_PYTHON`` is set to a non-empty value other
than ``0``, the numpy implementation is used.  Both expose the same two
functions and agree to rounding error.
"""
from __future__ import annotations

import os

import numpy as np

from . import _kernels_py
from .manifold import AntipodalError, ManifoldError

_force_py = os.environ.get("ENDKF_PURE_PYTHON", "") not in ("", "0")

if _force_py:
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"


def _prep(G, prior, innov):
    return (
        np.ascontiguousarray(G, dtype=float),
        np.ascontiguousarray(prior, dtype=float),
        np.ascontiguousarray(innov, dtype=float),
    )


def log_map(base, target, layout, backend=None):
    """Blockwise log map of ensembles; raises on antipodal sphere pairs."""
    impl = _module(backend)
    base = np.ascontiguousarray(base, dtype=float)
    target = np.ascontiguousarray(target, dtype=float)
    if base.shape != target.shape or base.ndim != 2 or base.shape[1] != layout.dim:
        raise ManifoldError(f"log_map shapes {base.shape} and {target.shape} do not match layout {layout.dim}")
    out, antipodal = impl.log_map(base, target, *layout.arrays())
    if antipodal:
        raise AntipodalError("sphere_log of (nearly) antipodal points")
    return out


def apply_gain(G, prior, innov, layout, backend=None):
    impl = _module(backend)
    G, prior, innov = _prep(G, prior, innov)
    return impl.apply_gain(G, prior, innov, *layout.arrays())


def objective_grad(G, prior, innov, layout, weights=None, want_grad=True, backend=None):
    impl = _module(backend)
    G, prior, innov = _prep(G, prior, innov)
    w = np.ones(len(layout)) if weights is None else np.ascontiguousarray(weights, dtype=float)
    return impl.objective_grad(G, prior, innov, *layout.arrays(), w, want_grad)


def _module(backend):
    if backend is None:
        return _impl
    if backend == "python":
        return _kernels_py
    if backend == "cython":
        from . import _kernels  # type: ignore[attr-defined]

        return _kernels
    raise ValueError(f"unknown kernel backend {backend!r}")


def available_backends() -> list[str]:
    out = ["python"]
    try:
        from . import _kernels  # type: ignore[attr-defined]  # noqa: F401

        out.append("cython")
    except ImportError:
        pass
    return out
