"""Kernel selection: the compiled extension when importable, numpy otherwise.

Set ``BILAB_KERNELS=numpy`` to force the fallback.
"""

from __future__ import annotations

import os

from bilab import _kernels_py

_impl = _kernels_py
if os.environ.get("BILAB_KERNELS", "").lower() != "numpy":
    try:
        from bilab import _ckernels as _impl  # type: ignore[no-redef]
    except ImportError:  # extension not built
        _impl = _kernels_py

BACKEND: str = _impl.NAME

gradient = _impl.gradient
divergence = _impl.divergence
prox_slope = _impl.prox_slope
prox_radial = _impl.prox_radial
dual_prox = _impl.dual_prox
energy_density = _impl.energy_density
lagrangian = _impl.lagrangian


def backends() -> dict:
    """Every importable implementation, by name."""
    out = {"numpy": _kernels_py}
    try:
        from bilab import _ckernels

        out["cython"] = _ckernels
    except ImportError:
        pass
    return out
