"""Kernel backend selection.

The compiled extension ``spikeforge._core`` is used when it imports; the
numpy fallback in ``spikeforge._pure`` otherwise. Setting the environment
variable ``SPIKEFORGE_BACKEND=python`` forces the fallback.
"""
import logging
import os

from spikeforge import _pure

log = logging.getLogger(__name__)

KERNEL_NAMES = (
    "conv2d_forward",
    "conv2d_backward",
    "avg_pool_forward",
    "avg_pool_backward",
    "dense_propagate",
    "integrate_fire",
    "stdp_apply",
    "stdp_layer_run",
)


def _load_compiled():
    try:
        from spikeforge import _core
    except ImportError as exc:
        log.debug("compiled kernels unavailable: %s", exc)
        return None
    return _core


_compiled = None if os.environ.get("SPIKEFORGE_BACKEND", "").lower() == "python" else _load_compiled()

BACKEND = "cython" if _compiled is not None else "python"
kernels = _compiled if _compiled is not None else _pure


def get_kernels(name=None):
    """Return the kernel module for ``name`` ("cython" or "python"), or the active one."""
    if name is None:
        return kernels
    if name == "python":
        return _pure
    if name == "cython":
        mod = _load_compiled()
        if mod is None:
            raise ImportError("spikeforge._core is not built; run `pip install -e . --no-build-isolation`")
        return mod
    raise ValueError(f"unknown backend {name!r}")


def compiled_available():
    return _load_compiled() is not None
