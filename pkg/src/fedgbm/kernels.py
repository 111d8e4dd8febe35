"""Kernel selection.

The compiled extension is used when it imports; ``FEDGBM_PURE_PYTHON=1``
forces the pure-Python implementation.
"""
import logging
import os

from fedgbm import _pykernels

log = logging.getLogger(__name__)

_impl = _pykernels
if not os.environ.get("FEDGBM_PURE_PYTHON"):
    try:
        from fedgbm import _ckernels as _impl  # type: ignore[no-redef]
    except ImportError:  # pragma: no cover - depends on build
        log.debug("compiled kernels unavailable, using pure-Python fallback")

BACKEND = _impl.NAME
histograms = _impl.histograms
cipher_bin_sums = _impl.cipher_bin_sums
ObfuscatedEncryptor = _impl.ObfuscatedEncryptor


def available():
    """Names of the kernel implementations importable in this environment."""
    names = ["python"]
    try:
        from fedgbm import _ckernels  # noqa: F401
        names.append("cython")
    except ImportError:  # pragma: no cover
        pass
    return names


def implementation(name):
    if name == "python":
        return _pykernels
    if name == "cython":
        from fedgbm import _ckernels
        return _ckernels
    raise ValueError(f"unknown kernel implementation {name!r}")
