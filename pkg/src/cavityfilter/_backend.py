"""Stepping-kernel backend selection.

The compiled extension is preferred when importable; the pure numpy kernels
are the fallback. CAVITYFILTER_BACKEND=python or =compiled forces the choice
(forcing compiled raises if the extension is missing). Both backends share
one calling contract, defined in _core_py.
"""

import os

from . import _core_py

_FORCED = os.environ.get("CAVITYFILTER_BACKEND", "").strip().lower()

if _FORCED == "python":
    _kernels = _core_py
elif _FORCED == "compiled":
    from . import _core as _kernels
elif _FORCED == "":
    try:
        from . import _core as _kernels
    except ImportError:
        _kernels = _core_py
else:
    raise RuntimeError(
        f"CAVITYFILTER_BACKEND={_FORCED!r} not understood; use 'python' or 'compiled'"
    )

sme_run = _kernels.sme_run
qekf_run = _kernels.qekf_run


def backend_name():
    """Name of the active kernel backend, 'compiled' or 'python'."""
    return _kernels.BACKEND_KIND


def get_backend(kind):
    """Fetch a specific kernel module by name, for benchmarks and tests."""
    if kind == "python":
        return _core_py
    if kind == "compiled":
        from . import _core
        return _core
    raise ValueError(f"unknown backend kind {kind!r}")
