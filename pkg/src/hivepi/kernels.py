"""Kernel backend selection.

The compiled ``_ckernel`` is used when importable; set ``HIVEPI_KERNEL=python``
to force the numpy fallback. Both expose ``forward`` and ``backward`` with
identical contracts.
"""

from __future__ import annotations

import os

from . import _pykernel

python = _pykernel

try:
    from . import _ckernel as compiled
except ImportError:  # extension not built
    compiled = None

if os.environ.get("HIVEPI_KERNEL", "").lower() == "python" or compiled is None:
    active = _pykernel
    BACKEND = "python"
else:
    active = compiled
    BACKEND = "compiled"


def get(name: str | None = None):
    """Return a kernel module by name (``compiled``/``python``) or the active one."""
    if name is None:
        return active
    if name == "python":
        return _pykernel
    if name == "compiled":
        if compiled is None:
            raise ImportError("compiled kernel is not built")
        return compiled
    raise ValueError(f"unknown kernel backend {name!r}")
