"""Select the compiled kernel module when available, else the numpy fallback.

Set ``CONCENTRA_PURE=1`` to force the fallback (used by the benchmark and by
the tests that compare both paths).
"""
import os

from . import _kernels_py as pure

compiled = None
if os.environ.get("CONCENTRA_PURE", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as compiled
    except ImportError:  # extension not built
        compiled = None

active = compiled if compiled is not None else pure
BACKEND = "compiled" if compiled is not None else "python"


def use(backend: str):
    """Switch the active backend at runtime ('compiled' or 'python')."""
    global active, BACKEND
    if backend == "compiled":
        if compiled is None:
            raise ImportError("compiled kernels are not built")
        active, BACKEND = compiled, "compiled"
    elif backend == "python":
        active, BACKEND = pure, "python"
    else:
        raise ValueError(f"unknown backend {backend!r}")
