"""Kernel backend selection.

The compiled extension is used when it was built; otherwise the numpy
fallback is loaded. Set ``SORA_KERNELS=python`` to force the fallback or
``SORA_KERNELS=ext`` to fail loudly when the extension is missing.
"""
import os

_requested = os.environ.get("SORA_KERNELS", "auto").strip().lower()
if _requested not in ("auto", "ext", "python"):
    raise ImportError(f"SORA_KERNELS must be auto, ext or python, got {_requested!r}")

if _requested == "python":
    from . import _kernels_py as _impl
else:
    try:
        from . import _kernels as _impl
    except ImportError:
        if _requested == "ext":
            raise
        from . import _kernels_py as _impl

BACKEND = _impl.NAME

matmul = _impl.matmul
matmul_tn = _impl.matmul_tn
matmul_nt = _impl.matmul_nt
gated_forward = _impl.gated_forward
gated_backward = _impl.gated_backward
soft_threshold = _impl.soft_threshold
prox_step = _impl.prox_step


def available_backends():
    """Names of the kernel modules importable in this environment."""
    names = ["python"]
    try:
        from . import _kernels  # noqa: F401
    except ImportError:
        pass
    else:
        names.insert(0, "ext")
    return names


def load_backend(name):
    if name == "python":
        from . import _kernels_py as mod
    elif name == "ext":
        from . import _kernels as mod
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    return mod
