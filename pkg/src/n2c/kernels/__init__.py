"""Backend selection for the hot kernels.

The compiled core is preferred when importable; N2C_KERNELS=python or
N2C_KERNELS=cython forces a choice (the latter raises if the extension is
missing). The active backend name is exposed as BACKEND.
"""

import os

_requested = os.environ.get("N2C_KERNELS", "auto").lower()
if _requested not in ("auto", "cython", "python"):
    raise ValueError(f"N2C_KERNELS must be auto, cython or python, got {_requested!r}")

if _requested == "python":
    from n2c.kernels import py_backend as _impl

    BACKEND = "python"
else:
    try:
        from n2c.kernels import _core as _impl  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:
        if _requested == "cython":
            raise
        from n2c.kernels import py_backend as _impl

        BACKEND = "python"

conv2d_forward = _impl.conv2d_forward
conv2d_grad_input = _impl.conv2d_grad_input
conv2d_grad_kernel = _impl.conv2d_grad_kernel
nlm_filter = _impl.nlm_filter
