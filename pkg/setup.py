"""Build script for the optional compiled kernel core.

The package is fully functional without the extension (a numpy fallback is
selected at import time); set N2C_NO_EXT=1 to skip compilation entirely.
"""

import os

from setuptools import Extension, setup


def extensions():
    if os.environ.get("N2C_NO_EXT"):
        return []
    try:
        import numpy as np
        from Cython.Build import cythonize
    except ImportError:
        return []
    ext = Extension(
        "n2c.kernels._core",
        ["src/n2c/kernels/_core.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=["-O3"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
    return cythonize([ext], language_level="3")


setup(ext_modules=extensions())
