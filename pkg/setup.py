"""Build the compiled kernel extension when Cython is available.

The package runs fine without it: pocmarket._kernels falls back to the
pure-Python implementations at import time.
"""

from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "pocmarket._kernels._core",
                ["src/pocmarket/_kernels/_core.pyx"],
                extra_compile_args=["-O3"],
            )
        ],
        language_level=3,
    )

setup(ext_modules=ext_modules)
