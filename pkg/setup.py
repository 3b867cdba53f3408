"""Builds the optional Cython kernel core; the package works without it."""
import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # pure-Python install, numpy fallback kernels only
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "hasa.autodiff._ckernels",
                ["src/hasa/autodiff/_ckernels.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
