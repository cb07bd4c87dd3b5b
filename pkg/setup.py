import os

import numpy
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # the pure-Python rasterizer is used instead
    cythonize = None

ext_modules = []
if cythonize is not None and not os.environ.get("RIGSPLAT_NO_EXT"):
    ext_modules = cythonize(
        [
            Extension(
                "rigsplat.raster._kernels",
                ["src/rigsplat/raster/_kernels.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
            "initializedcheck": False,
        },
    )

setup(ext_modules=ext_modules)
