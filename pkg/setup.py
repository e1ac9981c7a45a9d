"""Builds the optional compiled rasterizer; the package works without it."""
import os

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

ext_modules = []
if cythonize is not None and os.environ.get("CAGSPLAT_NO_EXT") != "1":
    ext_modules = cythonize(
        [
            Extension(
                "cagsplat.render._raster",
                ["src/cagsplat/render/_raster.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                # no -ffast-math and no FMA contraction: results must match the numpy reference bit for bit
                extra_compile_args=["-O2", "-ffp-contract=off"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
