"""Build the optional Cython kernel core.

The extension is optional: if Cython or a C compiler is unavailable the
package installs without it and falls back to the NumPy kernels.
"""
import os

from setuptools import setup

ext_modules = []
if not os.environ.get("SYNERGY_CL_NO_EXT"):
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "synergy_cl._ckernels",
                    ["src/synergy_cl/_ckernels.pyx"],
                    include_dirs=[np.get_include()],
                    # no FMA contraction: keeps results bit-identical to NumPy
                    extra_compile_args=["-O3", "-ffp-contract=off"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={
                "language_level": "3",
                "boundscheck": False,
                "wraparound": False,
                "cdivision": True,
            },
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
