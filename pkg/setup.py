"""Build the optional compiled kernels.

The Cython extension is skipped when Cython or a C compiler is unavailable;
the package then runs on its numpy kernels.
"""
import os

from setuptools import setup

ext_modules = []
if os.environ.get("ACCELBIAS_NO_EXT") != "1":
    try:
        import numpy as np
        import scipy.linalg.cython_blas  # noqa: F401  (dgemm is cimported from here)
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "accelbias.ofbenet._ckernels",
                    ["src/accelbias/ofbenet/_ckernels.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
