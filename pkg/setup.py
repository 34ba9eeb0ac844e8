import os

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # pure-python install; the numpy kernels are used
    cythonize = None

ext_modules = []
if cythonize is not None and not os.environ.get("WARPHIST_NO_EXT"):
    ext_modules = cythonize(
        [
            Extension(
                "warphist._kernels._ckernels",
                ["src/warphist/_kernels/_ckernels.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                # no FP contraction: results must match the numpy kernels bit for bit
                extra_compile_args=["-O3", "-ffp-contract=off", "-fno-fast-math"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
