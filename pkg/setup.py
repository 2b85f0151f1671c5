import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "dgdf.kernels._core",
                ["src/dgdf/kernels/_core.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_9_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    # Without Cython the package still installs; dgdf.kernels falls back
    # to the pure-numpy backend at import time.
    ext_modules = []

setup(ext_modules=ext_modules)
