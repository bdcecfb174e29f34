"""Build hooks for the optional compiled convolution kernels.

The package is pure Python by default.  When Cython and a C compiler are
available, `python setup.py build_ext --inplace` (or a normal pip install
with the `accel` extra) compiles `tomoheight.kernels._conv3d_cy`, which the
kernel dispatcher picks up automatically at import time.  Without it the
NumPy fallback is used; results are identical up to floating-point
summation order.
"""

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [Extension(
            "tomoheight.kernels._conv3d_cy",
            sources=["src/tomoheight/kernels/_conv3d_cy.pyx"],
            include_dirs=[np.get_include()],
            extra_compile_args=["-O3", "-march=native", "-fno-math-errno"],
        )],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    ext_modules = []

setup(ext_modules=ext_modules)
