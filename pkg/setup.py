import os

import numpy as np
from setuptools import Extension, setup

ext_modules = []
if not os.environ.get("ORGANSEG_PURE_PYTHON"):
    try:
        from Cython.Build import cythonize
    except ImportError:
        pass
    else:
        ext_modules = cythonize(
            Extension(
                "organseg.kernels._surface",
                ["src/organseg/kernels/_surface.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3", "-ffp-contract=off"],
            ),
            language_level=3,
        )

setup(ext_modules=ext_modules)
