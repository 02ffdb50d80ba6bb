import os

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # fallback kernels are selected at import time
    cythonize = None

ext_modules = []
if cythonize is not None and not os.environ.get("SCENEDIALOG_NO_EXT"):
    extensions = [
        Extension(
            "scenedialog._kernels._gibbs",
            ["src/scenedialog/_kernels/_gibbs.pyx"],
            include_dirs=[np.get_include()],
            extra_compile_args=["-O3"],
        ),
        Extension(
            "scenedialog._kernels._lstm",
            ["src/scenedialog/_kernels/_lstm.pyx"],
            include_dirs=[np.get_include()],
            extra_compile_args=["-O3"],
        ),
    ]
    ext_modules = cythonize(
        extensions,
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
        },
    )

setup(ext_modules=ext_modules)
