import os

import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

compile_args = ["-O3", "-ffp-contract=fast"]
if os.environ.get("EQTRACK_PORTABLE", "") != "1":
    compile_args.append("-march=native")

extensions = [
    Extension(
        "eqtrack._kernels._native",
        ["src/eqtrack/_kernels/_native.pyx"],
        include_dirs=[np.get_include(), "src/eqtrack/_kernels"],
        extra_compile_args=compile_args,
    )
]

setup(
    ext_modules=cythonize(extensions, compiler_directives={"language_level": "3"}),
)
