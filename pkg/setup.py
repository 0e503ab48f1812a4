import os

import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

extensions = [
    Extension(
        "cdnet.numerics._cascade",
        ["src/cdnet/numerics/_cascade.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=["-O3"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
]

if os.environ.get("CDNET_PURE_PYTHON", "") not in ("", "0"):
    extensions = []

setup(
    ext_modules=cythonize(extensions, compiler_directives={"language_level": "3"}),
)
