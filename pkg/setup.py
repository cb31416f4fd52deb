"""Build the optional Cython kernels.

The package works without them: ``domainshift.kernels`` falls back to the
numpy implementation when the extension is missing. Set
``DOMAINSHIFT_NO_EXT=1`` to skip compilation entirely.
"""
import os

from setuptools import Extension, setup

extensions = []
if not os.environ.get("DOMAINSHIFT_NO_EXT"):
    try:
        import numpy as np
        from Cython.Build import cythonize
    except ImportError:
        pass
    else:
        extensions = cythonize(
            [
                Extension(
                    "domainshift._ckernels",
                    sources=["src/domainshift/_ckernels.pyx"],
                    include_dirs=[np.get_include()],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={
                "language_level": 3,
                "boundscheck": False,
                "wraparound": False,
                "cdivision": True,
                "initializedcheck": False,
            },
        )

setup(ext_modules=extensions)
