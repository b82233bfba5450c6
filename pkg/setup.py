import os

from setuptools import setup

ext_modules = []
if not os.environ.get("NLMEFIT_NO_EXT"):
    try:
        from Cython.Build import cythonize

        ext_modules = cythonize(
            ["src/nlmefit/kernels/_ckern.pyx"],
            language_level=3,
        )
    except ImportError:
        # pure-Python fallback is selected at import time
        ext_modules = []

setup(ext_modules=ext_modules)
