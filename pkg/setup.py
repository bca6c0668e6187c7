"""Build script: compiles the optional extension module with the hot kernels.

Set TRAFFICLAB_PURE=1 to skip the compile and install pure-Python only; the
package selects the numpy fallback automatically at import time when the
extension is absent.
"""
import os

from setuptools import Extension, setup

ext_modules = []
if os.environ.get("TRAFFICLAB_PURE") != "1":
    try:
        from Cython.Build import cythonize

        ext_modules = cythonize(
            [
                Extension(
                    "trafficlab._native",
                    ["src/trafficlab/_native.pyx"],
                    extra_compile_args=["-O3"],
                )
            ],
            language_level="3",
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
