"""Build script for the optional compiled kernels.

The package works without the extension; ``reliasql.kernels`` falls back to
pure Python when ``reliasql._ckernels`` cannot be imported.
"""

import os

from setuptools import setup

ext_modules = []
if os.environ.get("RELIASQL_NO_EXT") != "1":
    try:
        import numpy
        from Cython.Build import cythonize
        from setuptools import Extension
    except ImportError:
        pass
    else:
        ext_modules = cythonize(
            [
                Extension(
                    "reliasql._ckernels",
                    ["src/reliasql/_ckernels.pyx"],
                    include_dirs=[numpy.get_include()],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
