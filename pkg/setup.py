"""Build the optional Cython kernels.

The package works without them: ``shortcutlab.kernels`` falls back to numpy
when the extension is missing or fails to import.
"""
import os

from setuptools import Extension, setup

ext_modules = []
if os.environ.get("SHORTCUTLAB_NO_EXT", "") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
    except ImportError:
        pass
    else:
        ext_modules = cythonize(
            [
                Extension(
                    "shortcutlab._ckernels",
                    ["src/shortcutlab/_ckernels.pyx"],
                    include_dirs=[np.get_include()],
                    # no contraction into FMA: keeps results identical to the numpy path
                    extra_compile_args=["-O3", "-ffp-contract=off"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
