"""Build script: compiles the optional Cython SGD kernels.

The package works without the extension (pure-numpy fallback is selected
at import time); set FED_ENERGY_SIM_NO_EXT=1 to skip compilation.
"""

import os

from setuptools import Extension, setup

ext_modules = []
if not os.environ.get("FED_ENERGY_SIM_NO_EXT"):
    try:
        from Cython.Build import cythonize

        ext_modules = cythonize(
            [
                Extension(
                    "fed_energy_sim.kernels._speedups",
                    sources=["src/fed_energy_sim/kernels/_speedups.pyx"],
                    optional=True,
                )
            ],
            language_level=3,
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
