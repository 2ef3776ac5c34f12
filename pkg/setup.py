"""Build the optional Cython core; the package falls back to pure Python without it."""
import os

from setuptools import setup

ext_modules = []
if os.environ.get("PERFSA_NO_EXT", "") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension
    except ImportError:
        pass
    else:
        ext_modules = cythonize(
            [
                Extension(
                    "perfsa.kernels._ccore",
                    ["src/perfsa/kernels/_ccore.pyx"],
                    include_dirs=[np.get_include()],
                    # the compiled and pure-Python paths must agree bit for bit: no fma
                    # contraction, and no sin/cos fusion into glibc sincos (differs by an ulp)
                    extra_compile_args=["-O3", "-ffp-contract=off", "-fno-builtin-sin", "-fno-builtin-cos"],
                )
            ],
            compiler_directives={
                "language_level": "3",
                "boundscheck": False,
                "wraparound": False,
                "cdivision": True,
                "initializedcheck": False,
            },
        )

setup(ext_modules=ext_modules)
