"""Build script: compiles the hot-loop kernels as a C extension when possible.

The package works without the extension (a pure-Python fallback with
identical numerics is selected at import time), so a failed compile is
downgraded to a warning instead of aborting the install.
"""

import sys

from setuptools import setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize

    ext_modules = cythonize(
        ["src/teleop_twin/_kernels_c.pyx"],
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
        },
    )
    for ext in ext_modules:
        ext.include_dirs.append(numpy.get_include())
except Exception as exc:  # pragma: no cover - exercised only on broken toolchains
    sys.stderr.write(
        "teleop-twin: skipping compiled kernels (%s); "
        "pure-Python fallback will be used\n" % exc
    )
    ext_modules = []

setup(ext_modules=ext_modules)
