import os
import sys

import numpy as np
from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class optional_build_ext(build_ext):
    # A failed compile leaves the pure-numpy kernels in charge instead of
    # aborting the install.
    def run(self):
        try:
            super().run()
        except Exception as exc:  # noqa: BLE001
            self._warn(exc)

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:  # noqa: BLE001
            self._warn(exc)

    def _warn(self, exc):
        sys.stderr.write(
            "warning: compiled kernels not built (%s); "
            "falling back to spheretrain._kernels_py\n" % exc
        )


def extensions():
    try:
        from Cython.Build import cythonize
    except ImportError:
        return []
    openmp = [] if os.environ.get("SPHERETRAIN_NO_OPENMP") else ["-fopenmp"]
    ext = Extension(
        "spheretrain._kernels",
        ["src/spheretrain/_kernels.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=["-O3"] + openmp,
        extra_link_args=openmp,
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
    return cythonize([ext], compiler_directives={"language_level": "3"})


setup(
    ext_modules=extensions(),
    cmdclass={"build_ext": optional_build_ext},
)
