"""Builds the optional compiled kernels; the package works without them."""

import os

from setuptools import setup
from setuptools.command.build_ext import build_ext


class OptionalBuildExt(build_ext):
    def run(self):
        try:
            super().run()
        except Exception as exc:  # compiler missing or Cython failure
            print(f"warning: compiled kernels not built ({exc}); using numpy fallback")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
            return
        except Exception as exc:
            print(f"warning: optimized build of {ext.name} failed ({exc}); retrying with portable flags")
        ext.extra_compile_args = ["-O3"]
        ext.extra_link_args = []
        try:
            super().build_extension(ext)
        except Exception as exc:
            print(f"warning: failed to build {ext.name} ({exc}); using numpy fallback")


def extensions():
    if os.environ.get("PECTP_NO_EXT"):
        return []
    try:
        import numpy as np
        from Cython.Build import cythonize
    except ImportError:
        return []
    from setuptools import Extension

    ext = Extension(
        "pectp.numerics._kernels_c",
        ["src/pectp/numerics/_kernels_c.pyx"],
        include_dirs=[np.get_include()],
        # vectorized exp needs fast-math and glibc's libmvec; inf/nan stay IEEE
        extra_compile_args=["-O3", "-ffast-math", "-fno-finite-math-only", "-march=native"],
        extra_link_args=["-lmvec"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
    return cythonize([ext], compiler_directives={"language_level": "3"}, quiet=True)


setup(ext_modules=extensions(), cmdclass={"build_ext": OptionalBuildExt})
