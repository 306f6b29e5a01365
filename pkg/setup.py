import os

import numpy
from setuptools import Extension, setup

ext_modules = []


def _cflags():
    # fast-math lets gcc call the vector tanh from libmvec; the kernel has no
    # nan/inf branches (finiteness is checked by the caller)
    flags = ["-O3", "-ffast-math"]
    if os.environ.get("MSGL_NATIVE"):
        flags.append("-march=native")
    return flags


def _libs():
    # the vector math routines live in glibc's libmvec
    import ctypes.util

    return ["mvec", "m"] if ctypes.util.find_library("mvec") else ["m"]

if not os.environ.get("MSGL_PURE_PYTHON"):
    try:
        from Cython.Build import cythonize
    except ImportError:
        cythonize = None
    if cythonize is not None:
        ext_modules = cythonize(
            [
                Extension(
                    "msgl.kernels._rgrn_ext",
                    ["src/msgl/kernels/_rgrn_ext.pyx", "src/msgl/kernels/rgrn_core.c"],
                    include_dirs=[numpy.get_include(), "src/msgl/kernels"],
                    extra_compile_args=_cflags(),
                    libraries=_libs(),
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
