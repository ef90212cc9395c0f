import os

from setuptools import Extension, setup


def _extensions():
    if os.environ.get("NEXUME_NO_EXT"):
        return []
    try:
        import numpy as np
        from Cython.Build import cythonize
    except ImportError:
        return []
    ext = Extension(
        "nexume.kernels._ckernels",
        ["src/nexume/kernels/_ckernels.pyx"],
        include_dirs=[np.get_include()],
        # no FMA contraction: float results must match the Python fallback bit for bit
        extra_compile_args=["-O3", "-ffp-contract=off"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
    return cythonize([ext], compiler_directives={"language_level": "3"})


setup(ext_modules=_extensions())
