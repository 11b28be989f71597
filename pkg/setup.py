"""Build script for the optional compiled k-NN kernel.

The package is pure Python apart from ``cloudtrack._gridknn``, a Cython
uniform-grid nearest-neighbour kernel.  If Cython or a C compiler is
unavailable the build falls back to the pure-numpy kernel that ships with the
package; everything still works, just slower (see benchmarks/bench_kernels.py).
"""

from setuptools import setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize
    from setuptools.extension import Extension

    ext_modules = cythonize(
        [
            Extension(
                "cloudtrack._gridknn",
                sources=["src/cloudtrack/_gridknn.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )
except ImportError:  # pragma: no cover - exercised only on minimal installs
    pass

setup(ext_modules=ext_modules)
