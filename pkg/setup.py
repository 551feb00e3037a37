from Cython.Build import cythonize
from setuptools import Extension, setup

extensions = [
    Extension(
        "ntkadapt._kernels_c",
        ["src/ntkadapt/_kernels_c.pyx"],
        extra_compile_args=["-O3", "-march=native", "-funroll-loops"],
    )
]

setup(ext_modules=cythonize(extensions, language_level=3))
