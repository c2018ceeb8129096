"""Build script: compiles the optional fast-kernel extension.

The package works without the extension (pure numpy fallback); if Cython or a
C compiler is missing the build degrades gracefully to pure Python.
"""

from setuptools import Extension, setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize

    ext = Extension(
        "dialtask._ckernels",
        ["src/dialtask/_ckernels.pyx"],
        include_dirs=[numpy.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=["-O3"],
    )
    ext.optional = True
    ext_modules = cythonize([ext], compiler_directives={"language_level": "3"}, quiet=True)
except ImportError:
    pass

setup(ext_modules=ext_modules)
