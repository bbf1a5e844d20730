from setuptools import Extension, setup

try:
    import numpy as np
    from Cython.Build import cythonize
except ImportError:  # no compiler toolchain: numpy kernels only
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "bridgenet._ckernels",
                ["src/bridgenet/_ckernels.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
                optional=True,
            )
        ],
        language_level=3,
    )

setup(ext_modules=ext_modules)
