import os

from setuptools import Extension, setup

ext_modules = []
if os.environ.get("PQBENCH_NO_EXT") != "1":
    try:
        from Cython.Build import cythonize
    except ImportError:
        cythonize = None
    if cythonize is not None:
        try:
            ext_modules = cythonize(
                [
                    Extension(
                        "pqbench._kernels",
                        ["src/pqbench/_kernels.pyx"],
                        extra_compile_args=["-O2"],
                        optional=True,
                    )
                ],
                compiler_directives={"language_level": "3"},
            )
        except Exception as exc:  # noqa: BLE001 - fall back to pure Python
            print(f"pqbench: skipping compiled kernels ({exc})")
            ext_modules = []

setup(ext_modules=ext_modules)
