"""Build the optional compiled kernels.

The package works without them; ``fewshot_gmm.kernels`` falls back to the
numpy implementation when the extension is missing.

    pip install -e . --no-build-isolation
    python setup.py build_ext --inplace
"""
import os

from setuptools import Extension, setup

ext_modules = []
if os.environ.get("FEWSHOT_GMM_NO_EXT") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
    except ImportError:
        pass
    else:
        ext_modules = cythonize(
            [
                Extension(
                    "fewshot_gmm._ckernels",
                    ["src/fewshot_gmm/_ckernels.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
