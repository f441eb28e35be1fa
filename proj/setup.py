import os
from glob import glob

from pybind11.setup_helpers import Pybind11Extension, build_ext
from setuptools import setup


def eigen_include():
    candidates = [
        os.environ.get("EIGEN3_INCLUDE_DIR"),
        "/usr/include/eigen3",
        "/usr/local/include/eigen3",
    ]
    for path in candidates:
        if path and os.path.isdir(path):
            return path
    raise RuntimeError(
        "Eigen3 headers not found; set EIGEN3_INCLUDE_DIR to their location"
    )


ext_modules = [
    Pybind11Extension(
        "reconalign._core",
        sorted(glob("src/*.cpp")) + ["python/bindings.cpp"],
        include_dirs=["include", "vendor", eigen_include()],
        cxx_std=20,
    )
]

setup(ext_modules=ext_modules, cmdclass={"build_ext": build_ext})
