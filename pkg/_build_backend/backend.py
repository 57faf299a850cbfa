"""PEP 517 backend: setuptools, without executing ./setup.py.

./setup.py is the project's interactive setup script (``python3 setup.py``),
not a setuptools configuration, so packaging metadata lives in pyproject.toml.
"""
from setuptools import build_meta as _orig


class _Backend(_orig._BuildMetaBackend):
    def run_setup(self, setup_script="setup.py"):
        exec(compile("from setuptools import setup; setup()", "<pyproject>", "exec"),
             {"__file__": setup_script, "__name__": "__main__"})


_backend = _Backend()
get_requires_for_build_wheel = _backend.get_requires_for_build_wheel
get_requires_for_build_sdist = _backend.get_requires_for_build_sdist
get_requires_for_build_editable = _backend.get_requires_for_build_editable
prepare_metadata_for_build_wheel = _backend.prepare_metadata_for_build_wheel
prepare_metadata_for_build_editable = _backend.prepare_metadata_for_build_editable
build_wheel = _backend.build_wheel
build_sdist = _backend.build_sdist
build_editable = _backend.build_editable
