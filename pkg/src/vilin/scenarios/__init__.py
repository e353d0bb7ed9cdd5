"""Bundled scenario files, addressable by name from the command line."""

from importlib import resources


def bundled():
    """Names of the bundled scenarios."""
    files = resources.files(__name__)
    return sorted(f.name[:-4] for f in files.iterdir() if f.name.endswith(".ini"))


def scenario_path(name):
    """Path of a bundled scenario, or ``None``."""
    f = resources.files(__name__) / f"{name}.ini"
    return f if f.is_file() else None
