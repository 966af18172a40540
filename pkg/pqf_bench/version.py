import platform
from os.path import dirname, join
from typing import Dict

import numpy
import scipy


def version() -> str:
    with open(join(dirname(__file__), "resources", "VERSION")) as f:
        return f.read().strip()


def stack_versions() -> Dict[str, str]:
    """Versions recorded in report provenance."""
    return {
        "pqf_bench": __version__,
        "numpy": numpy.__version__,
        "scipy": scipy.__version__,
        "python": platform.python_version(),
    }


__version__ = version()
