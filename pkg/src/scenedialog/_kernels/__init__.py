"""Hot-loop kernels: compiled Cython extensions with pure-Python fallbacks.

The compiled modules are chosen at import when they were built; setting
``SCENEDIALOG_PURE_PYTHON=1`` forces the fallbacks. Both backends expose the
same functions and are tested for agreement.
"""

import os
from types import SimpleNamespace

from . import _gibbs_py, _lstm_py

try:
    from . import _gibbs as _gibbs_c
    from . import _lstm as _lstm_c
except ImportError:
    _gibbs_c = _lstm_c = None

COMPILED_AVAILABLE = _gibbs_c is not None

_BACKENDS = {"python": SimpleNamespace(name="python", gibbs=_gibbs_py, lstm=_lstm_py)}
if COMPILED_AVAILABLE:
    _BACKENDS["cython"] = SimpleNamespace(name="cython", gibbs=_gibbs_c, lstm=_lstm_c)


def get_backend(name=None):
    """Return the kernel namespace for ``name`` ('cython', 'python' or default)."""
    if name is None:
        return active
    try:
        return _BACKENDS[name]
    except KeyError:
        raise ValueError(f"kernel backend {name!r} is not available") from None


def available_backends():
    return sorted(_BACKENDS)


if COMPILED_AVAILABLE and not os.environ.get("SCENEDIALOG_PURE_PYTHON"):
    active = _BACKENDS["cython"]
else:
    active = _BACKENDS["python"]

BACKEND = active.name
