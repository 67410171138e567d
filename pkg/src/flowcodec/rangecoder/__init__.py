"""Range coder backend selection.

The compiled extension is preferred; the pure-Python port is the
fallback and produces byte-identical streams.  Set FLOWCODEC_PURE=1 to
force the pure backend (used by the equivalence tests and benchmark).
"""

import os

from . import _rc_py

BACKENDS = {"pure": _rc_py}

try:
    from . import _rc
    BACKENDS["cython"] = _rc
except ImportError:
    _rc = None

if os.environ.get("FLOWCODEC_PURE") == "1" or _rc is None:
    BACKEND = "pure"
else:
    BACKEND = "cython"

encode_channels = BACKENDS[BACKEND].encode_channels
decode_channels = BACKENDS[BACKEND].decode_channels


def get_backend(name):
    """Return (encode_channels, decode_channels) for an explicit backend."""
    mod = BACKENDS[name]
    return mod.encode_channels, mod.decode_channels
