"""Hot loops, compiled when the extension is built, numpy otherwise.

Set ``ORGANSEG_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _surface_py

fallback_directed_min_sqdist = _surface_py.directed_min_sqdist

if os.environ.get("ORGANSEG_PURE_PYTHON"):
    compiled_directed_min_sqdist = None
else:
    try:
        from ._surface import directed_min_sqdist as compiled_directed_min_sqdist
    except ImportError:
        compiled_directed_min_sqdist = None

HAVE_COMPILED = compiled_directed_min_sqdist is not None
directed_min_sqdist = compiled_directed_min_sqdist or fallback_directed_min_sqdist

__all__ = ["HAVE_COMPILED", "directed_min_sqdist", "fallback_directed_min_sqdist",
           "compiled_directed_min_sqdist"]
