"""Select the compiled kernel core, falling back to numpy.

Set ``SEQBO_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("SEQBO_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # noqa: F811

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels

coded_dot = _impl.coded_dot
coded_sqnorm = _impl.coded_sqnorm
sqdist = _impl.sqdist
