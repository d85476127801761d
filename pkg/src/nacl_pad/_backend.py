"""Kernel backend selection.

The compiled extension is used when importable; setting
``NACL_PAD_PURE_PYTHON=1`` forces the numpy fallback.
"""

import os

if os.environ.get("NACL_PAD_PURE_PYTHON", "") not in ("", "0"):
    from nacl_pad import _fallback as kernels

    BACKEND = "python"
else:
    try:
        from nacl_pad import _kernels as kernels

        BACKEND = "compiled"
    except ImportError:
        from nacl_pad import _fallback as kernels

        BACKEND = "python"

__all__ = ["BACKEND", "kernels"]
