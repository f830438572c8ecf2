"""Hot-loop kernel selection.

The compiled extension is used when it was built; otherwise, or when
``WSLOC_PURE_PYTHON=1`` is set, the numpy fallback is used. Both produce
bit-identical output.
"""

import os

from . import _fallback

BACKEND = "python"
_impl = _fallback

if os.environ.get("WSLOC_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"

im2col = _impl.im2col
col2im = _impl.col2im
# numpy's vectorized argmax/argmin outrun the compiled scalar scan (see
# benchmarks/bench_kernels.py), so this one stays on the fallback.
row_extrema = _fallback.row_extrema


def tune_allocator() -> bool:
    """Keep large freed blocks in the glibc heap instead of unmapping them.

    Training reallocates the same multi-megabyte im2col buffers every step;
    with the default mmap threshold each allocation page-faults afresh. The
    setting is process-wide, so only long-running entry points call this.
    Returns False where glibc's ``mallopt`` is unavailable.
    """
    import ctypes
    import ctypes.util

    name = ctypes.util.find_library("c")
    if not name:
        return False
    try:
        libc = ctypes.CDLL(name)
        mallopt = libc.mallopt
    except (OSError, AttributeError):
        return False
    m_trim_threshold, m_mmap_threshold = -1, -3
    ok = mallopt(m_mmap_threshold, 1 << 30) and mallopt(m_trim_threshold, 1 << 31)
    return bool(ok)
