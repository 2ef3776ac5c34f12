"""Stepping core with a compiled backend and a pure-Python fallback.

The compiled module ``_ccore`` is used when it was built; otherwise, or when the
environment variable ``PERFSA_BACKEND=python`` is set, ``_pycore`` is used.  Both
expose ``sfb_chunk`` with the same signature and bit-identical results.

``sfb_chunk`` advances one trajectory of a linear-Gaussian problem
(``z = A x + mu + L eps``, ``G = M x + N z + b``) by up to ``nsteps`` steps starting
at global step ``t0``, reading uniforms from ``U[upos:]``.  ``mode`` selects plain
stepping (0), plain stepping plus likelihood-ratio accumulation for a tilt (1), or
stepping under the tilted law by rejection (2).  It returns
``(steps_done, upos, status)`` with status 0 (done), 1 (uniforms exhausted; ``upos``
points at the start of the unfinished step), 2 (non-finite operator value at step
``t0 + steps_done``) or 3 (rejection budget exhausted).
"""
import os

from . import _pycore

OK = _pycore.OK
NEED_UNIFORMS = _pycore.NEED_UNIFORMS
NONFINITE = _pycore.NONFINITE
DEGENERATE = _pycore.DEGENERATE

try:
    from . import _ccore
except ImportError:  # extension not built
    _ccore = None

_BACKENDS = {"python": _pycore.sfb_chunk}
if _ccore is not None:
    _BACKENDS["compiled"] = _ccore.sfb_chunk


def available_backends():
    return sorted(_BACKENDS)


def _default_backend() -> str:
    forced = os.environ.get("PERFSA_BACKEND", "").strip().lower()
    if forced:
        if forced not in _BACKENDS:
            raise ImportError(f"PERFSA_BACKEND={forced!r} is not available; have {available_backends()}")
        return forced
    return "compiled" if "compiled" in _BACKENDS else "python"


BACKEND = _default_backend()


def get_kernel(name=None):
    """Return ``sfb_chunk`` of the named backend (default: the one selected at import)."""
    return _BACKENDS[name or BACKEND]


saturate = _pycore.saturate
