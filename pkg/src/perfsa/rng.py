"""Random streams and the Gaussian transform used by every sampler.

All randomness is drawn as uniforms on [0, 1) from a numpy ``Generator`` backed by
PCG64.  Standard normals come from the Box-Muller transform, two uniforms per pair:

    r = sqrt(-2 log(1 - u1)),  theta = 2 pi u2,  (r cos theta, r sin theta)

A draw of ``n`` normals consumes ``2 * ceil(n / 2)`` uniforms; for odd ``n`` the
second member of the last pair is discarded.  Because PCG64 produces one double per
64-bit output, requesting uniforms in blocks of any size yields the same sequence,
which is what makes chunked kernels replay bit for bit.

Replica streams are never derived by reseeding a running generator.  Replica ``i``
of master seed ``s`` uses ``SeedSequence(s, spawn_key=(i,))``, identical to the
``i``-th child of ``SeedSequence(s).spawn``.
"""
from __future__ import annotations

import math

import numpy as np

TWO_PI = 6.283185307179586


def make_rng(seed) -> np.random.Generator:
    """Generator from an int, a ``SeedSequence`` or an existing generator (returned as is)."""
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.PCG64(seed))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))


def replica_seed(master_seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(master_seed), spawn_key=(int(index),))


def replica_rng(master_seed: int, index: int) -> np.random.Generator:
    return make_rng(replica_seed(master_seed, index))


def keyed_seed(base_seed: int, key) -> np.random.SeedSequence:
    """Seed derived from a tuple of (possibly negative) integers."""
    words = [(2 * k) if k >= 0 else (-2 * k - 1) for k in (int(v) for v in key)]
    return np.random.SeedSequence([int(base_seed)] + words)


def uniforms_per_draw(n: int) -> int:
    return 2 * ((n + 1) // 2)


def box_muller(u, n: int) -> list:
    """Scalar transform of ``uniforms_per_draw(n)`` uniforms into ``n`` normals."""
    out = []
    for p in range(0, n, 2):
        r = math.sqrt(-2.0 * math.log(1.0 - u[p]))
        th = TWO_PI * u[p + 1]
        out.append(r * math.cos(th))
        if p + 1 < n:
            out.append(r * math.sin(th))
    return out


def box_muller_block(u: np.ndarray, n: int) -> np.ndarray:
    """Vectorised transform of a ``(m, uniforms_per_draw(n))`` block into ``(m, n)`` normals.

    Same construction as :func:`box_muller`; results may differ from it in the last
    bit because numpy's vectorised transcendental functions are not libm.
    """
    u = np.asarray(u, dtype=float)
    u1 = u[:, 0::2]
    u2 = u[:, 1::2]
    r = np.sqrt(-2.0 * np.log(1.0 - u1))
    th = TWO_PI * u2
    out = np.empty((u.shape[0], u1.shape[1] * 2))
    out[:, 0::2] = r * np.cos(th)
    out[:, 1::2] = r * np.sin(th)
    return out[:, :n]


def standard_normals(rng: np.random.Generator, count: int, n: int) -> np.ndarray:
    """``count`` draws of ``n`` standard normals, consuming the stream like ``count`` single draws."""
    m = uniforms_per_draw(n)
    return box_muller_block(rng.random(count * m).reshape(count, m), n)
