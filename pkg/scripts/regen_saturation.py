"""Derive the saturation blend coefficients used by ``perfsa.tilt.blend_coefficients``.

On ``s = |t| - 1/2`` the blend is ``p(s) = 1/2 + s + s^4 (c4 + c5 s + c6 s^2 + c7 s^3)``,
which matches the identity to third order at ``s = 0``.  The four coefficients make
``p(D) = level`` and ``p'(D) = p''(D) = p'''(D) = 0`` with ``D = knot - 1/2``.

Run: ``python scripts/regen_saturation.py``
"""
import sympy as sp


def main():
    s, D, level = sp.symbols("s D level", positive=True)
    c = sp.symbols("c4:8")
    p = sp.Rational(1, 2) + s + s ** 4 * (c[0] + c[1] * s + c[2] * s ** 2 + c[3] * s ** 3)
    eqs = [sp.Eq(p.subs(s, D), level)] + [sp.Eq(sp.diff(p, s, k).subs(s, D), 0) for k in (1, 2, 3)]
    sol = sp.solve(eqs, c, dict=True)[0]
    for ci in c:
        print(f"{ci} = {sp.factor(sol[ci])}")
    defaults = {D: 1, level: 1}
    print("default knot 3/2, level 1:", tuple(sp.nsimplify(sol[ci].subs(defaults)) for ci in c))


if __name__ == "__main__":
    main()
