"""Regenerate src/ildrive/_slip_derivs.py from the symbolic slip term.

Run from the repository root: ``python3 tools/gen_slip_derivs.py``.
"""

from pathlib import Path

import sympy as sp

u, vy = sp.symbols("u vy", real=True)
h = sp.atan(vy / u) ** 2
exprs, labels = [], []
for order in range(5):
    for nu in range(order, -1, -1):
        exprs.append(sp.diff(h, u, nu, vy, order - nu) if order else h)
        labels.append((nu, order - nu))
subs, reduced = sp.cse(exprs, optimizations="basic")

lines = [
    '"""Partials of ``atan(vy/u)**2`` up to fourth order (generated by tools/gen_slip_derivs.py)."""',
    "",
    "import math",
    "",
    "from numba import njit",
    "",
    "# (d/du)^p (d/dvy)^q for each output slot, in order",
    f"ORDERS = {tuple(labels)!r}",
    "",
    "",
    "@njit(cache=True)",
    "def slip_partials(u, vy, out):",
]
for sym, e in subs:
    lines.append(f"    {sym} = {sp.pycode(e)}")
for k, e in enumerate(reduced):
    lines.append(f"    out[{k}] = {sp.pycode(e)}")
lines.append("")
Path("src/ildrive/_slip_derivs.py").write_text("\n".join(lines))
