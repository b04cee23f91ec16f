"""What happens to the collision map near a grazing line.

Tangent lines to a scatterer are sampled directly. Moving a distance tau
off the tangency, the derivative of the map grows like tau^(-1/2). In the
square-root coordinate upsilon = sqrt(tau) the derivative stays bounded, and
the reflection continues smoothly through upsilon = 0 into a phantom branch.
"""

import numpy as np

from disperse import scenes
from disperse.geometry import ScattererInstance
from disperse.singularity import (
    continued_reflection,
    derivative_blowup_exponent,
    even_odd_decompose,
    quasi_regular_chart,
    resolved_level_check,
    sample_tangency_set,
)

cfg = scenes.two_disk()
inst = ScattererInstance(0, (0, 0))
sol = sample_tangency_set(cfg, inst, 1, seed=11)[0]
print("tangent line: p =", np.round(sol.line.p, 6), "v =", np.round(sol.line.v, 6))

chart = quasi_regular_chart(cfg, sol)
taus = np.logspace(-7, -3, 9)
for kind in ("tau", "upsilon"):
    fit = derivative_blowup_exponent(cfg, chart, taus, kind=kind)
    print(f"|dT/d{kind}| ~ tau^{fit.slope:+.3f}   (r2 = {fit.r2:.5f})")

# a coordinate of the continued reflection, as a function of upsilon
base = continued_reflection(chart, np.zeros(2))
normal = np.array([-base.v[1], base.v[0]])
F = lambda u: continued_reflection(chart, np.array([u, 0.004])).p @ normal
print("\n upsilon    outgoing offset")
for u in np.linspace(-0.06, 0.06, 7):
    print(f"{u:+8.3f}   {F(u):+.8f}")

# split into even and odd parts in upsilon, both smooth functions of tau
level = F(0.03)
G = lambda u: F(u) - level
table = even_odd_decompose(G, np.linspace(0.0, 0.09, 161))
err = resolved_level_check(G, table, np.linspace(0.0, 0.085**2, 1000))
print(f"\nF(+u) F(-u) = G+^2 - tau G-^2 holds to {err:.1e}")
