"""Monte Carlo volume of delta-neighbourhoods of singular sets.

For a smooth codimension-one zero set the fraction of samples within delta
scales like delta. This holds for a line, a circle and a crossing of two lines,
and also for the tangency set S itself inside a window of phase space.
"""

import numpy as np

from disperse import scenes
from disperse.measure import (
    PhaseWindow,
    circle_field,
    crossing_field,
    hyperplane_field,
    scaling_fit,
    singularity_tube_measure,
)

deltas = np.logspace(-3, -1, 7)
for make in (hyperplane_field, circle_field, crossing_field):
    rep = scaling_fit(make(), deltas, 200_000, seed=0)
    print(f"{make().name:10s} slope {rep.slope:.3f}  r2 {rep.r2:.4f}")

cfg = scenes.two_disk()
window = PhaseWindow(1, (0, 0), (1.0, 0.0), 0.6)
rep = singularity_tube_measure(cfg, 0, window, np.logspace(-3, -1.5, 6), 50_000, seed=0,
                               cloud_size=20_000)
print(f"\ntangency set S in a window of M: slope {rep.slope:.3f}")
for e in rep.meta["estimates"]:
    print(f"  delta {e['delta']:.2e}  fraction {e['volume_fraction']:.3e} +- {e['confidence_halfwidth']:.1e}")
