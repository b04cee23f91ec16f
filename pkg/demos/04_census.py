"""Count how many simultaneous tangencies a single line can have.

Starting from a line tangent to one scatterer, each chain adds the next
scatterer the line passes near and solves for a line tangent to all of them.
In dimension d the solve succeeds up to j = 2d - 2 and stalls beyond it.
"""

from disperse import scenes
from disperse.genericity import tangency_census

for cfg, j_max, trials in ((scenes.two_disk(), 3, 30), (scenes.three_sphere(), 5, 30)):
    print(f"d = {cfg.dimension}, bound 2d - 2 = {2 * cfg.dimension - 2}")
    print("  j  converged  best residual")
    for row in tangency_census(cfg, j_max, trials, seed=0):
        print(f"  {row.j}  {row.converged:4d}/{row.trials}   {row.best_residual:.2e}")
