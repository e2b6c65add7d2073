# %% [markdown]
# # Adaptive refinement of a power density map
#
# Three unit plane waves at 3 kHz hit the array.  Instead of scanning a
# fine grid, the map starts from the 12 base pixels and splits only those
# pixels whose split lowers the spatial entropy the most.  Neighbouring
# bright pixels are then grouped into clusters, one per source.

# %%
import math

import numpy as np

from sphloc.evaluate import doa_error, emit_plot_data
from sphloc.higrid import RefinementPolicy, higrid_run
from sphloc.nnl import nnl_label
from sphloc.sph import PlaneWaveSource, plane_wave_shd, unit_vector
from sphloc.srpd import CrossDensityCache

sources = [PlaneWaveSource(1.0, math.pi / 2, 3 * math.pi / 5),
           PlaneWaveSource(1.0, 2 * math.pi / 3, math.pi / 5),
           PlaneWaveSource(1.0, math.pi / 3, 9 * math.pi / 5)]
k = 2 * math.pi * 3000 / 343
frame = plane_wave_shd(sources, k, 4, 0.042)

# %% [markdown]
# The cross-density matrices depend only on the pixel, so they are built
# once per level and reused for every frame.

# %%
cache = CrossDensityCache.build(4)
m = higrid_run(frame, cache, RefinementPolicy(max_level=4, seed=0))
print("leaves after each level:", m.history)
print("power evaluations:", m.evaluations, "of", 12 * 4 ** 4, "finest pixels")

# %%
clusters = nnl_label(m)
truth = np.array([unit_vector(s.theta, s.phi) for s in sources])
err = doa_error([c.centroid for c in clusters], truth)
for (i, j), e in zip(err.pairs, err.errors_deg):
    print(f"source {j}: cluster of {clusters[i].size} pixels, error {e:.2f} deg")

# %% [markdown]
# The first source sits between the other two, and their overlapping main
# lobes pull its peak a few degrees away.  A dense scan shows the same
# shift, so it does not come from the refinement.
#
# Plot data with Mollweide coordinates can be written for external tools.

# %%
n = emit_plot_data(m, "three_waves_map.csv")
print(n, "rows written to three_waves_map.csv")
