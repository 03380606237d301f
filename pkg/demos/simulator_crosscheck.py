"""Compare the formulas with a Monte Carlo network.

Run with ``python demos/simulator_crosscheck.py``. Drops a few Poisson
networks on a torus, runs fixed-activity fading draws on every link and
sets the empirical moments and meta distribution next to the analytical
ones. Takes roughly half a minute.
"""

import numpy as np

from cellmeta import ActivityModel, NetworkParams, meta_distribution, moment, sample_network
from cellmeta.simulator import SimStats, empirical_meta, empirical_moment, run_fixed_activity

params = NetworkParams()
q = 0.5
parts = []
for i, seed in enumerate(np.random.SeedSequence(7).spawn(4)):
    geo, draws = seed.spawn(2)
    snap = sample_network(params, 2000.0, geo)
    parts.append(run_fixed_activity(snap, params, q, 500, draws, geometry_index=i))
stats = SimStats.merge(parts)
print(f"{stats.n_links} links over {len(parts)} networks, 500 draws each")
print()
print("class  b  formula  simulated  std.err")
for cls in ("CCU", "CEU"):
    for b in (1, 2):
        est, se = empirical_moment(stats, b, cls)
        ref = float(moment(b, params, ActivityModel(q), cls))
        print(f"{cls}    {b}  {ref:.4f}   {est:.4f}     {se:.4f}")

print()
for cls in ("CCU", "CEU"):
    analytic = meta_distribution(params, ActivityModel(q), cls)
    gap = analytic.sup_distance(empirical_meta(stats, cls), 0.05, 0.95)
    print(f"{cls}: largest gap between the inverted and empirical meta curves on [0.05, 0.95] is {gap:.4f}")
