"""Tour of the SIR meta distribution for cell-center and cell-edge users.

Run with ``python demos/meta_distribution_tour.py``. Prints the first two
moments of the link success probability for both user classes, then the
fraction of links that reach a few reliability targets under the exact
inversion and under the beta fit.
"""

import numpy as np

from cellmeta import ActivityModel, NetworkParams, meta_distribution, moment

params = NetworkParams()
activity = ActivityModel(0.5)

print(f"alpha={params.pathloss_exponent}, R={params.ratio_threshold}, theta={params.sir_threshold}, q={activity.q}")
print()
print("class   M1       M2       variance")
for cls in ("CCU", "CEU"):
    m1 = float(moment(1, params, activity, cls))
    m2 = float(moment(2, params, activity, cls))
    print(f"{cls}     {m1:.4f}   {m2:.4f}   {m2 - m1 * m1:.4f}")

targets = np.array([0.5, 0.8, 0.9, 0.95])
print()
print("fraction of links whose success probability exceeds x")
print("class  method        " + "  ".join(f"x={x:<4}" for x in targets))
for cls in ("CCU", "CEU"):
    for method in ("gil_pelaez", "beta"):
        curve = meta_distribution(params, activity, cls, method)
        row = "  ".join(f"{v:.4f}" for v in curve(targets))
        print(f"{cls}    {method:<12}  {row}")

print()
print("Cell-edge users have a lower mean, and far fewer of them reach the")
print("high-reliability targets. The beta fit tracks the inversion closely")
print("in the bulk of the distribution.")
