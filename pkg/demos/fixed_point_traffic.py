"""Self-consistent activity under bursty traffic.

Run with ``python demos/fixed_point_traffic.py``. Each station is busy with
a probability that depends on the link quality, which depends in turn on
how busy the other stations are. The damped iteration finds the activity
where the two agree.
"""

from cellmeta import NetworkParams, fixed_point_solve, stability_verdict

params = NetworkParams()

print("arrival rate xi   CCU q*   CEU q*   CEU verdict   CEU median reliability")
for xi in (0.01, 0.05, 0.1, 0.15, 0.2, 0.25):
    ccu = fixed_point_solve(params, xi, "CCU", "beta")
    ceu = fixed_point_solve(params, xi, "CEU", "beta")
    median = float(ceu.curve(0.5))
    print(f"{xi:<17} {ccu.q_star:.3f}    {ceu.q_star:.3f}    {stability_verdict(ceu):<12}  {median:.3f}")

print()
print("When every user sits at the cell edge, retransmissions keep stations")
print("busy for longer, so the same arrival rate drives activity much higher.")
