"""Monte Carlo risk table for one condition at a reduced scale.

Runs the no-adjustment and SIPW versions of the K=6 condition with fewer
units and replicates than the full grid, and prints risk relative to the RCT
estimate.  Takes well under a minute.

    python3 demos/small_simulation.py
"""

from dataclasses import replace

from fusion_shrinkage import simulation as sim

for adjustment in ("none", "sipw"):
    table = sim.run_condition(replace(sim.QUICK_BASE, K=6, adjustment=adjustment))
    print(f"\n{table.metadata['condition']}")
    print(f"{'estimator':<18}{'risk':>10}{'se':>10}{'reduction %':>13}")
    for name in table.estimators:
        r = table.row(name)
        print(f"{name:<18}{r['risk']:>10.5f}{r['se']:>10.5f}{r['pct_reduction']:>13.1f}")
