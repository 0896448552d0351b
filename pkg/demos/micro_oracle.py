"""Exact micro-lattice law vs simulated histograms.

For each small reference system the generator is enumerated, its law at
t = 2 is computed by matrix exponential and compared with the histogram of
20,000 exact trajectories. The closed-form stationary law is also shown.

    python3 demos/micro_oracle.py
"""
import numpy as np

from pbsrdd import oracle
from pbsrdd.crdme import sample_states
from pbsrdd.validation import empirical_distribution, micro_instances

T = 2.0
for k, inst in enumerate(micro_instances()):
    ctmc = inst.ctmc()
    exact = oracle.ctmc_distribution(ctmc, T)
    hist = empirical_distribution(ctmc, sample_states(inst.problem(T), 20_000, k, T))
    stat = oracle.stationary_weights(ctmc)
    print(f"{inst.name}: {len(ctmc.states)} states, TV = {oracle.total_variation(hist, exact):.4f}")
    print("   state  exact(t=2)  sampled  stationary")
    for i in np.argsort(-exact)[:6]:
        print(f"   {i:>5}  {exact[i]:>10.4f}  {hist[i]:>7.4f}  {stat[i]:>10.4f}")
