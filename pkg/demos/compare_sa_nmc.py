"""SA against threshold NMC on a handful of scale-free 4-SAT instances.

Both solvers get the same sweep budget.  NMC anneals to beta_nmc and then
spends the rest on jumps that randomize the high-field backbone.  The table
shows the replica-averaged best energy (residual energy) per instance.
"""

from __future__ import annotations

import numpy as np

from rlnmc.anneal import Schedule, SuccessCriterion, run_sa
from rlnmc.generate import GeneratorSpec, generate
from rlnmc.metrics import residual_energy
from rlnmc.nmc import NmcConfig, budget_split, run_nmc

# ---------------------------------------------------------------------------
# Setup
# ---------------------------------------------------------------------------

N, ALPHA, REPLICAS = 100, 9.2, 32
schedule = Schedule(beta_i=2.0, beta_f=8.0, total_sweeps=5000)
nmc = NmcConfig(r=2.5, n_cycles=3, n_sw=40, n_steps=20)
criterion = SuccessCriterion(0)

split = budget_split(schedule, nmc)
print(f"budget {split['total_sweeps']} sweeps: annealing {split['sa_sweeps']}, jumps {split['nmc_sweeps']}")

# ---------------------------------------------------------------------------
# Run
# ---------------------------------------------------------------------------

print(f"{'instance':>8} {'SA':>8} {'NMC':>8}")
sa_all, nmc_all = [], []
for seed in range(6):
    f = generate(GeneratorSpec(n=N, alpha=ALPHA, family="scale-free", seed=seed))
    e_sa = residual_energy(run_sa(f, schedule, criterion, REPLICAS, seed=seed))
    e_nmc = residual_energy(run_nmc(f, schedule, criterion, nmc, n_replicas=REPLICAS, seed=seed)[0])
    sa_all.append(e_sa)
    nmc_all.append(e_nmc)
    print(f"{seed:>8} {e_sa:8.3f} {e_nmc:8.3f}")

print(f"{'median':>8} {np.median(sa_all):8.3f} {np.median(nmc_all):8.3f}")
