"""Train a small backbone policy with PPO, then use it inside the NMC solver.

Uses the ``smoke`` preset scaled up slightly so it finishes in a few
minutes on one core.  The learned policy replaces the local-field threshold:
at every jump it outputs a per-variable probability of joining the backbone.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from rlnmc.generate import GeneratorSpec, generate
from rlnmc.metrics import residual_energy
from rlnmc.nmc import RandomMaskPolicy, run_nmc
from rlnmc.policy import RLPolicy
from rlnmc.train import PRESETS, reward_quarters, train_rlnmc

# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

config = replace(PRESETS["smoke"], n_replicas=32, n_nmc_steps=8, n_train_reps=4, sa_sweeps=300)
train_set = [generate(GeneratorSpec(n=48, alpha=9.2, family="scale-free", seed=100 + s)) for s in range(3)]


def show(rec):
    print(f"update {rec['update']:3d}  reward {rec['mean_reward']:.4f}  entropy {rec['entropy']:.2f}  "
          f"loss {rec['loss']:+.4f}")


params, log = train_rlnmc(train_set, config, seed=0, log=show)
first, last = reward_quarters(log)
print(f"mean reward: first quarter {first:.4f}, last quarter {last:.4f}")

# ---------------------------------------------------------------------------
# Solving with the policy
# ---------------------------------------------------------------------------

test = generate(GeneratorSpec(n=48, alpha=9.2, family="scale-free", seed=999))
policy = RLPolicy(params)
recs, _ = run_nmc(test, config.schedule(), config.criterion(), config.nmc_config(), policy, n_replicas=64, seed=1)
frac = float(np.mean(policy.mask_sizes))
base, _ = run_nmc(test, config.schedule(), config.criterion(), config.nmc_config(), RandomMaskPolicy(frac),
                  n_replicas=64, seed=1)
print(f"held-out residual energy: learned {residual_energy(recs):.3f}, "
      f"random masks of the same mean size ({frac:.2f}) {residual_energy(base):.3f}")
