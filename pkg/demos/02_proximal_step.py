"""
The proximal gate update
========================

Gates are not moved by AdamW. After each optimisation step, every gate
vector is replaced by ``soft_threshold(v - rho * grad_v, eta_t * lam)``,
which is the exact minimiser of a quadratic plus an l1 term. This script
checks that against brute force, then shows what happens with ``rho = 0``.
"""

import numpy as np

from arena.prox_optimizer import ProxConfig, cosine_lr, prox_step_v, prox_subproblem_oracle, soft_threshold

# The three regimes of the threshold.
for x in (0.7, -0.3, -0.9):
    print(f"soft_threshold({x:+.1f}, 0.5) = {soft_threshold(x, 0.5):+.1f}")

# The closed form against a grid search over [-3, 3] with spacing 1e-4.
cfg = ProxConfig(lam=0.5, rho=0.1)
v, g, eta = np.array([0.2]), np.array([0.8]), 0.1
print("closed form:", prox_step_v(v, g, eta, cfg), "grid search:", prox_subproblem_oracle(v, g, eta, cfg))

gen = np.random.default_rng(1)
worst = 0.0
for _ in range(300):
    c = ProxConfig(lam=gen.uniform(0, 2), rho=gen.uniform(0, 1))
    e = gen.uniform(1e-4, 1e-1)
    a, b = gen.uniform(-1, 1, 1), gen.uniform(-1, 1, 1)
    worst = max(worst, abs(prox_step_v(a, b, e, c)[0] - prox_subproblem_oracle(a, b, e, c)[0]))
print(f"worst disagreement over 300 random problems: {worst:.1e}")

# With rho = 0 the gradient never reaches the gates: each step shrinks every
# |v_i| by eta_t * lam. Over the default 200-epoch cosine schedule with five
# steps per epoch the total shrinkage is fixed in advance.
cfg = ProxConfig()
total = sum(5 * cosine_lr(e, cfg) * cfg.lam for e in range(cfg.total_epochs))
print(f"total shrinkage with rho=0 over 200 epochs x 5 steps: {total:.4f}")
v0 = np.random.default_rng(2).uniform(-1, 1, 8)
print("gates that survive from a U[-1, 1) start:", int(np.sum(np.abs(v0) > total)), "of 8")
