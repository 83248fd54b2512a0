"""
Finding a planted rank
======================

A linear base model ``W0`` must be corrected by a rank-2 increment from ten
noisy examples. A rank-8 gated adapter is trained at several penalty
weights; larger penalties switch off more gates. With ``rho = 1`` the gates
follow the data gradient, and strong weight decay on A and B lets unneeded
components die out.
"""

from pathlib import Path

import numpy as np

from arena.config import load_config
from arena.harness import run_experiment, with_overrides

cfg = load_config(Path(__file__).resolve().parent.parent / "configs" / "planted_sweep.json")
sigma2 = cfg.task.noise_sigma ** 2
seeds = [0, 1, 2]

print("lambda   ranks      median query MSE / sigma^2")
for lam in (0.0, 0.01, 0.1, 0.5, 1.0):
    runs = [run_experiment(with_overrides(cfg, **{"prox.lam": lam}), s) for s in seeds]
    ranks = [r.final_rank for r in runs]
    mse = np.median([r.final_metric for r in runs]) / sigma2
    print(f"{lam:6.2f}   {ranks}   {mse:.2f}")

# Ten examples in 32 dimensions leave most input directions unseen, so even
# the best rank-2 fit sits near 2 sigma^2 on fresh queries; what the penalty
# buys here is the right rank, not a lower error.
