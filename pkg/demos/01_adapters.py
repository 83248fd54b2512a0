"""
Gated low-rank adapters
=======================

A gated adapter adds ``B diag(v) A`` to a frozen weight. With the usual
start (B = 0) it changes nothing, and with all gates at 1 it is an ordinary
``B A`` adapter. Each gate that reaches zero removes one rank-one component.
"""

import numpy as np

from arena.adapters import (
    AdapterState, adapted_forward, adapter_param_count, delta, effective_rank, init_adapter, merge,
)
from arena.linalg import Rng
from arena.model_kit import LinearLayer

rng = Rng(0)
gen = np.random.default_rng(0)

# A frozen 12 x 10 host layer and a fresh rank-4 gated adapter.
host = LinearLayer("host", gen.normal(size=(12, 10)), gen.normal(size=12))
s = init_adapter(rng, "gated", 12, 10, 4)
print("gates at init:", np.round(s.v, 3))
print("increment is zero at init:", not delta(s).any())

x = gen.normal(size=(10, 5))
print("adapted == host at init:", np.array_equal(adapted_forward(host, s, x), host.forward(x)[0]))

# Pretend training moved B and zeroed two gates.
s.B[...] = gen.normal(size=s.B.shape)
s.v[[1, 3]] = 0.0
print("effective rank:", effective_rank(s), "of", s.r)
print("rank of the increment:", np.linalg.matrix_rank(delta(s)))

# The adapter is applied right to left, so the 12 x 10 increment is never
# formed; merging folds it into the weight for deployment.
merged = merge(host, s)
print("merged vs adapted max diff:", np.max(np.abs(merged.forward(x)[0] - adapted_forward(host, s, x))))

# With unit gates the gated form is exactly the vanilla one.
ones = AdapterState(s.A, s.B, np.ones(4))
plain = AdapterState(s.A, s.B, None, "vanilla")
print("unit gates == vanilla:", np.array_equal(delta(ones), delta(plain)))

# Parameter cost: the gates add r numbers per attachment.
for r in (4, 8, 32, 64):
    v, g = adapter_param_count(96, 96, r, "vanilla"), adapter_param_count(96, 96, r, "gated")
    print(f"r={r:2d}  vanilla {v:6d}  gated {g:6d}")
