"""Anatomy of the 3D contextual-transformer block.

The block sums two context maps: a static one (a k*k*k convolution over
the keys) and a dynamic one (values gated elementwise by an attention map
computed from the static context concatenated with the queries). This
script pokes at the structure: the output decomposes exactly, zeroing the
attention convolutions collapses it to the static path, and an identity
key kernel makes the whole block the identity.
"""

import numpy as np

from cotunet.cot import cot_forward, cot_init

rng = np.random.default_rng(7)
x = rng.standard_normal((1, 4, 8, 8, 8)).astype(np.float32)
params = cot_init(channels=4, k=3, seed=1)

y, trace = cot_forward(x, params)
print("input", x.shape, "-> output", y.shape, "(spatial dims preserved)")

# exact decomposition: output = static context + values * attention
recomposed = trace.static_ctx + trace.values * trace.attn
print("y == static + values*attn:", np.array_equal(y, recomposed))

# kill the dynamic path: zero either attention convolution
dead = params.map(np.copy)
dead.w_delta[...] = 0.0
y_dead, trace_dead = cot_forward(x, dead)
print("zero attention weights -> y == static context:",
      np.array_equal(y_dead, trace_dead.static_ctx))

# identity key kernel, all other weights zero: the block is a no-op
ident = params.map(np.zeros_like)
for c in range(4):
    ident.w_key[c, c, 1, 1, 1] = 1.0
y_ident, _ = cot_forward(x, ident)
print("identity key kernel -> y == x:", np.allclose(y_ident, x, atol=1e-6))

print("attention map stats: mean %.3f, std %.3f" % (trace.attn.mean(), trace.attn.std()))
