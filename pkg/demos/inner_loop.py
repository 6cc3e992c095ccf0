"""
Watching a TTT layer learn at test time
=======================================

The hidden state of a TTT layer is the weight set of a small model. Every
mini-batch of tokens takes one gradient step on a reconstruction loss, and the
outputs of that mini-batch are read from the updated weights.
"""

import numpy as np

from tttlab.autodiff import Tensor
from tttlab.ttt import TTTConfig, bidirectional, init_ttt_params, inner_loss, scan_minibatch, scan_sequential

rng = np.random.default_rng(0)
cfg = TTTConfig(d=16, variant="mlp", b=8)
params = init_ttt_params(cfg, rng, requires_grad=False)

# a sequence that repeats one short motif, so later tokens resemble earlier ones
motif = rng.normal(size=(8, cfg.d))
X = Tensor(np.tile(motif, (6, 1)) + 0.05 * rng.normal(size=(48, cfg.d)))

# the scan can return the state after every mini-batch update
Z, states = scan_minibatch(X, params, cfg, return_states=True)
print("output shape", Z.shape, "states", len(states))

# reconstruction loss of each block, under the state before and after its own update;
# the first step starts from a near-zero state where the layer norm is steep and can
# overshoot, after which the repeated motif is learned block by block
before = [w for w in params.W0]
for i, after in enumerate(states):
    block = X[8 * i:8 * (i + 1)]
    print(f"block {i}: loss before {inner_loss(before, block, params, cfg).item():8.4f}"
          f"   after {inner_loss(after, block, params, cfg).item():8.4f}")
    before = after

# with b=1 the mini-batch scan is the per-token scan, bit for bit
same = np.array_equal(scan_minibatch(X, params, cfg, b=1).data, scan_sequential(X, params, cfg).data)
print("b=1 equals the per-token scan:", same)

# the backward direction is the same scan run on the reversed sequence
back = bidirectional(X, params, cfg)
print("first backward output uses the whole sequence:", np.round(back.data[0, :4], 4))
