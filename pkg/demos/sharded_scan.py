"""
Splitting the hidden state across workers
=========================================

The two-layer inner model is split by its hidden width: the first weight
matrix by columns, the second by rows. Each worker holds one slice, and one
all-reduce per mini-batch assembles the reconstruction that the loss needs.
"""

import numpy as np

from tttlab.autodiff import Tensor, rel_error
from tttlab.sharded import shard_params, sharded_scan
from tttlab.ttt import TTTConfig, init_ttt_params, scan_minibatch

rng = np.random.default_rng(0)
cfg = TTTConfig(d=8, variant="mlp", b=4)
params = init_ttt_params(cfg, rng, requires_grad=False, state_std=0.3)
X = Tensor(rng.normal(size=(22, cfg.d)))

# slices held by each of 4 workers
sh = shard_params(params.W0, 4)
print("first-layer slices", [w.shape for w in sh.W1], "second-layer slices", [w.shape for w in sh.W2])

reference = scan_minibatch(X, params, cfg).data
for n in (1, 2, 4, 8):
    Z, stats = sharded_scan(X, params, cfg, n, return_stats=True)
    print(f"{n} shard(s): rel error {rel_error(Z.data, reference):.1e}, "
          f"{stats['minibatches']} mini-batches, {stats['inner_loss']} inner-loss all-reduces")
