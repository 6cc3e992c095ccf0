"""
Recall across segments, beyond the capacity of a matrix state
==============================================================

Key-value pairs sit in the first segment, queries in the last. Attention is
confined to segments, so only the global layer can carry a value from its pair
to its query. Here 4 pairs must pass through layers whose matrix state holds
about k*k/d = 2 associations.

Run with a step count as argument; 3000 steps take a few minutes per model.
"""

import sys
import time

import numpy as np

from tttlab.tasks import RecallTask, matrix_capacity
from tttlab.training import toy_schedule, train_toy

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 3000
task = RecallTask(T=48, n_pairs=12, n_segments=4)
print("vocabulary", task.vocab_size, "chance", task.chance, "capacity", matrix_capacity(k=8, d=8))

# one example: pair tokens in the first 12 positions, query tokens in the last 12
b = task.sample(np.random.default_rng(0), 1)
print("tokens ", b.tokens[0])
print("targets", b.targets[0])

models = {"ttt-mlp": {"eta": 1.0}, "mamba-like": {}, "local-attn": {}}
for variant, extra in models.items():
    t0 = time.time()
    rep = train_toy(variant, task, toy_schedule(task.T, steps, 1e-2, 1e-2), seed=0,
                    eval_interval=max(steps // 5, 1), model_kwargs={"d": 8, "k": 8, **extra})
    curve = " ".join(f"{e['accuracy']:.2f}" for e in rep.evals)
    print(f"{variant:<11} params {rep.config['n_params']:5d}  accuracy {curve}  ({time.time() - t0:.0f}s)")
