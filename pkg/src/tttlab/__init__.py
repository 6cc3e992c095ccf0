"""Test-time-training sequence layers with a small reverse-mode autodiff engine.

Modules:
    autodiff   tensors, differentiable primitives, ``grad`` (composable to any order)
    ttt        TTT-Linear / TTT-MLP layers, mini-batch scans, gating, bidirection
    baselines  masked softmax attention, decayed linear attention, gated delta rule
    sharded    tensor-parallel TTT-MLP scan over worker threads
    pipeline   storyboard parsing and interleaved text/video sequences
    training   AdamW, parameter groups, stage schedules, toy training runs
    tasks, models, bench, verify, report, cli
"""

from .autodiff import Tensor, grad
from .ttt import (TTTConfig, TTTParams, bidirectional, gated_residual, init_ttt_params, inner_loss,
                  inner_step, modified_block, scan_minibatch, scan_sequential, wrapper_f)

__version__ = "0.1.0"
