"""
Linear versus quadratic: timing every sequence layer
=====================================================

Forward-pass wall time against sequence length, on a log-log scale. Softmax
attention over the whole sequence grows with slope near 2; the recurrent
layers and the block-local attentions grow with slope near 1.
"""

from tttlab.bench import BENCH_VARIANTS, slopes, throughput_bench

# lengths spanning an 8x range; small enough to finish in under a minute
T_list = [128, 256, 512, 1024]
rows = throughput_bench(BENCH_VARIANTS, T_list, repeats=5, d=32, segment_len=64, window=64, b=16)

print(f"{'variant':<12}" + "".join(f"{T:>10}" for T in T_list) + "     slope")
for v, s in slopes(rows).items():
    ms = [r["median_ms"] for r in rows if r["variant"] == v]
    print(f"{v:<12}" + "".join(f"{m:>9.2f}ms"[-10:] for m in ms) + f"   {s:6.2f}")

# the same table is what `tttlab bench` writes as CSV, e.g.
#   tttlab bench --lengths 256 512 1024 2048 --d 64 --out runs/
