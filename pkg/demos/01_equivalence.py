"""Two sanity anchors for the decoupled scheduler.

First, a single module is just backprop: the K=1 run and plain SGD produce
bit-identical weights. Second, the threaded lockstep runner agrees row for row
with a single-threaded replay of the same schedule.
"""
import numpy as np

from fdg import RunConfig, build_network, batch_stream, gen_synthetic, make_partition, run_lockstep
from fdg import serial_emulate_fdg, train_bp, train_fdg

ARCH = "dense:32,relu,dense:32,relu,dense:32,relu,dense:4,head"

data = gen_synthetic("random-teacher", 640, seed=3, features=10, classes=4)

# K=1 collapses to backprop
a, b = build_network(ARCH, (10,), seed=0), build_network(ARCH, (10,), seed=0)
cfg = RunConfig(method="fdg", k=1, lr=0.05, momentum=0.9, batch_size=32)
bp = train_bp(a, data, cfg, 200)
fdg = train_fdg(b, make_partition(b, 1), data, cfg, 200)
print("K=1 vs BP, identical weights:", np.array_equal(a.get_flat(), b.get_flat()))
print("K=1 vs BP, first log divergence:", bp.first_divergence(fdg))

# threads vs serial replay
for K in (2, 3, 4):
    cfg = RunConfig(method="fdg", k=K, beta=0.6, lr=0.05, momentum=0.9, batch_size=32)
    a, b = build_network(ARCH, (10,), seed=K), build_network(ARCH, (10,), seed=K)
    part = make_partition(a, K)
    threaded = run_lockstep(a, part, cfg, 50, batch_stream(data, 32, seed=K))
    serial = serial_emulate_fdg(b, part, cfg, 50, batch_stream(data, 32, seed=K))
    print(f"K={K}: {len(threaded.rows)} rows, first divergence from serial replay:",
          threaded.first_divergence(serial))
