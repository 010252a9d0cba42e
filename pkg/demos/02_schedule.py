"""What each module does at every global iteration, and how old its gradients are.

Module k forwards batch t-k+1 and back-propagates batch t-2K+k+1, so the gap
between the forward and the update of a batch is 2(K-k). Lower modules start
with warmup iterations in which there is nothing to update yet.
"""
from fdg import RunConfig, batch_stream, build_network, gen_synthetic, make_partition, run_lockstep
from fdg.scheduler import staleness_by_module

K = 3
data = gen_synthetic("two-gaussians", 512, seed=0, features=8, separation=3.0)
net = build_network("dense:16,relu,dense:16,relu,dense:2,head", (8,), seed=0)
cfg = RunConfig(method="fdg", k=K, beta=0.5, lr=0.01, batch_size=32)
log = run_lockstep(net, make_partition(net, K), cfg, 12, batch_stream(data, 32))

print(f"{'t':>3} " + " ".join(f"{'module ' + str(k):>18}" for k in range(1, K + 1)))
for t in range(1, 13):
    cells = []
    for k in range(1, K + 1):
        row = next((r for r in log.rows if r.iteration == t and r.module == k), None)
        cells.append("-" if row is None else f"fwd {row.batch_forwarded} upd {row.batch_updated}")
    print(f"{t:>3} " + " ".join(f"{c:>18}" for c in cells))

print("\nstaleness per module:", staleness_by_module(log))
print("gradient shrink factor per module:", {k: cfg.beta ** (K - k) for k in range(1, K + 1)})
print("peak saved graphs per module:", log.meta["max_live_graphs"],
      "bound:", [2 * (K - k) + 1 for k in range(1, K + 1)])
