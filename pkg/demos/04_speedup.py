"""Idealised speedups of the decoupling methods and a simulated pipeline.

With work split evenly and free communication, every module stays busy and
throughput grows K-fold. A fixed per-packet latency eats into that.
"""
from fdg.speedup import METHODS, CostProfile, ideal_speedup, simulate_pipeline

Tf, Tb = 1.0, 2.0
print("K   " + "  ".join(f"{m:>6}" for m in METHODS))
for K in (1, 2, 4, 8):
    print(f"{K:<3} " + "  ".join(f"{ideal_speedup(m, K, Tf, Tb, 0.1):6.2f}" for m in METHODS))

print("\nsimulated free-running pipeline, T=1000")
for Tc in (0.0, 0.05, 0.2):
    for K in (2, 4):
        _, s = simulate_pipeline(CostProfile.uniform(K, Tf, Tb, Tc), 1000)
        util = ", ".join(f"{u:.2f}" for u in s["utilization"])
        print(f"Tc={Tc:<5} K={K}  speedup {s['speedup']:.3f}  utilization [{util}]")
