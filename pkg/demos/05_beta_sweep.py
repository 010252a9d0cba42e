"""Does shrinking the stale gradients help? A small sweep over beta.

Three modules, median over seeds. Beta is picked on a validation split and
the chosen value is then compared against beta=1 and plain backprop on test.
"""
import numpy as np

from fdg import RunConfig, build_network, evaluate, gen_synthetic, train, train_test_split

full = gen_synthetic("random-teacher", 4000, seed=11, features=10, classes=4)
rest, test = train_test_split(full, 1000, seed=0)
train_set, val = train_test_split(rest, 500, seed=1)
ARCH = "dense:64,relu,dense:64,relu,dense:4,head"


def run(method, beta, seeds=range(3), T=1500):
    errs = []
    for seed in seeds:
        cfg = RunConfig(method=method, k=3, beta=beta, lr=0.05, momentum=0.9, weight_decay=5e-4,
                        batch_size=64, seed=seed)
        net = build_network(ARCH, (10,), seed=seed)
        train(net, train_set, cfg, T)
        errs.append((evaluate(net, val)["top1_error"], evaluate(net, test)["top1_error"]))
    return tuple(np.median(errs, axis=0))


bp = run("bp", 1.0)
print(f"BP          val {bp[0]:.3f}  test {bp[1]:.3f}")
results = {}
for beta in (0.2, 0.4, 0.6, 0.8, 1.0):
    results[beta] = run("fdg", beta)
    print(f"FDG b={beta:.1f}   val {results[beta][0]:.3f}  test {results[beta][1]:.3f}")
best = min(results, key=lambda b: (results[b][0], -b))
print(f"\nbeta chosen on validation: {best}")
