"""Splitting a layer stack into K contiguous modules, plus the delay schedule."""
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ModulePartition:
    """Module k (1-based) owns layers ``boundaries[k-1] .. boundaries[k]-1`` (1-based)."""

    boundaries: tuple

    def __post_init__(self):
        b = self.boundaries
        if len(b) < 2 or b[0] != 1 or any(x >= y for x, y in zip(b, b[1:])):
            raise ValueError(f"invalid module boundaries {b}")

    @property
    def K(self):
        return len(self.boundaries) - 1

    @property
    def n_layers(self):
        return self.boundaries[-1] - 1

    def layer_range(self, k):
        """0-based slice of the layer list owned by module k."""
        if not 1 <= k <= self.K:
            raise IndexError(f"module {k} outside 1..{self.K}")
        return slice(self.boundaries[k - 1] - 1, self.boundaries[k] - 1)

    def sizes(self):
        return [y - x for x, y in zip(self.boundaries, self.boundaries[1:])]

    def split(self, layers):
        if len(layers) != self.n_layers:
            raise ValueError(f"partition covers {self.n_layers} layers, got {len(layers)}")
        return [layers[self.layer_range(k)] for k in range(1, self.K + 1)]


def _from_sizes(sizes):
    bounds = [1]
    for s in sizes:
        bounds.append(bounds[-1] + s)
    return ModulePartition(tuple(bounds))


def _min_max_split(weights, K):
    """Contiguous split of ``weights`` into K non-empty parts minimizing the max part sum.

    Dynamic programming; ties resolve to the earliest cut positions.
    """
    L = len(weights)
    prefix = np.concatenate([[0], np.cumsum(weights)])
    INF = float("inf")
    # best[j][i]: minimal max-sum splitting the first i layers into j parts
    best = [[INF] * (L + 1) for _ in range(K + 1)]
    cut = [[0] * (L + 1) for _ in range(K + 1)]
    best[0][0] = 0
    for j in range(1, K + 1):
        for i in range(j, L - (K - j) + 1):
            for c in range(j - 1, i):
                cost = max(best[j - 1][c], prefix[i] - prefix[c])
                if cost < best[j][i]:
                    best[j][i], cut[j][i] = cost, c
    sizes, i = [], L
    for j in range(K, 0, -1):
        c = cut[j][i]
        sizes.append(i - c)
        i = c
    return sizes[::-1]


def make_partition(layers, K, strategy="even-layers"):
    """Partition ``layers`` (a Network or list of layers) into K modules.

    ``even-layers`` balances layer counts (earlier modules take the remainder);
    ``even-params`` minimizes the largest per-module parameter count.
    """
    layers = list(getattr(layers, "layers", layers))
    L = len(layers)
    if not 1 <= K <= L:
        raise ValueError(f"need 1 <= K <= L, got K={K}, L={L}")
    heads = [i for i, layer in enumerate(layers) if layer.kind == "softmax-ce"]
    if heads and heads != [L - 1]:
        raise ValueError("softmax-ce head must be the last layer so module K can own it")
    if strategy == "even-layers":
        sizes = [len(a) for a in np.array_split(np.arange(L), K)]
    elif strategy == "even-params":
        sizes = _min_max_split([layer.param_count for layer in layers], K)
    else:
        raise ValueError(f"unknown partition strategy {strategy!r}")
    return _from_sizes(sizes)


def delay_of(k, K):
    """Gradient delay, in iterations, seen by module k of K."""
    if not 1 <= k <= K:
        raise ValueError(f"module {k} outside 1..{K}")
    return 2 * (K - k)


def gradient_batch_index(k, K, t):
    """Batch whose gradient module k consumes at its local iteration t.

    Values below 1 mean no gradient has reached the module yet.
    """
    if t < 1:
        raise ValueError(f"iterations start at 1, got {t}")
    return t - 2 * (K - k)


def forward_batch_index(k, t):
    """Batch module k forwards at global iteration t (< 1 while the pipeline fills)."""
    return t - k + 1


def local_iteration(k, t):
    """Module k's own clock: its first active global iteration is k."""
    return t - k + 1
