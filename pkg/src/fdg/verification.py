"""Independent references and monitors.

* :func:`grad_check` compares analytic gradients with central differences.
* :func:`serial_emulate_fdg` replays the lockstep schedule in one thread straight
  from the batch-index formulas, without the worker/queue machinery.
* :func:`estimate_constants`, :func:`run_delayed_sgd` and :func:`descent_monitor`
  check the expected-descent inequality of delayed, shrunk SGD:
  ``E f(theta[t+1]) - E f(theta[t]) <= -(lr/2) Z1 + lr**2 Z2``.
"""
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .optim import make_optimizer
from .partition import gradient_batch_index
from .trainlog import WARMUP, LogRow, TrainingLog


# -- finite differences ----------------------------------------------------

def _rel_err(a, n):
    denom = np.linalg.norm(a) + np.linalg.norm(n)
    return 0.0 if denom == 0 else float(np.linalg.norm(a - n) / denom)


def grad_check(model, x, labels=None, eps=1e-5, tol=1e-6, max_coords=50, seed=0,
               check_input=False):
    """Central-difference check of every parameter (sampled when large).

    ``model`` is a Network or a list of layers. Without a head the scalar checked
    is ``sum(r * output)`` for a fixed random ``r``. The error per tensor is
    ``|a - n| / (|a| + |n|)`` over the sampled coordinates.
    """
    if not 1e-6 <= eps <= 1e-4:
        raise ValueError(f"eps must lie in [1e-6, 1e-4], got {eps}")
    layers = list(getattr(model, "layers", model))
    x = np.asarray(x)
    if x.dtype != np.float64 or any(p.dtype != np.float64 for l in layers for p in l.params.values()):
        raise ValueError("gradient checks need float64 inputs and parameters")
    rng = np.random.default_rng(seed)
    has_head = bool(layers) and layers[-1].kind == "softmax-ce"

    def run(inp, caches=None):
        h = inp
        for layer in layers:
            cache = {}
            h = layer.forward(h, cache, labels=labels if layer.kind == "softmax-ce" else None)
            if caches is not None:
                caches.append(cache)
        return h

    caches = []
    out = run(x, caches)
    probe = None if has_head else rng.normal(size=out.shape)

    def scalar(inp):
        h = run(inp)
        return float(h) if has_head else float(np.sum(probe * h))

    g = np.asarray(1.0) if has_head else probe
    analytic = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        analytic[i], g = layers[i].backward(g, caches[i])
    input_grad = g

    entries = []
    for i, layer in enumerate(layers):
        for name in list(layer.params):
            p = layer.params[name]
            coords = np.arange(p.size)
            if p.size > max_coords:
                coords = rng.choice(p.size, max_coords, replace=False)
            num = np.empty(len(coords))
            for j, c in enumerate(coords):
                plus, minus = p.copy(), p.copy()
                plus.flat[c] += eps
                minus.flat[c] -= eps
                layer.params[name] = plus
                fp = scalar(x)
                layer.params[name] = minus
                fm = scalar(x)
                num[j] = (fp - fm) / (2 * eps)
            layer.params[name] = p
            a = analytic[i][name].ravel()[coords]
            entries.append({"layer": i, "kind": layer.kind, "param": name,
                            "coords": len(coords), "rel_err": _rel_err(a, num)})
    if check_input:
        coords = np.arange(x.size)
        if x.size > max_coords:
            coords = rng.choice(x.size, max_coords, replace=False)
        num = np.empty(len(coords))
        for j, c in enumerate(coords):
            plus, minus = x.copy(), x.copy()
            plus.flat[c] += eps
            minus.flat[c] -= eps
            num[j] = (scalar(plus) - scalar(minus)) / (2 * eps)
        entries.append({"layer": -1, "kind": "input", "param": "x", "coords": len(coords),
                        "rel_err": _rel_err(input_grad.ravel()[coords], num)})
    worst = max((e["rel_err"] for e in entries), default=0.0)
    return {"max_rel_err": worst, "pass": worst < tol, "tol": tol, "eps": eps,
            "checked": sum(e["coords"] for e in entries), "entries": entries}


# -- serial emulation ------------------------------------------------------

def serial_emulate_fdg(network, partition, config, T=None, batches=None, iters_per_epoch=1):
    """Single-threaded replay of the lockstep schedule; a bit-exact reference.

    Every iteration visits modules K down to 1. Packets sent during iteration t
    become visible at t+1.
    """
    if not config.deterministic:
        raise ValueError("the serial reference is only meaningful in deterministic mode")
    T = T or config.iterations
    K = partition.K
    dtype = tn.DTYPES[config.dtype]
    modules = partition.split(network.layers)
    offsets = [b - 1 for b in partition.boundaries[:-1]]
    opts = [make_optimizer(config, iters_per_epoch) for _ in modules]
    acts, grads, labels = {}, {}, {}
    saved = [dict() for _ in modules]
    rows = []

    for t in range(1, T + 1):
        batch = next(batches)
        acts[(1, batch.batch_id)] = np.asarray(batch.inputs, dtype=dtype)
        labels[batch.batch_id] = batch.labels
        sent_acts, sent_grads = {}, {}
        for k in range(K, 0, -1):
            if t < k:
                continue
            i = k - 1
            layers = modules[i]
            local = t - k + 1
            b_fwd = t - k + 1
            b_bwd = t - 2 * K + k + 1
            row = LogRow(iteration=t, module=k, batch_forwarded=b_fwd)
            peak = 0

            def forward():
                h = acts.pop((k, b_fwd))
                caches = []
                for layer in layers:
                    cache = {}
                    h = layer.forward(h, cache, labels=labels[b_fwd] if layer.kind == "softmax-ce" else None)
                    caches.append(cache)
                saved[i][b_fwd] = (caches, local)
                return h

            def backward(b, g, shrink):
                caches, fwd_local = saved[i].pop(b)
                if shrink != 1.0:
                    g = g * g.dtype.type(shrink)
                layer_grads = [None] * len(layers)
                for j in range(len(layers) - 1, -1, -1):
                    layer_grads[j], g = layers[j].backward(g, caches[j])
                row.grad_norm = tn.global_norm([a for lg in layer_grads for a in lg.values()])
                opts[i].step_layers(layers, layer_grads, local, offset=offsets[i])
                row.batch_updated = b
                row.staleness = local - fwd_local
                row.shrink = config.beta ** (K - k)
                if k > 1:
                    sent_grads[(k - 1, b)] = g

            if k == K:
                h = forward()
                peak = len(saved[i])
                row.loss = float(h)
                backward(b_fwd, np.asarray(1.0, dtype=h.dtype), 1.0)
            else:
                def back_step():
                    if b_bwd < 1:
                        row.batch_updated = WARMUP
                    else:
                        backward(b_bwd, grads.pop((k, b_bwd)), config.beta)

                if config.ordering == "backward-first":
                    back_step()
                    sent_acts[(k + 1, b_fwd)] = forward()
                    peak = len(saved[i])
                else:
                    sent_acts[(k + 1, b_fwd)] = forward()
                    peak = len(saved[i])
                    back_step()
            row.live_graphs = peak
            if config.record_digests:
                row.param_digest = tn.digest([p for l in layers for p in l.params.values()])
            rows.append(row)
        acts.update(sent_acts)
        grads.update(sent_grads)
    log = TrainingLog(rows).sort()
    log.meta.update(mode="serial", K=K, beta=config.beta, ordering=config.ordering)
    return log


def oracle_equivalence(log, reference):
    """Compare two logs row by row, ignoring wall time."""
    first = log.first_divergence(reference)
    return {"bit_exact": first is None, "first_divergence": first,
            "rows": len(log.rows), "reference_rows": len(reference.rows)}


# -- constants and objectives ----------------------------------------------

@dataclass
class TheoremConstants:
    L_hat: float
    M_hat: float
    samples: int
    scale: float


class LeastSquaresObjective:
    """``f(theta) = mean((X theta - y)**2) / 2``; Hessian ``X.T X / n``."""

    def __init__(self, X, y=None, batch_size=32, theta0=None):
        self.X = np.asarray(X, dtype=np.float64)
        self.n, self.dim = self.X.shape
        self.y = np.zeros(self.n) if y is None else np.asarray(y, dtype=np.float64)
        self.batch_size = batch_size
        self.theta0 = np.zeros(self.dim) if theta0 is None else np.asarray(theta0, dtype=np.float64)

    @property
    def hessian(self):
        return self.X.T @ self.X / self.n

    def sample_batch(self, rng):
        return rng.choice(self.n, self.batch_size, replace=False)

    def _rows(self, batch):
        return (self.X, self.y) if batch is None else (self.X[batch], self.y[batch])

    def loss(self, theta, batch=None):
        X, y = self._rows(batch)
        r = X @ theta - y
        return 0.5 * float(r @ r) / len(y)

    def grad(self, theta, batch=None):
        X, y = self._rows(batch)
        return X.T @ (X @ theta - y) / len(y)


class NetworkObjective:
    """A network's mean loss over a dataset, as a function of its flat parameter vector."""

    def __init__(self, network, dataset, batch_size=32, full_size=None):
        self.network = network
        self.dataset = dataset
        self.batch_size = batch_size
        n = len(dataset)
        self.full_idx = np.arange(n if full_size is None else min(full_size, n))
        self.theta0 = network.get_flat()

    def sample_batch(self, rng):
        return rng.choice(len(self.dataset), self.batch_size, replace=False)

    def _eval(self, theta, batch):
        idx = self.full_idx if batch is None else batch
        self.network.set_flat(theta)
        loss, grads, _ = self.network.loss_and_grads(self.dataset.inputs[idx], self.dataset.labels[idx])
        flat = [g[name].ravel() for layer, g in zip(self.network.layers, grads) for name in layer.params]
        return loss, (np.concatenate(flat) if flat else np.zeros(0))

    def loss(self, theta, batch=None):
        return self._eval(theta, batch)[0]

    def grad(self, theta, batch=None):
        return self._eval(theta, batch)[1]


def estimate_constants(objective, samples=50, scale=1e-3, seed=0, theta=None):
    """Empirical lower bounds for the gradient Lipschitz constant and second moment.

    ``M_hat`` is the largest squared mini-batch gradient norm over ``samples``
    draws. ``L_hat`` is the largest ratio ``|g(a) - g(b)| / |a - b|`` over
    ``samples`` perturbation pairs around ``theta``; each new perturbation points
    along the previous gradient difference, which steers the pairs toward the
    direction of largest curvature.
    """
    if samples < 10:
        raise ValueError(f"need at least 10 samples, got {samples}")
    rng = np.random.default_rng(seed)
    theta = objective.theta0 if theta is None else np.asarray(theta, dtype=np.float64)
    M = 0.0
    for _ in range(samples):
        g = objective.grad(theta, objective.sample_batch(rng))
        M = max(M, float(g @ g))
    g0 = objective.grad(theta)
    if M == 0.0 and not np.any(g0):
        raise ValueError("all sampled gradients are zero; constants are undefined")
    u = rng.normal(size=theta.shape)
    L = 0.0
    for _ in range(samples):
        u /= np.linalg.norm(u)
        step = scale * u
        diff = objective.grad(theta + step) - g0
        dn = float(np.linalg.norm(diff))
        L = max(L, dn / float(np.linalg.norm(step)))
        u = diff if dn > 0 else rng.normal(size=theta.shape)
    if L == 0.0 or M == 0.0:
        raise ValueError("degenerate gradients: estimated constant is zero")
    return TheoremConstants(L_hat=L, M_hat=M, samples=samples, scale=scale)


# -- expected-descent monitor ------------------------------------------------

@dataclass
class Checkpoint:
    """State at the start of iteration ``t`` and the loss after its update."""

    t: int
    lr: float
    loss: float
    block_sq_norms: list  # full-batch squared gradient norm per module
    next_loss: float = None
    consumed: list = None  # batch index consumed per module, None during warmup


@dataclass
class MonitorLog:
    checkpoints: list
    K: int
    beta: float
    meta: dict = field(default_factory=dict)


@dataclass
class DescentRecord:
    t: int
    Z1: float
    Z2: float
    lr: float
    lhs: float
    rhs: float
    ceiling: float
    satisfied: bool
    lr_admissible: bool
    zero_gradient: bool


def geometric_term(beta, K):
    """``sum_k beta**(K-k)`` = ``(beta**K - 1)/(beta - 1)``; exactly K at beta = 1."""
    if beta == 1.0:
        return float(K)
    return (beta ** K - 1.0) / (beta - 1.0)


def z_terms(block_sq_norms, constants, beta, K, t):
    if len(block_sq_norms) != K:
        raise ValueError(f"expected {K} per-module gradient norms, got {len(block_sq_norms)}")
    z1 = sum(beta ** (K - k) * block_sq_norms[k - 1] for k in range(1, K + 1))
    LM = constants.L_hat * constants.M_hat
    stale = sum(beta ** (3 * (K - k)) * (t - max(0, gradient_batch_index(k, K, t)))
                for k in range(1, K + 1))
    return z1, LM * geometric_term(beta, K) + LM * stale


def admissible_lr(block_sq_norms, constants, beta, K, t):
    """Largest step keeping the bound's right side non-positive: ``min(1/L, Z1/(2 Z2))``."""
    z1, z2 = z_terms(block_sq_norms, constants, beta, K, t)
    return min(1.0 / constants.L_hat, z1 / (2.0 * z2))


def descent_monitor(log, constants, beta=None, K=None):
    """Evaluate both sides of the expected-descent bound at every checkpoint.

    The left side is a single-trajectory proxy (probe-set loss difference), so the
    verdict is a satisfaction rate, never a per-step guarantee.
    """
    beta = log.beta if beta is None else beta
    K = log.K if K is None else K
    records = []
    for c in log.checkpoints:
        if c.block_sq_norms is None or c.next_loss is None:
            raise ValueError(f"checkpoint {c.t} lacks gradient norms or the post-update loss")
        if c.consumed is not None:
            for k in range(1, K + 1):
                d = gradient_batch_index(k, K, c.t)
                expected = d if d >= 1 else None
                if c.consumed[k - 1] != expected:
                    raise ValueError(f"t={c.t} module {k}: consumed {c.consumed[k - 1]}, "
                                     f"schedule says {expected}")
        z1, z2 = z_terms(c.block_sq_norms, constants, beta, K, c.t)
        ceiling = min(1.0 / constants.L_hat, z1 / (2.0 * z2))
        lhs = c.next_loss - c.loss
        rhs = -0.5 * c.lr * z1 + c.lr ** 2 * z2
        records.append(DescentRecord(c.t, z1, z2, c.lr, lhs, rhs, ceiling, lhs <= rhs,
                                     c.lr <= ceiling, z1 == 0.0))
    n = len(records)
    sat = sum(r.satisfied for r in records)
    return {
        "records": records,
        "checkpoints": n,
        "satisfaction_rate": sat / n if n else float("nan"),
        "violation_fraction": (n - sat) / n if n else float("nan"),
        "lr_admissible_rate": sum(r.lr_admissible for r in records) / n if n else float("nan"),
        "admissible_lr": min((r.ceiling for r in records), default=float("nan")),
        "zero_gradient_checkpoints": [r.t for r in records if r.zero_gradient],
        "L_hat": constants.L_hat,
        "M_hat": constants.M_hat,
        "verdict": "consistent with the expected-descent bound" if n and sat / n >= 0.95
        else "inconsistent",
    }


def module_blocks(sizes):
    """Index arrays of consecutive blocks with the given sizes."""
    out, start = [], 0
    for s in sizes:
        out.append(np.arange(start, start + s))
        start += s
    return out


def run_delayed_sgd(objective, K, T, beta=1.0, lr=None, lr_rule=None, blocks=None, seed=0):
    """Delayed, shrunk SGD on a flat parameter vector split into K blocks.

    Block k moves along ``beta**(K-k)`` times the stochastic gradient that was
    evaluated at ``theta[d]`` on batch ``d``, with ``d = t - 2(K-k)``; no update
    while ``d < 1``. ``lr_rule(t, block_sq_norms)`` may replace a fixed ``lr``.
    Returns ``(MonitorLog, final theta)``.
    """
    if (lr is None) == (lr_rule is None):
        raise ValueError("give exactly one of lr and lr_rule")
    rng = np.random.default_rng(seed)
    theta = objective.theta0.copy()
    if blocks is None:
        blocks = np.array_split(np.arange(theta.size), K)
    history = {}
    checkpoints = []
    horizon = 2 * (K - 1)
    for t in range(1, T + 1):
        history[t] = objective.grad(theta, objective.sample_batch(rng))
        full = objective.grad(theta)
        sq = [float(full[b] @ full[b]) for b in blocks]
        loss = objective.loss(theta)
        gamma = lr_rule(t, sq) if lr_rule is not None else lr
        nxt = theta.copy()
        consumed = []
        for k in range(1, K + 1):
            d = gradient_batch_index(k, K, t)
            if d < 1:
                consumed.append(None)
                continue
            b = blocks[k - 1]
            nxt[b] -= gamma * beta ** (K - k) * history[d][b]
            consumed.append(d)
        theta = nxt
        checkpoints.append(Checkpoint(t, gamma, loss, sq, objective.loss(theta), consumed))
        history.pop(t - horizon, None)
    return MonitorLog(checkpoints, K, beta), theta


class NetworkProbe:
    """Lockstep hook recording full-batch loss and per-module gradient norms each iteration.

    Call :meth:`start` before training; :meth:`monitor_log` pairs consecutive states.
    """

    def __init__(self, network, partition, inputs, labels, lr_of_t):
        self.network = network
        self.partition = partition
        self.inputs, self.labels = inputs, labels
        self.lr_of_t = lr_of_t
        self.states = []

    def _measure(self):
        loss, grads, _ = self.network.loss_and_grads(self.inputs, self.labels)
        sq = []
        for k in range(1, self.partition.K + 1):
            layer_slice = self.partition.layer_range(k)
            total = 0.0
            for lg in grads[layer_slice]:
                for g in lg.values():
                    total += float(tn.reduce("l2sq", g))
            sq.append(total)
        return loss, sq

    def start(self):
        self.states = [self._measure()]

    def __call__(self, t, workers=None):
        self.states.append(self._measure())

    def monitor_log(self, beta):
        cps = []
        for t in range(1, len(self.states)):
            loss, sq = self.states[t - 1]
            cps.append(Checkpoint(t, self.lr_of_t(t), loss, sq, self.states[t][0]))
        return MonitorLog(cps, self.partition.K, beta)


def _quadratic_workload(seed, K=2, beta=0.8, T=500):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(400, 8)) * np.linspace(0.5, 2.0, 8)
    obj = LeastSquaresObjective(X, batch_size=20, theta0=rng.normal(size=8))
    constants = estimate_constants(obj, seed=seed)
    log, _ = run_delayed_sgd(
        obj, K, T, beta=beta, seed=seed,
        lr_rule=lambda t, sq: 0.5 * admissible_lr(sq, constants, beta, K, t))
    return descent_monitor(log, constants)


def verification_report(seed=0, iterations=30):
    """Run the built-in suites on small fixed workloads; returns a JSON-ready dict."""
    # imported here so the oracles above stay free of the threaded runtime
    from .config import RunConfig
    from .data import batch_stream, gen_synthetic
    from .layers import build_network
    from .partition import make_partition
    from .scheduler import run_lockstep
    from .trainers import train_bp

    rng = np.random.default_rng(seed)
    checks = []
    net = build_network("dense:6,relu,dense:3,head", (4,), seed=seed)
    checks.append(grad_check(net, rng.normal(size=(5, 4)), np.array([0, 1, 2, 0, 1]), seed=seed,
                             check_input=True))
    net = build_network("conv:3,relu,flatten,dense:3,head", (2, 5, 5), seed=seed)
    checks.append(grad_check(net, rng.normal(size=(3, 2, 5, 5)), np.array([0, 1, 2]), seed=seed,
                             check_input=True))
    worst = max(c["max_rel_err"] for c in checks)

    ds = gen_synthetic("random-teacher", 400, seed=seed, features=10, classes=4)
    arch = "dense:16,relu,dense:16,relu,dense:4,head"
    equivalence = []
    for K in (1, 2, 3):
        cfg = RunConfig(method="fdg", k=K, beta=0.5, batch_size=32, iterations=iterations, seed=seed)
        a = build_network(arch, (10,), seed=seed)
        b = a.copy()
        part = make_partition(a, K)
        log = run_lockstep(a, part, cfg, iterations, batch_stream(ds, 32, seed=seed))
        if K == 1:
            ref = train_bp(b, ds, cfg.replace(method="bp"), iterations,
                           batches=batch_stream(ds, 32, seed=seed))
        else:
            ref = serial_emulate_fdg(b, part, cfg, iterations, batch_stream(ds, 32, seed=seed))
        result = oracle_equivalence(log, ref)
        result.update(K=K, memory_bound_ok=all(m <= g for m, g in zip(log.meta["max_live_graphs"],
                                                                      log.meta["graph_bounds"])))
        equivalence.append(result)

    theorem = _quadratic_workload(seed)
    report = {
        "grad-check": {"max-rel-err": worst, "pass": worst < 1e-6},
        "oracle-equivalence": {
            "bit-exact": all(e["bit_exact"] for e in equivalence),
            "first-divergence": next((e["first_divergence"] for e in equivalence
                                      if e["first_divergence"] is not None), None),
            "runs": equivalence,
        },
        "theorem": {
            "L-hat": theorem["L_hat"],
            "M-hat": theorem["M_hat"],
            "admissible-lr": theorem["admissible_lr"],
            "satisfaction-rate": theorem["satisfaction_rate"],
            "verdict": theorem["verdict"],
        },
    }
    report["pass"] = bool(report["grad-check"]["pass"] and report["oracle-equivalence"]["bit-exact"]
                          and all(e["memory_bound_ok"] for e in equivalence)
                          and theorem["satisfaction_rate"] >= 0.95)
    return report
