"""End-to-end training drivers sharing one config schema.

``train_bp`` is plain synchronous SGD and the reference for every equivalence
check. ``train_ddg`` keeps a synchronous forward but lets module ``k`` use a
gradient ``K-k`` iterations old. ``train_fdg`` runs the fully decoupled schedule.
"""
import json
import time

import numpy as np

from . import tensor as tn
from .data import batch_stream
from .errors import NonFiniteError
from .layers import SoftmaxCrossEntropy, module_backward, module_forward
from .optim import iterations_per_epoch, make_optimizer
from .packets import ActivationPacket, GradientPacket
from .partition import make_partition
from .scheduler import grad_arrays, run_freerunning, run_lockstep
from .trainlog import LogRow, TrainingLog


def _param_dtype(network):
    arrays = network.param_arrays()
    return arrays[0].dtype if arrays else np.float64


def evaluate(network, dataset, batch_size=1000):
    """Forward-only loss and top-1 error; nothing is retained between batches."""
    head = network.layers[-1]
    n = len(dataset)
    total_loss, wrong = 0.0, 0
    for start in range(0, n, batch_size):
        x = dataset.inputs[start:start + batch_size]
        y = dataset.labels[start:start + batch_size]
        logits = network.logits(np.asarray(x, dtype=_param_dtype(network)))
        p = SoftmaxCrossEntropy.probabilities(logits) if head.kind == "softmax-ce" else logits
        total_loss += -np.log(np.clip(p[np.arange(len(y)), y], 1e-300, None)).sum()
        wrong += int((p.argmax(axis=1) != y).sum())
    return {"loss": float(total_loss / n), "top1_error": wrong / n}


def _batches(train, config):
    return batch_stream(train, config.batch_size, seed=config.seed)


def _eval_due(config, t, ipe):
    every = config.eval_every or ipe
    return t % every == 0


def train_bp(network, train, config, T=None, test=None, batches=None):
    """Synchronous SGD over ``T`` iterations; one log row per iteration."""
    with tn.deterministic(config.deterministic):
        return _train_bp(network, train, config, T, test, batches)


def _train_bp(network, train, config, T, test, batches):
    T = T or config.iterations
    ipe = iterations_per_epoch(len(train), config.batch_size)
    opt = make_optimizer(config, ipe)
    batches = batches or _batches(train, config)
    dtype = tn.DTYPES[config.dtype]
    log = TrainingLog()
    t0 = time.perf_counter()
    for t in range(1, T + 1):
        w0 = time.perf_counter()
        batch = next(batches)
        x = np.asarray(batch.inputs, dtype=dtype)
        caches, h = [], x
        for layer in network.layers:
            cache = {}
            h = layer.forward(h, cache, labels=batch.labels if layer.kind == "softmax-ce" else None)
            caches.append(cache)
        loss = float(h)
        if not np.isfinite(loss):
            raise NonFiniteError(f"non-finite loss {loss} at iteration {t}")
        g = np.asarray(1.0, dtype=h.dtype)
        grads = [None] * len(network.layers)
        for i in range(len(network.layers) - 1, -1, -1):
            grads[i], g = network.layers[i].backward(g, caches[i])
        norm = tn.global_norm(grad_arrays(grads))
        opt.step_layers(network.layers, grads, t)
        log.rows.append(LogRow(
            iteration=t, module=1, batch_forwarded=batch.batch_id, batch_updated=batch.batch_id,
            loss=loss, grad_norm=norm, wall_ms=(time.perf_counter() - w0) * 1000.0, staleness=0,
            shrink=1.0, live_graphs=1,
            param_digest=tn.digest(network.param_arrays()) if config.record_digests else "",
        ))
        if test is not None and _eval_due(config, t, ipe):
            r = evaluate(network, test)
            log.evals.append((t, r["loss"], r["top1_error"]))
    log.meta.update(method="bp", K=1, beta=1.0, wall_s=time.perf_counter() - t0)
    return log


def train_ddg(network, partition, train, config, T=None, test=None, batches=None):
    """Synchronous forward, then module-parallel backward where module k lags by ``K-k``.

    A reference point for backward-only unlocking; single-threaded.
    """
    with tn.deterministic(config.deterministic):
        return _train_ddg(network, partition, train, config, T, test, batches)


def _train_ddg(network, partition, train, config, T, test, batches):
    T = T or config.iterations
    K = partition.K
    ipe = iterations_per_epoch(len(train), config.batch_size)
    modules = partition.split(network.layers)
    opts = [make_optimizer(config, ipe) for _ in modules]
    offsets = [b - 1 for b in partition.boundaries[:-1]]
    batches = batches or _batches(train, config)
    dtype = tn.DTYPES[config.dtype]
    graphs = [dict() for _ in modules]
    inbox = {}  # module index -> GradientPacket emitted last iteration
    log = TrainingLog()
    t0 = time.perf_counter()
    for t in range(1, T + 1):
        batch = next(batches)
        packet = ActivationPacket(batch.batch_id, np.asarray(batch.inputs, dtype=dtype))
        for i, layers in enumerate(modules):
            packet, graphs[i][batch.batch_id] = module_forward(
                layers, packet, i + 1, batch.labels if i == K - 1 else None, forward_step=t)
        loss = float(packet.tensor)
        if not np.isfinite(loss):
            raise NonFiniteError(f"non-finite loss {loss} at iteration {t}")
        outbox = {}
        for i in range(K - 1, -1, -1):
            k = i + 1
            row = LogRow(iteration=t, module=k, batch_forwarded=batch.batch_id)
            if k == K:
                incoming, shrink = GradientPacket(batch.batch_id, np.asarray(1.0, dtype=dtype), K + 1), 1.0
                row.loss = loss
            else:
                incoming, shrink = inbox.pop(i, None), config.beta
            if incoming is None:
                row.batch_updated = "warmup"
            else:
                graph = graphs[i].pop(incoming.batch_id)
                res = module_backward(modules[i], incoming, graph, shrink)
                row.grad_norm = tn.global_norm(grad_arrays(res.param_grads))
                opts[i].step_layers(modules[i], res.param_grads, t, offset=offsets[i])
                row.batch_updated = incoming.batch_id
                row.staleness = t - graph.forward_step
                row.shrink = config.beta ** (K - k)
                if i > 0:
                    outbox[i - 1] = GradientPacket(res.batch_id, res.input_grad, k)
            row.live_graphs = len(graphs[i]) + (0 if incoming is None else 1)
            if config.record_digests:
                row.param_digest = tn.digest([p for l in modules[i] for p in l.params.values()])
            log.rows.append(row)
        inbox = outbox
        if test is not None and _eval_due(config, t, ipe):
            r = evaluate(network, test)
            log.evals.append((t, r["loss"], r["top1_error"]))
    log.sort()
    log.meta.update(method="ddg", K=K, beta=config.beta, wall_s=time.perf_counter() - t0)
    return log


def train_fdg(network, partition, train, config, T=None, test=None, batches=None, hooks=()):
    """Fully decoupled training in lockstep or free-running mode (``config.mode``)."""
    T = T or config.iterations
    ipe = iterations_per_epoch(len(train), config.batch_size)
    batches = batches or _batches(train, config)
    if config.mode == "freerun":
        log, report = run_freerunning(network, partition, config, T, batches, iters_per_epoch=ipe)
        log.meta["throughput"] = report.to_dict()
    else:
        hooks = list(hooks)
        evals = []
        if test is not None:
            def eval_hook(t, workers):
                if _eval_due(config, t, ipe):
                    r = evaluate(network, test)
                    evals.append((t, r["loss"], r["top1_error"]))
            hooks.append(eval_hook)
        log = run_lockstep(network, partition, config, T, batches, hooks=hooks, iters_per_epoch=ipe)
        log.evals = evals
    log.meta.update(method="fdg")
    return log


def train(network, train_set, config, T=None, test=None, batches=None):
    """Dispatch on ``config.method``; returns the log."""
    if config.method == "bp":
        return train_bp(network, train_set, config, T, test, batches)
    partition = make_partition(network, config.k, config.partition)
    if config.method == "ddg":
        return train_ddg(network, partition, train_set, config, T, test, batches)
    return train_fdg(network, partition, train_set, config, T, test, batches)


def summarize(config, log, network, test, wall_s=None, bp_wall_s=None):
    """Final summary record, as written to ``summary.json``."""
    result = evaluate(network, test) if test is not None else {"loss": None, "top1_error": None}
    wall = wall_s if wall_s is not None else log.meta.get("wall_s")
    return {
        "method": config.method,
        "K": config.k if config.method != "bp" else 1,
        "beta": config.beta,
        "final_loss": log.final_loss(),
        "test_loss": result["loss"],
        "top1_error": result["top1_error"],
        "wall_seconds": wall,
        "speedup_vs_bp": (bp_wall_s / wall) if bp_wall_s and wall else None,
    }


def write_summary(summary, path):
    with open(path, "w") as f:
        json.dump(summary, f, indent=2)
