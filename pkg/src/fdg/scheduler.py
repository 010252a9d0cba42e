"""Drives the fully decoupled schedule: one worker per module, delayed packets between them.

At global iteration ``t`` module ``k`` forwards batch ``t-k+1`` and back-propagates
batch ``t-2K+k+1``, so a batch's gradient reaches module ``k`` exactly ``2(K-k)``
iterations after the module forwarded it. Module ``k < K`` shrinks each incoming
gradient by ``beta`` before using it; the top module never shrinks its own loss
gradient, which gives module ``k`` a cumulative factor ``beta**(K-k)``.

Two executors share :class:`ModuleWorker`:

* :func:`run_lockstep` runs all workers concurrently with a barrier after every
  iteration. Results are bit-identical across runs and to the serial emulator.
* :func:`run_freerunning` drops the barrier. Workers move as soon as their queue
  preconditions hold; bounded queues and a cap on live saved graphs keep the
  staleness at or below the lockstep value.
"""
import queue
import threading
import time

import numpy as np
from threadpoolctl import threadpool_limits

from . import tensor as tn
from .errors import DeadlockError, NonFiniteError, ScheduleError
from .layers import module_backward, module_forward
from .optim import make_optimizer
from .packets import ActivationPacket, GradientPacket, LabelPacket
from .partition import forward_batch_index, gradient_batch_index, local_iteration
from .trainlog import WARMUP, LogRow, ThroughputReport, TrainingLog

_DONE = object()


def grad_arrays(layer_grads):
    return [g for lg in layer_grads for g in lg.values()]


class ModuleWorker:
    """Owns the layers, optimizer state and saved graphs of one module."""

    def __init__(self, k, K, layers, optimizer, beta=1.0, ordering="backward-first",
                 record_digests=True, layer_offset=0):
        if not 0.0 < beta <= 1.0:
            raise ValueError(f"beta must lie in (0, 1], got {beta}")
        self.k, self.K = k, K
        self.layers = layers
        self.optimizer = optimizer
        self.beta = beta
        self.ordering = ordering
        self.record_digests = record_digests
        self.layer_offset = layer_offset
        self.graphs = {}
        self.max_live = 0
        self.act_in = self.grad_in = self.label_in = None
        self.fwd_s = self.bwd_s = self.idle_s = 0.0
        self.forwards = 0

    @property
    def is_top(self):
        return self.k == self.K

    @property
    def graph_bound(self):
        return 2 * (self.K - self.k) + 1

    @property
    def shrink(self):
        return 1.0 if self.is_top else self.beta

    def digest(self):
        if not self.record_digests:
            return ""
        return tn.digest([p for layer in self.layers for p in layer.params.values()])

    # -- primitive sub-steps -------------------------------------------------

    def forward(self, packet, step, labels=None):
        t0 = time.perf_counter()
        out, graph = module_forward(self.layers, packet, self.k, labels, forward_step=step)
        self.graphs[packet.batch_id] = graph
        self.max_live = max(self.max_live, len(self.graphs))
        self.forwards += 1
        self.fwd_s += time.perf_counter() - t0
        if len(self.graphs) > self.graph_bound:
            raise ScheduleError(
                f"module {self.k} holds {len(self.graphs)} saved graphs, bound is {self.graph_bound}"
            )
        return out

    def backward(self, packet, step):
        """Consume a gradient packet; update parameters; return ``(packet_down, norm, staleness)``."""
        t0 = time.perf_counter()
        graph = self.graphs.pop(packet.batch_id, None)
        if graph is None:
            raise ScheduleError(f"module {self.k}: gradient for batch {packet.batch_id} "
                                f"has no saved graph (live: {sorted(self.graphs)})")
        res = module_backward(self.layers, packet, graph, self.shrink)
        norm = tn.global_norm(grad_arrays(res.param_grads))
        self.optimizer.step_layers(self.layers, res.param_grads, step, offset=self.layer_offset)
        self.bwd_s += time.perf_counter() - t0
        down = None if self.k == 1 else GradientPacket(res.batch_id, res.input_grad, self.k)
        return down, norm, step - graph.forward_step

    def top_step(self, packet, labels, step):
        """Forward, loss and immediate backward/update of the module holding the head."""
        out = self.forward(packet, step, labels)
        loss = float(out.tensor)
        if not np.isfinite(loss):
            raise NonFiniteError(f"non-finite loss {loss} at batch {packet.batch_id}")
        unit = GradientPacket(packet.batch_id, np.asarray(1.0, dtype=out.tensor.dtype), self.K + 1)
        down, norm, stale = self.backward(unit, step)
        return loss, down, norm, stale

    # -- lockstep ----------------------------------------------------------

    def step(self, t):
        """One lockstep iteration. Returns ``(emitted packets, LogRow)``."""
        w0 = time.perf_counter()
        local = local_iteration(self.k, t)
        fwd_batch = forward_batch_index(self.k, t)
        act = self._take_activation(fwd_batch)
        emitted = []
        row = LogRow(iteration=t, module=self.k, batch_forwarded=fwd_batch)
        if self.is_top:
            labels = self._take_labels(fwd_batch)
            row.loss, down, row.grad_norm, row.staleness = self.top_step(act, labels.labels, local)
            row.batch_updated, row.shrink = fwd_batch, 1.0
            live = len(self.graphs) + 1
            if down is not None:
                emitted.append(down)
        else:
            want = gradient_batch_index(self.k, self.K, local)
            if self.ordering == "backward-first":
                self._lockstep_backward(want, local, row, emitted)
                emitted.append(self.forward(act, local))
                live = len(self.graphs)
            else:
                emitted.append(self.forward(act, local))
                live = len(self.graphs)
                self._lockstep_backward(want, local, row, emitted)
        row.live_graphs = live
        row.param_digest = self.digest()
        row.wall_ms = (time.perf_counter() - w0) * 1000.0
        return emitted, row

    def _lockstep_backward(self, want, local, row, emitted):
        if want < 1:
            row.batch_updated = WARMUP
            return
        try:
            packet = self.grad_in.get_nowait()
        except queue.Empty:
            raise ScheduleError(f"module {self.k}: gradient for batch {want} missing") from None
        if packet.batch_id != want:
            raise ScheduleError(f"module {self.k}: expected gradient {want}, got {packet.batch_id}")
        down, row.grad_norm, row.staleness = self.backward(packet, local)
        row.batch_updated = want
        row.shrink = self.beta ** (self.K - self.k)
        if down is not None:
            emitted.append(down)

    def _take_activation(self, batch_id):
        if self.k == 1:
            packet = self.act_in.get(timeout=30.0)
        else:
            try:
                packet = self.act_in.get_nowait()
            except queue.Empty:
                raise ScheduleError(f"module {self.k}: activation {batch_id} missing") from None
        if packet.batch_id != batch_id:
            raise ScheduleError(f"module {self.k}: expected activation {batch_id}, got {packet.batch_id}")
        return packet

    def _take_labels(self, batch_id):
        packet = self.label_in.get(timeout=30.0)
        if packet.batch_id != batch_id:
            raise ScheduleError(f"labels for batch {packet.batch_id} arrived, expected {batch_id}")
        return packet


def build_workers(network, partition, config, iters_per_epoch=1):
    """One :class:`ModuleWorker` per module, each with its own optimizer state."""
    workers = []
    for k, layers in enumerate(partition.split(network.layers), start=1):
        workers.append(ModuleWorker(
            k, partition.K, layers, make_optimizer(config, iters_per_epoch),
            beta=config.beta, ordering=config.ordering, record_digests=config.record_digests,
            layer_offset=partition.boundaries[k - 1] - 1,
        ))
    return workers


def _wire(workers, capacity):
    K = len(workers)
    for i, w in enumerate(workers):
        w.act_in = queue.Queue(maxsize=capacity)
        w.grad_in = queue.Queue(maxsize=capacity) if i < K - 1 else None
    workers[-1].label_in = queue.Queue()


def _start_feeder(workers, batches, T, dtype, stop, errors, timeout):
    first, top = workers[0], workers[-1]

    def put(q, item):
        while not stop.is_set():
            try:
                q.put(item, timeout=0.05)
                return True
            except queue.Full:
                continue
        return False

    def feed():
        try:
            for _ in range(T):
                batch = next(batches)
                x = np.asarray(batch.inputs, dtype=dtype)
                top.label_in.put(LabelPacket(batch.batch_id, batch.labels))
                if not put(first.act_in, ActivationPacket(batch.batch_id, x, 0)):
                    return
        except BaseException as exc:  # noqa: BLE001 - surfaced by the runner
            errors.append(exc)

    th = threading.Thread(target=feed, name="fdg-feeder", daemon=True)
    th.start()
    return th


def _raise_first(errors):
    real = [e for e in errors if not isinstance(e, threading.BrokenBarrierError)]
    if real:
        raise real[0]
    if errors:
        raise errors[0]


def run_lockstep(network, partition, config, T=None, batches=None, hooks=(), iters_per_epoch=1):
    """Execute ``T`` iterations with one thread per module and a barrier per iteration.

    ``batches`` is an iterator of :class:`~fdg.data.Batch`. Each hook is called as
    ``hook(t, workers)`` inside the barrier, while every worker is parked.
    """
    T = T or config.iterations
    K = partition.K
    workers = build_workers(network, partition, config, iters_per_epoch)
    _wire(workers, 2 * K)
    stop = threading.Event()
    errors = []
    rows = [[] for _ in workers]
    clock = {"t": 0}

    def on_barrier():
        clock["t"] += 1
        for hook in hooks:
            hook(clock["t"], workers)

    barrier = threading.Barrier(K, action=on_barrier)

    def work(w, out):
        try:
            for t in range(1, T + 1):
                if t >= w.k:
                    emitted, row = w.step(t)
                    out.append(row)
                    for packet in emitted:
                        if isinstance(packet, ActivationPacket):
                            workers[w.k].act_in.put_nowait(packet)
                        else:
                            workers[w.k - 2].grad_in.put_nowait(packet)
                barrier.wait()
        except BaseException as exc:  # noqa: BLE001
            errors.append(exc)
            barrier.abort()

    dtype = _dtype(config)
    with threadpool_limits(limits=1), tn.deterministic(config.deterministic):
        feeder = _start_feeder(workers, batches, T, dtype, stop, errors, config.deadlock_timeout)
        threads = [threading.Thread(target=work, args=(w, rows[i]), name=f"fdg-module-{w.k}")
                   for i, w in enumerate(workers)]
        t0 = time.perf_counter()
        for th in threads:
            th.start()
        for th in threads:
            th.join()
        stop.set()
        feeder.join()
    _raise_first(errors)
    log = TrainingLog([r for rs in rows for r in rs]).sort()
    log.meta.update(mode="lockstep", K=K, beta=config.beta, ordering=config.ordering,
                    wall_s=time.perf_counter() - t0,
                    max_live_graphs=[w.max_live for w in workers],
                    graph_bounds=[w.graph_bound for w in workers])
    return log


def _dtype(config):
    return tn.DTYPES[config.dtype]


# -- free running ------------------------------------------------------------

class _Timed:
    """Blocking queue operations that book waiting time and detect stalls."""

    def __init__(self, worker, timeout):
        self.w = worker
        self.timeout = timeout

    def get(self, q, what):
        t0 = time.perf_counter()
        try:
            return q.get(timeout=self.timeout)
        except queue.Empty:
            raise DeadlockError(self._diag(f"waiting for {what}")) from None
        finally:
            self.w.idle_s += time.perf_counter() - t0

    def put(self, q, item, what):
        t0 = time.perf_counter()
        try:
            q.put(item, timeout=self.timeout)
        except queue.Full:
            raise DeadlockError(self._diag(f"putting {what}")) from None
        finally:
            self.w.idle_s += time.perf_counter() - t0

    def _diag(self, doing):
        w = self.w
        return (f"no progress for {self.timeout}s: module {w.k}/{w.K} {doing}; "
                f"forwards={w.forwards} live graphs={sorted(w.graphs)} "
                f"act_in={w.act_in.qsize()} grad_in={w.grad_in.qsize() if w.grad_in else '-'}")


def _freerun_module(w, workers, n_steps, timer, rows, config):
    K = w.K
    down_q = workers[w.k - 2].grad_in if w.k > 1 else None
    up_q = workers[w.k].act_in if w.k < K else None
    # backward-first: at most 2(K-k)-1 graphs before a forward; forward-first: at
    # most 2(K-k) after it. Either way staleness and peak match the lockstep run.
    cap = 2 * (K - w.k) - (1 if config.ordering == "backward-first" else 0)
    upstream_done = w.is_top

    def consume(packet, step):
        down, norm, stale = w.backward(packet, step)
        if down is not None:
            timer.put(down_q, down, "gradient")
        rows.append(LogRow(iteration=step, module=w.k, batch_updated=packet.batch_id,
                           grad_norm=norm, staleness=stale, shrink=w.beta ** (K - w.k),
                           live_graphs=len(w.graphs), param_digest=w.digest()))

    def wait_until_within(step):
        nonlocal upstream_done
        while len(w.graphs) > cap and not upstream_done:
            packet = timer.get(w.grad_in, "gradient")
            if packet is _DONE:
                upstream_done = True
            else:
                consume(packet, step)

    def drain(step):
        nonlocal upstream_done
        while not upstream_done:
            try:
                packet = w.grad_in.get_nowait()
            except queue.Empty:
                return
            if packet is _DONE:
                upstream_done = True
            else:
                consume(packet, step)

    for step in range(1, n_steps + 1):
        w0 = time.perf_counter()
        act = timer.get(w.act_in, "activation")
        if w.is_top:
            labels = timer.get(w.label_in, "labels")
            if labels.batch_id != act.batch_id:
                raise ScheduleError(f"labels {labels.batch_id} vs activation {act.batch_id}")
            loss, down, norm, stale = w.top_step(act, labels.labels, step)
            if down is not None:
                timer.put(down_q, down, "gradient")
            rows.append(LogRow(step, w.k, act.batch_id, act.batch_id, loss, norm,
                               (time.perf_counter() - w0) * 1000.0, stale, 1.0, 1, w.digest()))
            continue
        if config.ordering == "backward-first":
            drain(step)
            wait_until_within(step)
        out = w.forward(act, step)
        timer.put(up_q, out, "activation")
        if config.ordering == "forward-first":
            wait_until_within(step)
            drain(step)
        rows.append(LogRow(step, w.k, act.batch_id, None, None, None,
                           (time.perf_counter() - w0) * 1000.0, None, None,
                           len(w.graphs), w.digest()))
    while not upstream_done:
        packet = timer.get(w.grad_in, "gradient")
        if packet is _DONE:
            upstream_done = True
        else:
            consume(packet, n_steps)
    if down_q is not None:
        timer.put(down_q, _DONE, "done marker")


def run_freerunning(network, partition, config, T=None, batches=None, baseline_items_per_sec=None,
                    iters_per_epoch=1):
    """Barrier-free execution. Returns ``(TrainingLog, ThroughputReport)``.

    Module ``k`` forwards ``T-k+1`` batches, as in a ``T``-iteration lockstep run.
    """
    T = T or config.iterations
    K = partition.K
    if T < K:
        raise ValueError(f"need at least K={K} iterations, got {T}")
    workers = build_workers(network, partition, config, iters_per_epoch)
    _wire(workers, 2 * K)
    stop = threading.Event()
    errors = []
    rows = [[] for _ in workers]

    def work(w, out):
        try:
            _freerun_module(w, workers, T - w.k + 1, _Timed(w, config.deadlock_timeout), out, config)
        except BaseException as exc:  # noqa: BLE001
            errors.append(exc)
            stop.set()

    with threadpool_limits(limits=1), tn.deterministic(config.deterministic):
        t0 = time.perf_counter()
        feeder = _start_feeder(workers, batches, T, _dtype(config), stop, errors,
                               config.deadlock_timeout)
        threads = [threading.Thread(target=work, args=(w, rows[i]), name=f"fdg-free-{w.k}",
                                    daemon=True) for i, w in enumerate(workers)]
        for th in threads:
            th.start()
        for th in threads:
            th.join()
        wall = time.perf_counter() - t0
        stop.set()
        feeder.join()
    _raise_first(errors)
    log = TrainingLog([r for rs in rows for r in rs])
    log.rows.sort(key=lambda r: (r.module, r.iteration))
    log.meta.update(mode="freerun", K=K, beta=config.beta, ordering=config.ordering, wall_s=wall,
                    max_live_graphs=[w.max_live for w in workers],
                    graph_bounds=[w.graph_bound for w in workers])
    report = ThroughputReport(
        K=K, items=T, wall_s=wall,
        busy_ms=[(w.fwd_s + w.bwd_s) * 1000.0 for w in workers],
        fwd_ms=[w.fwd_s * 1000.0 for w in workers],
        bwd_ms=[w.bwd_s * 1000.0 for w in workers],
        idle_ms=[w.idle_s * 1000.0 for w in workers],
        baseline_items_per_sec=baseline_items_per_sec,
    )
    return log, report


def staleness_by_module(log):
    """Map module -> sorted set of observed staleness values."""
    out = {}
    for r in log.rows:
        if r.staleness is not None:
            out.setdefault(r.module, set()).add(r.staleness)
    return {k: sorted(v) for k, v in out.items()}
