"""Timing models: closed-form ideal speedups and a discrete-event pipeline simulator.

All costs are abstract time units. Communication is a fixed per-packet latency
that occupies neither the sender nor the receiver.
"""
import csv
import json
from dataclasses import dataclass, field

import simpy


METHODS = ("bp", "ddg", "fr", "lel", "fdg")
SCHEDULES = ("fdg-lockstep", "fdg-freerun")


def method_time(method, K, Tf, Tb, Taux=0.0):
    """Time per iteration of each decoupling method, whole-network costs split evenly."""
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    if Tf <= 0 or Tb <= 0 or Taux < 0:
        raise ValueError("costs must be positive")
    if method == "bp":
        return Tf + Tb
    if method == "ddg":
        return Tf + Tb / K
    if method == "fr":
        return Tf + (Tf + Tb) / K
    if method == "lel":
        return (Tf + Tb) / K + Taux
    if method == "fdg":
        return (Tf + Tb) / K
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")


def ideal_speedup(method, K, Tf=1.0, Tb=2.0, Taux=0.0):
    """``(Tf + Tb) / method_time``. FDG gives exactly K."""
    if method == "fdg":
        method_time(method, K, Tf, Tb, Taux)  # validation only
        return float(K)
    return (Tf + Tb) / method_time(method, K, Tf, Tb, Taux)


@dataclass
class CostProfile:
    fwd: list
    bwd: list
    aux: list = None
    comm: float = 0.0

    def __post_init__(self):
        if len(self.fwd) != len(self.bwd):
            raise ValueError("fwd and bwd need one entry per module")
        if self.aux is None:
            self.aux = [0.0] * len(self.fwd)
        if min(self.fwd + self.bwd + self.aux + [self.comm]) < 0:
            raise ValueError("costs must be >= 0")

    @property
    def K(self):
        return len(self.fwd)

    @property
    def total(self):
        """Compute time of one item through the whole network."""
        return sum(self.fwd) + sum(self.bwd)

    @classmethod
    def uniform(cls, K, Tf=1.0, Tb=2.0, Tc=0.0):
        """Whole-network costs ``Tf``/``Tb`` split evenly over K modules."""
        return cls([Tf / K] * K, [Tb / K] * K, comm=Tc)


def profile_from_report(report, T=None, comm=0.0):
    """Per-item module costs (ms) measured by a free-running run."""
    T = T or report.items
    n = [T - k for k in range(report.K)]  # module k forwards T-k+1 batches
    return CostProfile([f / c for f, c in zip(report.fwd_ms, n)],
                       [b / c for b, c in zip(report.bwd_ms, n)], comm=comm)


@dataclass
class Interval:
    start: float
    end: float
    tag: str  # fwd, bwd, comm, idle
    batch: object = None
    iteration: object = None


@dataclass
class Timeline:
    workers: list  # per module, sorted Intervals
    links: list = field(default_factory=list)  # (boundary, Interval) transfers in flight

    def validate(self):
        for k, ivs in enumerate(self.workers, start=1):
            for a, b in zip(ivs, ivs[1:]):
                if b.start < a.end - 1e-9:
                    raise AssertionError(f"worker {k}: {a} overlaps {b}")

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["worker", "start", "end", "tag", "batch-id"])
            for k, ivs in enumerate(self.workers, start=1):
                for iv in ivs:
                    w.writerow([k, repr(iv.start), repr(iv.end), iv.tag, "" if iv.batch is None else iv.batch])
            for boundary, iv in self.links:
                w.writerow([f"link-{boundary}", repr(iv.start), repr(iv.end), iv.tag, iv.batch])


def _fill_idle(ivs, end):
    out, clock = [], 0.0
    for iv in ivs:
        if iv.start > clock:
            out.append(Interval(clock, iv.start, "idle"))
        out.append(iv)
        clock = iv.end
    if end > clock:
        out.append(Interval(clock, end, "idle"))
    return out


def _steady_rate(done_times, T):
    """Items per time unit between the T/4-th and 3T/4-th completions."""
    a, b = T // 4, (3 * T) // 4
    if b <= a:
        a, b = 0, T - 1
    if b <= a or done_times[b] == done_times[a]:
        return 1.0 / done_times[-1] if done_times and done_times[-1] > 0 else float("inf")
    return (b - a) / (done_times[b] - done_times[a])


def _lockstep(profile, T, ordering):
    K = profile.K
    comm = profile.comm if K > 1 else 0.0
    work = [[] for _ in range(K)]
    clock, done = 0.0, []
    for t in range(1, T + 1):
        longest = 0.0
        for k in range(1, K + 1):
            if t < k:
                continue
            i = k - 1
            b_fwd = t - k + 1
            b_bwd = t - 2 * K + k + 1
            ops = [("fwd", b_fwd, profile.fwd[i] + profile.aux[i])]
            if k == K:
                ops.append(("bwd", b_fwd, profile.bwd[i]))
            elif b_bwd >= 1:
                bwd = ("bwd", b_bwd, profile.bwd[i])
                ops = ops + [bwd] if ordering == "forward-first" else [bwd] + ops
            s = clock
            for tag, b, cost in ops:
                work[i].append(Interval(s, s + cost, tag, b, t))
                s += cost
            longest = max(longest, s - clock)
        if t >= K:
            done.append(clock + longest)
        clock += longest
        if comm:
            for i in range(min(t, K)):
                work[i].append(Interval(clock, clock + comm, "comm", None, t))
            clock += comm
    return work, [], clock, done


def _freerun(profile, T, ordering, capacity):
    """Process-per-module simulation mirroring the threaded free-running worker."""
    K = profile.K
    env = simpy.Environment()
    act_in = [simpy.Store(env, capacity) for _ in range(K)]
    grad_in = [simpy.Store(env, capacity) for _ in range(K)]
    work = [[] for _ in range(K)]
    links = []
    done = []
    DONE = -1

    def feeder():
        for b in range(1, T + 1):
            yield act_in[0].put(b)

    def send(store, boundary, item, kind):
        if profile.comm > 0 and item != DONE:
            t0 = env.now
            yield env.timeout(profile.comm)
            links.append((boundary, Interval(t0, env.now, kind, item)))
        yield store.put(item)

    def compute(i, tag, b, cost, step):
        t0 = env.now
        yield env.timeout(cost)
        work[i].append(Interval(t0, env.now, tag, b, step))

    def module(k):
        i = k - 1
        top = k == K
        cap = 2 * (K - k) - (1 if ordering == "backward-first" else 0)
        live = []
        state = {"up": top}  # upstream finished sending gradients

        def consume(b, step):
            live.remove(b)
            yield from compute(i, "bwd", b, profile.bwd[i], step)
            if k > 1:
                env.process(send(grad_in[i - 1], k - 1, b, "grad"))

        def wait_until_within(step):
            while len(live) > cap and not state["up"]:
                g = yield grad_in[i].get()
                if g == DONE:
                    state["up"] = True
                else:
                    yield from consume(g, step)

        def drain(step):
            while not state["up"] and grad_in[i].items:
                b = yield grad_in[i].get()
                if b == DONE:
                    state["up"] = True
                else:
                    yield from consume(b, step)

        for step in range(1, T - k + 2):
            b = yield act_in[i].get()
            if top:
                yield from compute(i, "fwd", b, profile.fwd[i] + profile.aux[i], step)
                live.append(b)
                yield from consume(b, step)
                done.append(env.now)
                continue
            if ordering == "backward-first":
                yield from drain(step)
                yield from wait_until_within(step)
            yield from compute(i, "fwd", b, profile.fwd[i] + profile.aux[i], step)
            live.append(b)
            env.process(send(act_in[i + 1], k + 1, b, "act"))
            if ordering == "forward-first":
                yield from wait_until_within(step)
                yield from drain(step)
        while not state["up"]:
            g = yield grad_in[i].get()
            if g == DONE:
                state["up"] = True
            else:
                yield from consume(g, T - k + 1)
        if k > 1:
            env.process(send(grad_in[i - 1], k - 1, DONE, "done"))

    env.process(feeder())
    for k in range(1, K + 1):
        env.process(module(k))
    env.run()
    makespan = max((ivs[-1].end for ivs in work if ivs), default=0.0)
    return work, links, makespan, done


def simulate_pipeline(profile, T, schedule="fdg-freerun", ordering="backward-first", capacity=None):
    """Simulate ``T`` iterations (lockstep) or ``T`` items (free running).

    Returns ``(Timeline, stats)``; stats hold the makespan, per-worker utilization
    and the steady-state throughput measured between the T/4-th and 3T/4-th
    completions at the top module.
    """
    if schedule not in SCHEDULES:
        raise ValueError(f"unknown schedule {schedule!r}; expected one of {SCHEDULES}")
    if T < profile.K:
        raise ValueError(f"need T >= K={profile.K}")
    if schedule == "fdg-lockstep":
        work, links, makespan, done = _lockstep(profile, T, ordering)
    else:
        work, links, makespan, done = _freerun(profile, T, ordering, capacity or 2 * profile.K)
    timeline = Timeline([_fill_idle(ivs, makespan) for ivs in work], sorted(links, key=lambda x: x[1].start))
    busy = [sum(iv.end - iv.start for iv in ivs if iv.tag in ("fwd", "bwd")) for ivs in work]
    rate = _steady_rate(done, len(done))
    stats = {
        "schedule": schedule,
        "K": profile.K,
        "T": T,
        "makespan": makespan,
        "utilization": [b / makespan if makespan > 0 else 0.0 for b in busy],
        "items": len(done),
        "items_per_time": rate,
        "single_module_items_per_time": 1.0 / profile.total if profile.total > 0 else float("inf"),
        "speedup": rate * profile.total,
        "ideal_speedup": float(profile.K),
    }
    return timeline, stats


def backward_gaps(timeline):
    """Per module, the iteration gaps between each batch's fwd and bwd (lockstep timelines)."""
    gaps = {}
    for k, ivs in enumerate(timeline.workers, start=1):
        fwd = {iv.batch: iv.iteration for iv in ivs if iv.tag == "fwd"}
        gaps[k] = sorted({iv.iteration - fwd[iv.batch] for iv in ivs if iv.tag == "bwd"})
    return gaps


def write_stats(stats, path):
    with open(path, "w") as f:
        json.dump(stats, f, indent=2)
