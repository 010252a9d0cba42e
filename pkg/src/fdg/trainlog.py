"""Training logs and throughput reports, with their CSV/JSON forms."""
import csv
import json
from dataclasses import asdict, dataclass, field

CSV_COLUMNS = [
    ("iteration", "iteration"),
    ("module", "module"),
    ("batch_forwarded", "batch-id-forwarded"),
    ("batch_updated", "batch-id-updated"),
    ("loss", "loss"),
    ("grad_norm", "grad-norm"),
    ("wall_ms", "wall-ms"),
    ("staleness", "staleness"),
    ("shrink", "shrink"),
    ("live_graphs", "live-graphs"),
    ("param_digest", "param-digest"),
]

WARMUP = "warmup"


@dataclass
class LogRow:
    iteration: int
    module: int
    batch_forwarded: object = None  # int, or None when the row records a backward only
    batch_updated: object = None  # int, WARMUP, or None
    loss: object = None
    grad_norm: object = None
    wall_ms: float = 0.0
    staleness: object = None
    shrink: object = None
    live_graphs: int = 0
    param_digest: str = ""

    def key(self):
        """Everything except wall time; the basis of bit-exact log comparison."""
        return tuple(getattr(self, name) for name, _ in CSV_COLUMNS if name != "wall_ms")


def _cell(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(name, text):
    if text == "":
        return None
    if name in ("loss", "grad_norm", "wall_ms", "shrink"):
        return float(text)
    if name == "param_digest":
        return text
    if name == "batch_updated" and text == WARMUP:
        return WARMUP
    return int(text)


@dataclass
class TrainingLog:
    rows: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    evals: list = field(default_factory=list)  # (iteration, loss, top1_error)

    def sort(self):
        self.rows.sort(key=lambda r: (r.iteration, r.module))
        return self

    def for_module(self, k):
        return [r for r in self.rows if r.module == k]

    def losses(self):
        return [(r.iteration, r.loss) for r in self.rows if r.loss is not None]

    def final_loss(self, window=1):
        values = [loss for _, loss in self.losses()]
        if not values:
            return None
        tail = values[-window:]
        return sum(tail) / len(tail)

    def keys(self):
        return [r.key() for r in self.rows]

    def first_divergence(self, other):
        """Index of the first differing row (ignoring wall time), or None if identical."""
        a, b = self.keys(), other.keys()
        for i, (x, y) in enumerate(zip(a, b)):
            if x != y:
                return i
        return None if len(a) == len(b) else min(len(a), len(b))

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow([header for _, header in CSV_COLUMNS])
            for r in self.rows:
                writer.writerow([_cell(getattr(r, name)) for name, _ in CSV_COLUMNS])

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as f:
            reader = csv.reader(f)
            header = next(reader)
            names = {h: n for n, h in CSV_COLUMNS}
            cols = [names[h] for h in header]
            rows = [LogRow(**{n: _parse(n, v) for n, v in zip(cols, line)}) for line in reader]
        return cls(rows)


@dataclass
class ThroughputReport:
    K: int
    items: int
    wall_s: float
    busy_ms: list
    fwd_ms: list
    bwd_ms: list
    idle_ms: list
    baseline_items_per_sec: object = None

    @property
    def items_per_sec(self):
        return self.items / self.wall_s if self.wall_s > 0 else float("inf")

    @property
    def speedup(self):
        if not self.baseline_items_per_sec:
            return None
        return self.items_per_sec / self.baseline_items_per_sec

    def utilization(self):
        """Per-worker busy share of wall time, in percent."""
        wall_ms = self.wall_s * 1000.0
        return [min(100.0, 100.0 * b / wall_ms) for b in self.busy_ms]

    def to_dict(self):
        d = asdict(self)
        d.update(items_per_sec=self.items_per_sec, speedup_vs_k1=self.speedup,
                 utilization_pct=self.utilization())
        return d

    def to_json(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)
