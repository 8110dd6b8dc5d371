"""Online-prediction evaluation, analytical FLOP counts and throughput timing."""

from __future__ import annotations

import csv
import gc
import io
import time
from dataclasses import dataclass, field

import numpy as np

from .model import (ModelConfig, ModelParams, OnlineState, PredictionTrace, backbone_images, extract_features,
                    push_and_predict)


# --- accuracy over time ----------------------------------------------------

@dataclass
class AccuracyCurve:
    bin_ms: np.ndarray
    mean_acc: np.ndarray
    std_acc: np.ndarray
    n: np.ndarray

    def __post_init__(self):
        self.bin_ms = np.asarray(self.bin_ms, np.float64)
        self.mean_acc = np.asarray(self.mean_acc, np.float64)
        self.std_acc = np.asarray(self.std_acc, np.float64)
        self.n = np.asarray(self.n, np.int64)
        if len(self.bin_ms) > 1 and not np.all(np.diff(self.bin_ms) > 0):
            raise ValueError("bins must be strictly increasing")
        if np.any((self.mean_acc < 0) | (self.mean_acc > 1)):
            raise ValueError("accuracies must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.bin_ms)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_ms", "mean_acc", "std_acc", "n"])
        for b, m, s, n in zip(self.bin_ms, self.mean_acc, self.std_acc, self.n):
            w.writerow([f"{b:g}", f"{m:.6f}", f"{s:.6f}", int(n)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "AccuracyCurve":
        rows = list(csv.DictReader(io.StringIO(text)))
        return cls([float(r["bin_ms"]) for r in rows], [float(r["mean_acc"]) for r in rows],
                   [float(r["std_acc"]) for r in rows], [int(r["n"]) for r in rows])


def _prediction_at(trace: PredictionTrace, edge_ms: float) -> int | None:
    """Argmax of the latest entry at or before ``edge_ms``."""
    times = trace.times_ms
    i = int(np.searchsorted(times, edge_ms, side="right")) - 1
    return None if i < 0 else int(np.argmax(trace.confidences[i]))


def accuracy_over_time(traces: list[PredictionTrace], bin_ms: int, group_by: str = "subject") -> AccuracyCurve:
    """Fraction of traces predicting their label at each bin's right edge.

    A trace joins a bin only if it has entries reaching the edge. The std is
    taken across groups (``trace.subject`` by default) of per-group accuracy.
    """
    if not traces:
        raise ValueError("no traces")
    if bin_ms <= 0:
        raise ValueError("bin_ms must be > 0")
    if any(t.label is None for t in traces):
        raise ValueError("every trace needs a label")
    last = max(float(t.times_ms[-1]) for t in traces if len(t))
    edges = np.arange(1, int(np.floor(last / bin_ms)) + 1) * float(bin_ms)
    bins, means, stds, counts = [], [], [], []
    for e in edges:
        hits, groups = [], {}
        for tr in traces:
            if not len(tr) or tr.times_ms[-1] < e:
                continue
            pred = _prediction_at(tr, e)
            if pred is None:
                continue
            ok = float(pred == tr.label)
            hits.append(ok)
            groups.setdefault(getattr(tr, group_by, None), []).append(ok)
        if not hits:
            continue
        per_group = [np.mean(v) for v in groups.values()]
        bins.append(e)
        means.append(np.mean(hits))
        stds.append(np.std(per_group) if len(per_group) > 1 else 0.0)
        counts.append(len(hits))
    return AccuracyCurve(bins, means, stds, counts)


def confusion_matrix(traces, labels=None, num_classes: int | None = None) -> np.ndarray:
    """Counts indexed by (true, predicted) from each trace's final step."""
    preds = [t.final_class() for t in traces]
    labels = [t.label for t in traces] if labels is None else list(labels)
    if len(labels) != len(preds):
        raise ValueError("one label per trace required")
    k = num_classes if num_classes is not None else max(preds + labels, default=-1) + 1
    out = np.zeros((k, k), np.int64)
    for y, p in zip(labels, preds):
        out[int(y), p] += 1
    return out


# --- FLOPs -----------------------------------------------------------------
# one multiply-accumulate counts as 2 FLOPs; normalization, activations and
# pooling are not counted

def conv_flops(k: int, c_in: int, c_out: int, h_out: int, w_out: int, depthwise: bool = False) -> int:
    total = 2 * k * k * c_in * c_out * h_out * w_out
    return total // c_out if depthwise else total


def dense_flops(d_in: int, d_out: int, tokens: int = 1) -> int:
    return 2 * d_in * d_out * tokens


def attention_flops(length: int, dim: int) -> int:
    """Q/K/V/output projections plus score and weighted-sum products."""
    return 2 * (4 * length * dim * dim + 2 * length * length * dim)


@dataclass(frozen=True)
class FlopEntry:
    name: str
    kind: str
    flops: int
    stage: str  # backbone | encoder | head


@dataclass
class FlopReport:
    entries: list[FlopEntry]
    backbone_per_surface: int
    encoder_per_step: int
    head_per_step: int
    sequence_steps: int
    sequence_total: int
    per_step_encoder: list[int] = field(default_factory=list)

    @property
    def total(self) -> int:
        return self.sequence_total

    def to_csv(self) -> str:
        lines = ["name,kind,stage,flops"] + [f"{e.name},{e.kind},{e.stage},{e.flops}" for e in self.entries]
        lines += [f"backbone_per_surface,total,backbone,{self.backbone_per_surface}",
                  f"encoder_per_step,total,encoder,{self.encoder_per_step}",
                  f"head_per_step,total,head,{self.head_per_step}",
                  f"sequence_{self.sequence_steps}_steps,total,all,{self.sequence_total}"]
        return "\n".join(lines) + "\n"


def _encoder_entries(config: ModelConfig, length: int) -> list[FlopEntry]:
    d, f = config.embed_dim, config.ff_dim
    out = []
    for j in range(config.encoder_layers):
        out += [FlopEntry(f"encoder.{j}.attn", "attention_heads", attention_flops(length, d), "encoder"),
                FlopEntry(f"encoder.{j}.ff1", "dense", dense_flops(d, f, length), "encoder"),
                FlopEntry(f"encoder.{j}.ff2", "dense", dense_flops(f, d, length), "encoder")]
    return out


def count_flops(config: ModelConfig = ModelConfig(), steps: int | None = None) -> FlopReport:
    """Closed-form FLOPs for one surface, one encoder step and a full sequence.

    The encoder re-runs over the whole window each step, so step s costs the
    encoder at window length ``min(s, queue_len)``. The head only reads out
    the last token. ``steps`` defaults to ``queue_len``.
    """
    steps = config.queue_len if steps is None else steps
    entries = []
    c_in = 1
    for i, ((c_out, _), (h, w)) in enumerate(zip(config.backbone_spec, config.feature_hw())):
        entries.append(FlopEntry(f"backbone.{i}.dw", "depthwise_conv2d", conv_flops(3, c_in, c_in, h, w, True),
                                 "backbone"))
        entries.append(FlopEntry(f"backbone.{i}.pw", "conv2d", conv_flops(1, c_in, c_out, h, w), "backbone"))
        c_in = c_out
    entries.append(FlopEntry("proj.0", "dense", dense_flops(c_in, config.embed_dim), "backbone"))
    entries.append(FlopEntry("proj.1", "dense", dense_flops(config.embed_dim, config.embed_dim), "backbone"))
    enc_full = _encoder_entries(config, config.queue_len)
    entries += enc_full
    head = FlopEntry("head.out", "dense", dense_flops(config.embed_dim, config.num_classes), "head")
    entries.append(head)

    backbone = sum(e.flops for e in entries if e.stage == "backbone")
    per_step = [sum(e.flops for e in _encoder_entries(config, min(s, config.queue_len))) for s in range(1, steps + 1)]
    total = steps * backbone + sum(per_step) + steps * head.flops
    return FlopReport(entries, backbone, sum(e.flops for e in enc_full), head.flops, steps, total, per_step)


# --- throughput ------------------------------------------------------------

@dataclass
class ThroughputReport:
    surfaces: int
    seconds: float  # median wall time over repeats
    p50_ms: float
    p99_ms: float
    repeats: int
    repeat_seconds: list[float]
    latency_by_fill: dict[int, float]  # full step (backbone + encoder), ms
    encoder_step_ms: dict[int, float]  # encoder step alone, ms
    backbone_calls: int  # backbone images per repeat

    @property
    def ts_per_s(self) -> float:
        return self.surfaces / self.seconds

    def summary(self) -> str:
        lines = [f"surfaces {self.surfaces}", f"seconds {self.seconds:.4f}", f"ts_per_s {self.ts_per_s:.1f}",
                 f"p50_ms {self.p50_ms:.3f}", f"p99_ms {self.p99_ms:.3f}",
                 f"backbone_calls_per_surface {self.backbone_calls / self.surfaces:g}"]
        for f in sorted(self.latency_by_fill):
            lines.append(f"fill {f}: step_ms {self.latency_by_fill[f]:.3f} encoder_ms {self.encoder_step_ms[f]:.3f}")
        return "\n".join(lines) + "\n"


def _prefilled(params: ModelParams, fill: int, rng) -> OnlineState:
    state = OnlineState.fresh(params.config)
    for k in range(fill - 1):
        state.queue.push(rng.standard_normal(params.config.embed_dim).astype(np.float32), k)
    state.steps_seen = fill - 1
    return state


def _median_ms(fn, repeats: int) -> float:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return 1000.0 * float(np.median(times))


def benchmark_throughput(params: ModelParams, surfaces: int = 120, repeats: int = 3, warmup: int = 3,
                         fills=(1, 15, 30, 60), seed: int = 0) -> ThroughputReport:
    """Time the online loop (one backbone pass + one encoder step per surface).

    Inputs are random surfaces at the model resolution; single worker.
    """
    if surfaces < 1:
        raise ValueError("surfaces must be >= 1")
    if repeats < 3:
        raise ValueError("repeats must be >= 3")
    rng = np.random.default_rng(seed)
    h, w = params.config.input_hw
    data = rng.random((surfaces, h, w), dtype=np.float32)

    def loop():
        state = OnlineState.fresh(params.config)
        lat = []
        for img in data:
            t0 = time.perf_counter()
            emb = extract_features(img, params)
            push_and_predict(state, emb, params)
            lat.append(time.perf_counter() - t0)
        return lat

    for _ in range(warmup):
        extract_features(data[0], params)
    walls, lats, calls = [], [], []
    # a collector pause inside one repeat skews short runs
    gc.collect()
    was_enabled = gc.isenabled()
    gc.disable()
    try:
        for _ in range(repeats):
            before = backbone_images()
            t0 = time.perf_counter()
            lats += loop()
            walls.append(time.perf_counter() - t0)
            calls.append(backbone_images() - before)
    finally:
        if was_enabled:
            gc.enable()
    if len(set(calls)) != 1:
        raise RuntimeError(f"backbone call count changed between repeats: {calls}")

    by_fill, enc = {}, {}
    for f in sorted({min(int(f), params.config.queue_len) for f in fills}):
        token = rng.standard_normal(params.config.embed_dim).astype(np.float32)
        img = data[0]
        states = [_prefilled(params, f, rng) for _ in range(2 * repeats)]
        it = iter(states)
        by_fill[f] = _median_ms(lambda: push_and_predict(next(it), extract_features(img, params), params), repeats)
        enc[f] = _median_ms(lambda: push_and_predict(next(it), token, params), repeats)
    lat_ms = 1000.0 * np.asarray(lats)
    return ThroughputReport(surfaces, float(np.median(walls)), float(np.percentile(lat_ms, 50)),
                            float(np.percentile(lat_ms, 99)), repeats, walls, by_fill, enc, calls[0])


@dataclass
class ParallelThroughput:
    workers: int
    surfaces_per_worker: int
    seconds: float  # median wall time over repeats
    repeat_seconds: list[float]

    @property
    def ts_per_s(self) -> float:
        return self.workers * self.surfaces_per_worker / self.seconds

    def summary(self) -> str:
        return (f"parallel_workers {self.workers}\nparallel_seconds {self.seconds:.4f}\n"
                f"parallel_ts_per_s {self.ts_per_s:.1f}\n")


def _worker_stream(job) -> float:
    params, data = job
    state = OnlineState.fresh(params.config)
    t0 = time.perf_counter()
    for img in data:
        push_and_predict(state, extract_features(img, params), params)
    return time.perf_counter() - t0


def benchmark_parallel(params: ModelParams, surfaces: int = 120, workers: int = 2, repeats: int = 3,
                       seed: int = 0) -> ParallelThroughput:
    """Independent streams in worker processes, each with its own copy of the parameters.

    Reported separately from the single-worker numbers; pool start-up is excluded.
    """
    import multiprocessing as mp

    if surfaces < 1 or workers < 1:
        raise ValueError("surfaces and workers must be >= 1")
    if repeats < 3:
        raise ValueError("repeats must be >= 3")
    rng = np.random.default_rng(seed)
    h, w = params.config.input_hw
    jobs = [(params, rng.random((surfaces, h, w), dtype=np.float32)) for _ in range(workers)]
    method = "fork" if "fork" in mp.get_all_start_methods() else "spawn"
    walls = []
    with mp.get_context(method).Pool(workers) as pool:
        pool.map(_worker_stream, [(params, j[1][:1]) for j in jobs])  # warm-up
        for _ in range(repeats):
            t0 = time.perf_counter()
            pool.map(_worker_stream, jobs)
            walls.append(time.perf_counter() - t0)
    return ParallelThroughput(workers, surfaces, float(np.median(walls)), walls)


# --- plots -----------------------------------------------------------------

def _figure():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    matplotlib.rcParams["svg.hashsalt"] = "evaction"
    fig, ax = plt.subplots(figsize=(6, 3.5))
    return plt, fig, ax


def _save(plt, fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_accuracy_curve(curve: AccuracyCurve, path, title: str = "accuracy over time") -> None:
    plt, fig, ax = _figure()
    ax.plot(curve.bin_ms, curve.mean_acc, color="C0")
    ax.fill_between(curve.bin_ms, np.clip(curve.mean_acc - curve.std_acc, 0, 1),
                    np.clip(curve.mean_acc + curve.std_acc, 0, 1), color="C0", alpha=0.25)
    ax.set_xlabel("time since stream start (ms)")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1.02)
    ax.set_title(title)
    _save(plt, fig, path)


def plot_trace(trace: PredictionTrace, path, class_names=None, top: int = 5) -> None:
    """Confidence over time for the ``top`` classes by peak confidence."""
    conf = trace.conf_matrix()
    plt, fig, ax = _figure()
    order = np.argsort(-conf.max(axis=0))[:top] if conf.size else []
    for c in order:
        name = class_names[c] if class_names else f"class {c}"
        ax.plot(trace.times_ms, conf[:, c], label=name, lw=2 if c == trace.label else 1)
    ax.set_xlabel("time since stream start (ms)")
    ax.set_ylabel("confidence")
    ax.set_ylim(0, 1.02)
    if len(order):
        ax.legend(loc="best", fontsize="small")
    _save(plt, fig, path)
