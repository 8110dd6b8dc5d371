"""Command-line entry point: ``evaction <subcommand> ...``.

Exit codes: 0 ok, 1 usage, 2 data or validation error, 3 internal error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import queue
import struct
import sys
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import evalbench, events, model, preprocess, training
from .nn.checkpoint import CheckpointError
from .nn.layers import ConfigError
from .nn.tensor import DimensionError

log = logging.getLogger("evaction")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3
DATA_ERRORS = (ValueError, KeyError, IndexError, OSError, ConfigError, CheckpointError, DimensionError,
               training.TrainingDivergence)
FRAME_LEN = struct.Struct("<I")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


# --- config handling -------------------------------------------------------

# config key -> (type, help); flags are the keys with dashes
DECAY_KEYS = {"tau": (float, "decay constant (µs)"), "cadence": (int, "surface spacing (µs)"),
              "mode": (str, "latest_event | decayed_sum")}
FILTER_KEYS = {"spatial_radius": (int, "neighbour radius (px)"), "temporal_window": (int, "neighbour window (µs)"),
               "min_neighbors": (int, "neighbours needed to keep an event")}
MODEL_KEYS = {"input_hw": (str, "network input as H,W"), "embed_dim": (int, ""), "heads": (int, ""),
              "encoder_layers": (int, ""), "queue_len": (int, ""), "num_classes": (int, ""), "ff_dim": (int, "")}
COMMON_KEYS = {"seed": (int, "random seed")}


@dataclass
class RunConfig:
    subcommand: str
    values: dict = field(default_factory=dict)
    decay: preprocess.DecayConfig = preprocess.DecayConfig()
    filter: preprocess.FilterConfig | None = preprocess.FilterConfig()
    model: model.ModelConfig | None = None
    schedule: training.Schedule | None = None
    seed: int = 0

    @property
    def pipe(self) -> model.PipelineConfig:
        return model.PipelineConfig(self.decay, self.filter)


def _add_keys(p: argparse.ArgumentParser, keys: dict) -> None:
    for key, (_, help_) in keys.items():
        p.add_argument("--" + key.replace("_", "-"), dest=key, default=None, help=help_ or None)


def _coerce(key: str, raw, table: dict):
    typ = table[key][0]
    try:
        return typ(raw)
    except (TypeError, ValueError):
        raise ValueError(f"bad value for {key}: {raw!r}") from None


def _hw(raw: str) -> tuple[int, int]:
    parts = [p for p in str(raw).replace("x", ",").split(",") if p.strip()]
    if len(parts) == 1:
        parts = parts * 2
    if len(parts) != 2:
        raise ValueError(f"input_hw must be H,W; got {raw!r}")
    return int(parts[0]), int(parts[1])


def build_run_config(args: argparse.Namespace) -> RunConfig:
    """Merge defaults < config file < flags and validate everything up front."""
    file_kv = training.parse_kv(Path(args.config).read_text()) if getattr(args, "config", None) else {}
    tables = {**DECAY_KEYS, **FILTER_KEYS, **MODEL_KEYS, **COMMON_KEYS}
    unknown = sorted(k for k in file_kv if k not in tables and not k.startswith("stage") and k != "stages")
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    values = {}
    for key in tables:
        raw = getattr(args, key, None)
        if raw is None:
            raw = file_kv.get(key)
        if raw is not None:
            values[key] = _coerce(key, raw, tables)
    rc = RunConfig(args.command, values, seed=values.get("seed", 0))
    rc.decay = preprocess.DecayConfig(**{k: values[k] for k in DECAY_KEYS if k in values})
    if getattr(args, "no_filter", False):
        rc.filter = None
    else:
        rc.filter = preprocess.FilterConfig(**{k: values[k] for k in FILTER_KEYS if k in values})
    mk = {k: values[k] for k in MODEL_KEYS if k in values}
    if "input_hw" in mk:
        mk["input_hw"] = _hw(mk["input_hw"])
    if args.command == "train" and getattr(args, "synthetic", None) and "num_classes" not in mk:
        mk["num_classes"] = len(events.PATTERNS)
    if mk or args.command in ("train", "bench"):
        rc.model = model.ModelConfig(**mk)
    rc.schedule = training.schedule_from_kv(file_kv)
    return rc


# --- io helpers ------------------------------------------------------------

def _format_for(path: str, explicit: str | None) -> str:
    if explicit:
        return explicit
    return "csv" if str(path).lower().endswith(".csv") else "binary_v1"


def read_stream(path: str, fmt: str | None = None, width=None, height=None) -> events.EventStream:
    fmt = _format_for(path, fmt)
    data = sys.stdin.buffer.read() if path == "-" else Path(path).read_bytes()
    return events.decode_stream(data, fmt, width=width, height=height)


def _write(path: str | None, payload: bytes | str) -> None:
    raw = payload.encode() if isinstance(payload, str) else payload
    if path in (None, "-"):
        sys.stdout.buffer.write(raw)
        sys.stdout.buffer.flush()
    else:
        Path(path).write_bytes(raw)


def write_framed(stream: events.EventStream, chunk_events: int = 256) -> bytes:
    """binary_v1 header (count 0) then ``u32 byte-length + records`` frames."""
    head = np.zeros(1, events.HEADER_DTYPE)
    head["magic"], head["width"], head["height"], head["count"] = events.MAGIC, stream.sensor_width, stream.sensor_height, 0
    body = events.encode_records(stream)
    step = chunk_events * events.RECORD_SIZE
    parts = [head.tobytes()]
    for i in range(0, len(body), step):
        chunk = body[i:i + step]
        parts += [FRAME_LEN.pack(len(chunk)), chunk]
    return b"".join(parts)


def _read_exact(f, n: int, what: str, offset: int) -> bytes:
    buf = b""
    while len(buf) < n:
        part = f.read(n - len(buf))
        if not part:
            if buf or what == "header":
                raise events.EventFormatError(f"truncated {what}", offset + len(buf))
            return b""
        buf += part
    return buf


def read_framed(f):
    """Parse framed input incrementally; yields ``(width, height)`` first, then record arrays."""
    head = _read_exact(f, events.HEADER_SIZE, "header", 0)
    h = np.frombuffer(head, events.HEADER_DTYPE)[0]
    if h["magic"] != events.MAGIC:
        raise events.EventFormatError("bad magic in framed stream header", 0)
    yield int(h["width"]), int(h["height"])
    offset = events.HEADER_SIZE
    while True:
        size_raw = _read_exact(f, FRAME_LEN.size, "frame length", offset)
        if not size_raw:
            return
        (size,) = FRAME_LEN.unpack(size_raw)
        offset += FRAME_LEN.size
        if size % events.RECORD_SIZE:
            raise events.EventFormatError(f"frame of {size} bytes is not a whole number of records", offset)
        body = _read_exact(f, size, "frame", offset) if size else b""
        yield events.decode_records(body, offset)
        offset += size


# --- streaming inference ---------------------------------------------------

_DONE = object()


def stream_infer(chunks, params: model.ModelParams, width: int, height: int,
                 pipe: model.PipelineConfig = model.PipelineConfig(), buffer: int = 8):
    """Yield ``(t_ref, confidence)`` as soon as each surface is complete.

    ``chunks`` yields record arrays (fields x, y, t, p) in timestamp order.
    Surface building runs in a worker thread feeding a bounded queue; the
    caller's thread runs the network, so output order follows step index.
    """
    q: queue.Queue = queue.Queue(maxsize=buffer)
    stop = threading.Event()
    h, w = params.config.input_hw

    def put(item):
        while not stop.is_set():
            try:
                q.put(item, timeout=0.1)
                return
            except queue.Full:
                continue

    def produce():
        try:
            builder = preprocess.StreamingSurfaces(width, height, pipe.decay, pipe.filter)
            for rec in chunks:
                if stop.is_set():
                    return
                for ts in builder.push(rec["x"], rec["y"], rec["t"], rec["p"]):
                    put(ts)
            for ts in builder.close():
                put(ts)
            put(_DONE)
        except BaseException as exc:  # forwarded to the consumer
            put(exc)

    worker = threading.Thread(target=produce, name="surface-builder", daemon=True)
    worker.start()
    state = model.OnlineState.fresh(params.config)
    try:
        while True:
            item = q.get()
            if item is _DONE:
                return
            if isinstance(item, BaseException):
                raise item
            emb = model.extract_features(preprocess.resize_array(item.values, h, w), params)
            conf, _, state = model.push_and_predict(state, emb, params)
            yield item.t_ref, conf
    finally:
        stop.set()
        worker.join(timeout=5)


def chunk_records(stream: events.EventStream, chunk_events: int):
    rec = events.decode_records(events.encode_records(stream))
    for i in range(0, len(rec), max(1, chunk_events)):
        yield rec[i:i + chunk_events]


# --- subcommands -----------------------------------------------------------

def _load_samples(args, rc: RunConfig) -> list[events.EventStream]:
    if getattr(args, "synthetic", None):
        per = args.synthetic
        return training.synthetic_task(per, seed=rc.seed, width=args.sensor_width, height=args.sensor_height)
    if not getattr(args, "manifest", None):
        raise UsageError("give --manifest or --synthetic")
    base = Path(args.manifest).parent
    out = []
    with open(args.manifest, newline="") as f:
        for row in csv.DictReader(f):
            s = read_stream(str(base / row["path"]))
            out.append(s.with_meta(label=int(row["label"]), subject=row.get("subject") or None))
    return out


def _synthetic_split(samples, per_class: int):
    """First 2/3 train, next 1/6 val, rest test within each class."""
    by: dict[int, list] = {}
    for s in samples:
        by.setdefault(s.label, []).append(s)
    n_tr, n_va = int(round(per_class * 2 / 3)), int(round(per_class / 6))
    tr, va, te = [], [], []
    for c in sorted(by):
        tr += by[c][:n_tr]
        va += by[c][n_tr:n_tr + n_va]
        te += by[c][n_tr + n_va:]
    return training.Split(tr, va, te)


def _split(args, rc, samples) -> training.Split:
    if getattr(args, "synthetic", None):
        return _synthetic_split(samples, args.synthetic)
    held = args.held_out
    if args.split == "kfold":
        held = int(held or 0)
    elif args.split == "fixed":
        held = [int(v) for v in (held or "").split(",") if v]
    plan = training.SplitPlan(args.split, held, seed=rc.seed)
    return training.make_split(samples, plan)


def cmd_convert(args, rc):
    s = read_stream(args.input, args.input_format, args.width, args.height)
    if args.format == "framed":
        _write(args.out, write_framed(s, args.chunk_events))
    else:
        _write(args.out, events.encode_stream(s, args.format))


def cmd_filter(args, rc):
    s = read_stream(args.input, args.input_format, args.width, args.height)
    kept = preprocess.filter_isolated(s, rc.filter or preprocess.FilterConfig())
    log.info("kept %d of %d events", len(kept), len(s))
    _write(args.out, events.encode_stream(kept, _format_for(args.out or "", args.format)))


def cmd_surfaces(args, rc):
    s = read_stream(args.input, args.input_format, args.width, args.height)
    if rc.filter is not None:
        s = preprocess.filter_isolated(s, rc.filter)
    surfaces = preprocess.surface_sequence(s, rc.decay, args.horizon)
    if rc.model is not None:
        h, w = rc.model.input_hw
        surfaces = [preprocess.resize_surface(ts, h, w) for ts in surfaces]
    _write(args.out, preprocess.dump_surfaces(surfaces))


def cmd_synth(args, rc):
    script = events.MotionScript(args.pattern, args.duration, args.rate, args.noise_rate, rc.seed)
    s = events.generate_synthetic(script, args.sensor_width, args.sensor_height)
    _write(args.out, events.encode_stream(s, _format_for(args.out or "", args.format)))


def cmd_train(args, rc):
    schedule = rc.schedule or (training.Schedule.three_stage() if args.schedule == "three_stage"
                               else training.Schedule.two_stage())
    samples = _load_samples(args, rc)
    split = _split(args, rc, samples)
    if not split.train or not split.val:
        raise ValueError("split produced an empty train or val set")
    cfg = rc.model
    log.info("building surfaces for %d/%d/%d streams", len(split.train), len(split.val), len(split.test))
    dtr = training.SequenceDataset.from_streams(split.train, cfg, rc.pipe, cfg.queue_len)
    dva = training.SequenceDataset.from_streams(split.val, cfg, rc.pipe, cfg.queue_len)
    params = model.ModelParams.init(cfg, seed=rc.seed)
    super_map = training.SYNTH_SUPER if args.synthetic else None
    if any(st.labels == "super_category" for st in schedule.stages) and super_map is None:
        if not args.super_map:
            raise ValueError("super_category stage needs --super-map for manifest data")
        super_map = {int(a): int(b) for a, b in (kv.split(":") for kv in args.super_map.split(","))}
    policy = None if args.no_augment else preprocess.AugmentPolicy()
    params, history = training.train_staged(params, dtr, dva, schedule, rc.seed, super_map, policy)
    params.save(args.out)
    if args.log:
        Path(args.log).write_text(training.log_to_csv(history))
    if split.test:
        dte = training.SequenceDataset.from_streams(split.test, cfg, rc.pipe, cfg.queue_len)
        rep = training.evaluate_accuracy(params, dte)
        print(f"test_accuracy {rep.accuracy:.4f}")


def _load_model(path) -> model.ModelParams:
    return model.ModelParams.load(path)


def cmd_infer(args, rc):
    params = _load_model(args.model)
    header = model.trace_csv_header(params.config.num_classes) + "\n"
    if not args.stream:
        s = read_stream(args.input, args.input_format, args.width, args.height)
        trace = model.run_stream(s, params, rc.pipe)
        body = "".join(model.trace_csv_line(t, c) + "\n" for t, c in zip(trace.t_ref, trace.confidences))
        _write(args.out, header + body)
        if args.plot:
            evalbench.plot_trace(trace, args.plot)
        return
    if args.input == "-":
        frames = read_framed(sys.stdin.buffer)
        width, height = next(frames)
    else:
        s = read_stream(args.input, args.input_format, args.width, args.height)
        frames, width, height = chunk_records(s, args.chunk_events), s.sensor_width, s.sensor_height
    out = sys.stdout if args.out in (None, "-") else open(args.out, "w")
    try:
        out.write(header)
        for t_ref, conf in stream_infer(frames, params, width, height, rc.pipe):
            out.write(model.trace_csv_line(t_ref, conf) + "\n")
            out.flush()
    finally:
        if out is not sys.stdout:
            out.close()


def cmd_eval(args, rc):
    params = _load_model(args.model)
    samples = _load_samples(args, rc)
    if args.synthetic:
        samples = _synthetic_split(samples, args.synthetic).test
    traces = [model.run_stream(s, params, rc.pipe) for s in samples]
    curve = evalbench.accuracy_over_time(traces, args.bin_ms)
    _write(args.out, curve.to_csv())
    cm = evalbench.confusion_matrix(traces, num_classes=params.config.num_classes)
    acc = float(np.trace(cm) / max(1, cm.sum()))
    print(f"final_accuracy {acc:.4f}", file=sys.stderr)
    if args.confusion:
        Path(args.confusion).write_text("\n".join(",".join(str(v) for v in row) for row in cm) + "\n")
    if args.plot:
        evalbench.plot_accuracy_curve(curve, args.plot)


def cmd_bench(args, rc):
    params = _load_model(args.model) if args.model else model.ModelParams.init(rc.model, seed=rc.seed)
    flops = evalbench.count_flops(params.config)
    text = f"gflops_sequence {flops.total / 1e9:.4f}\n"
    if not args.flops_only:
        rep = evalbench.benchmark_throughput(params, args.surfaces, args.repeats, seed=rc.seed)
        text += rep.summary()
        if args.workers > 1:
            text += evalbench.benchmark_parallel(params, args.surfaces, args.workers, args.repeats, rc.seed).summary()
    _write(args.out, text)


def cmd_attn(args, rc):
    params = _load_model(args.model)
    s = read_stream(args.input, args.input_format, args.width, args.height)
    trace = model.run_stream(s, params, rc.pipe)
    heads = range(params.config.heads) if args.head is None else [args.head]
    steps = range(len(trace)) if args.all_steps else [args.step]
    blob = b"".join(model.export_attention(trace, h, st).to_bytes() for st in steps for h in heads)
    _write(args.out, blob)


# --- parser ----------------------------------------------------------------

def _io(p, input_=True):
    if input_:
        p.add_argument("--input", required=True, help="event file ('-' for stdin)")
        p.add_argument("--input-format", choices=events.FORMATS, default=None)
        p.add_argument("--width", type=int, default=None, help="sensor width for csv input")
        p.add_argument("--height", type=int, default=None, help="sensor height for csv input")


def _common(p):
    p.add_argument("--config", default=None, help="key = value file; flags override it")
    p.add_argument("--out", default=None, help="output path ('-' or omitted: stdout)")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    _add_keys(p, COMMON_KEYS)


def _pipeline(p):
    _add_keys(p, DECAY_KEYS)
    _add_keys(p, FILTER_KEYS)
    p.add_argument("--no-filter", action="store_true", help="skip the isolated-event filter")


def _data(p):
    p.add_argument("--manifest", default=None, help="csv with path,label,subject columns")
    p.add_argument("--synthetic", type=int, default=None, help="use N synthetic streams per class")
    p.add_argument("--sensor-width", type=int, default=64)
    p.add_argument("--sensor-height", type=int, default=64)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="evaction", description="Event-camera action recognition pipeline")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("convert", help="convert between event formats")
    _common(p), _io(p)
    p.add_argument("--format", choices=events.FORMATS + ("framed",), default="binary_v1")
    p.add_argument("--chunk-events", type=int, default=256)

    p = sub.add_parser("filter", help="drop isolated events")
    _common(p), _io(p), _add_keys(p, FILTER_KEYS)
    p.add_argument("--format", choices=events.FORMATS, default=None)

    p = sub.add_parser("surfaces", help="write a time-surface sequence")
    _common(p), _io(p), _pipeline(p), _add_keys(p, {"input_hw": MODEL_KEYS["input_hw"]})
    p.add_argument("--horizon", type=int, default=None)

    p = sub.add_parser("synth", help="generate a synthetic stream")
    _common(p)
    p.add_argument("--pattern", choices=events.PATTERNS, required=True)
    p.add_argument("--duration", type=float, default=2.0)
    p.add_argument("--rate", type=float, default=20000.0)
    p.add_argument("--noise-rate", type=float, default=0.0)
    p.add_argument("--sensor-width", type=int, default=64)
    p.add_argument("--sensor-height", type=int, default=64)
    p.add_argument("--format", choices=events.FORMATS, default=None)

    p = sub.add_parser("train", help="staged training")
    _common(p), _pipeline(p), _data(p), _add_keys(p, MODEL_KEYS)
    p.add_argument("--schedule", choices=("three_stage", "two_stage"), default="three_stage")
    p.add_argument("--split", choices=training.SPLIT_KINDS, default="leave_one_subject_out")
    p.add_argument("--held-out", default=None)
    p.add_argument("--super-map", default=None, help="label:super pairs, e.g. 0:0,1:0,2:1")
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--log", default=None, help="epoch log csv")

    p = sub.add_parser("infer", help="per-surface confidence trace")
    _common(p), _io(p), _pipeline(p)
    p.add_argument("--model", required=True)
    p.add_argument("--stream", action="store_true", help="incremental mode; '-' reads framed stdin")
    p.add_argument("--chunk-events", type=int, default=256)
    p.add_argument("--plot", default=None, help="svg of the confidence trace")

    p = sub.add_parser("eval", help="accuracy over time and confusion matrix")
    _common(p), _pipeline(p), _data(p)
    p.add_argument("--model", required=True)
    p.add_argument("--bin-ms", type=int, default=100)
    p.add_argument("--confusion", default=None)
    p.add_argument("--plot", default=None, help="svg of the accuracy curve")

    p = sub.add_parser("bench", help="FLOPs and throughput")
    _common(p), _add_keys(p, MODEL_KEYS)
    p.add_argument("--model", default=None)
    p.add_argument("--surfaces", type=int, default=120)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--flops-only", action="store_true")
    p.add_argument("--workers", type=int, default=1, help="also time N independent streams in parallel processes")

    p = sub.add_parser("attn", help="export attention matrices (ATT1)")
    _common(p), _io(p), _pipeline(p)
    p.add_argument("--model", required=True)
    p.add_argument("--head", type=int, default=None, help="default: all heads")
    p.add_argument("--step", type=int, default=None, help="default: last step")
    p.add_argument("--all-steps", action="store_true")
    return ap


COMMANDS = {"convert": cmd_convert, "filter": cmd_filter, "surfaces": cmd_surfaces, "synth": cmd_synth,
            "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval, "bench": cmd_bench, "attn": cmd_attn}


def dispatch(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        if not argv:
            raise UsageError(parser.format_help())
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                            format="%(levelname)s %(message)s")
        rc = build_run_config(args)
        COMMANDS[args.command](args, rc)
        return EXIT_OK
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    except BrokenPipeError:
        return EXIT_OK
    except DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
