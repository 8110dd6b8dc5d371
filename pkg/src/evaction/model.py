"""Separable-conv backbone + causal transformer encoder for online action prediction.

Each time surface goes through the backbone once; its embedding is
appended to a bounded feature queue and the encoder re-reads the queue
under a causal mask. The class distribution comes from the newest token.
"""

from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .events import EventStream
from .nn import checkpoint
from .nn import layers as L
from .nn import tensor as T
from .nn.layers import ConfigError, LayerParams
from .nn.tensor import DimensionError, Tensor, no_grad
from .preprocess import (DecayConfig, FilterConfig, TimeSurface, filter_isolated, horizon_for,
                         resize_array, surface_sequence)

DEFAULT_BACKBONE = ((16, 2), (24, 1), (32, 2), (48, 1), (64, 2), (96, 1), (128, 2))
HEAD_SCOPE = ("head.",)
ATT_MAGIC = b"ATT1"
ATT_HEADER = struct.Struct("<4sIBH")

# images pushed through the backbone since import; read via backbone_images()
_BACKBONE_IMAGES = [0]


def backbone_images() -> int:
    return _BACKBONE_IMAGES[0]


@dataclass(frozen=True)
class ModelConfig:
    input_hw: tuple[int, int] = (144, 144)
    embed_dim: int = 256
    heads: int = 4
    encoder_layers: int = 1
    queue_len: int = 60
    num_classes: int = 30
    backbone_spec: tuple[tuple[int, int], ...] = DEFAULT_BACKBONE
    ff_dim: int = 512

    def __post_init__(self):
        object.__setattr__(self, "input_hw", tuple(int(v) for v in self.input_hw))
        object.__setattr__(self, "backbone_spec", tuple((int(c), int(s)) for c, s in self.backbone_spec))
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.embed_dim % 2:
            raise ConfigError("embed_dim must be even for the sinusoidal positional encoding")
        if self.queue_len < 1:
            raise ConfigError("queue_len must be >= 1")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.encoder_layers < 1:
            raise ConfigError("encoder_layers must be >= 1")
        if not self.backbone_spec:
            raise ConfigError("backbone_spec needs at least one block")
        if min(self.input_hw) < 1:
            raise ConfigError("input_hw must be positive")

    def feature_hw(self) -> list[tuple[int, int]]:
        """Spatial size after each backbone block (3×3, same padding)."""
        h, w = self.input_hw
        out = []
        for _, stride in self.backbone_spec:
            h = (h + 2 - 3) // stride + 1
            w = (w + 2 - 3) // stride + 1
            out.append((h, w))
        return out


class ModelParams:
    """All learnable layers, keyed by dotted layer name."""

    def __init__(self, config: ModelConfig, layers: dict[str, LayerParams]):
        self.config = config
        self.layers = layers

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0, dtype=np.float32) -> "ModelParams":
        rng = np.random.default_rng(seed)
        layers: dict[str, LayerParams] = {}
        c_in = 1
        for i, (c_out, stride) in enumerate(config.backbone_spec):
            pre = f"backbone.{i}"
            layers[f"{pre}.dw"] = L.init_depthwise(rng, c_in, 3, stride, dtype)
            layers[f"{pre}.dw_norm"] = L.init_scale_bias(c_in, dtype)
            layers[f"{pre}.pw"] = L.init_conv(rng, c_in, c_out, 1, 1, dtype)
            layers[f"{pre}.pw_norm"] = L.init_scale_bias(c_out, dtype)
            c_in = c_out
        d = config.embed_dim
        layers["proj.0"] = L.init_dense(rng, c_in, d, dtype)
        layers["proj.1"] = L.init_dense(rng, d, d, dtype)
        for j in range(config.encoder_layers):
            pre = f"encoder.{j}"
            layers[f"{pre}.ln1"] = L.init_layer_norm(d, dtype)
            layers[f"{pre}.attn"] = L.init_attention(rng, d, config.heads, dtype)
            layers[f"{pre}.ln2"] = L.init_layer_norm(d, dtype)
            layers[f"{pre}.ff1"] = L.init_dense(rng, d, config.ff_dim, dtype)
            layers[f"{pre}.ff2"] = L.init_dense(rng, config.ff_dim, d, dtype)
        layers["head.ln"] = L.init_layer_norm(d, dtype)
        layers["head.out"] = L.init_dense(rng, d, config.num_classes, dtype, std=0.02)
        return cls(config, layers)

    def tensors(self) -> dict[str, Tensor]:
        return {f"{name}.{key}": t for name, lp in self.layers.items() for key, t in lp.weights.items()}

    def names(self, scope: str = "all") -> list[str]:
        names = list(self.tensors())
        if scope == "all":
            return names
        if scope == "head_only":
            return [n for n in names if n.startswith(HEAD_SCOPE)]
        raise ValueError(f"unknown scope {scope!r}")

    def zero_grad(self) -> None:
        for t in self.tensors().values():
            t.grad = None

    def copy(self) -> "ModelParams":
        layers = {name: LayerParams(lp.kind, {k: Tensor(t.data.copy(), requires_grad=True) for k, t in lp.weights.items()},
                                    dict(lp.hyper)) for name, lp in self.layers.items()}
        return ModelParams(self.config, layers)

    def astype(self, dtype) -> "ModelParams":
        out = self.copy()
        for t in out.tensors().values():
            t.data = t.data.astype(dtype)
        return out

    def state_bytes(self, names=None) -> bytes:
        tensors = self.tensors()
        names = sorted(tensors) if names is None else names
        return b"".join(name.encode() + tensors[name].data.tobytes() for name in names)

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, t in self.tensors().items():
            if name not in arrays:
                raise KeyError(f"checkpoint missing tensor {name!r}")
            if arrays[name].shape != t.shape:
                raise DimensionError(f"checkpoint tensor {name!r} has shape {arrays[name].shape}, expected {t.shape}")
            t.data = arrays[name].astype(t.data.dtype).copy()

    # checkpoint I/O; config is stored as extra ``config.*`` tensors
    def to_arrays(self) -> dict[str, np.ndarray]:
        cfg = self.config
        arrays = {name: t.data for name, t in self.tensors().items()}
        arrays["config.input_hw"] = np.array(cfg.input_hw, np.float32)
        arrays["config.scalars"] = np.array([cfg.embed_dim, cfg.heads, cfg.encoder_layers, cfg.queue_len,
                                             cfg.num_classes, cfg.ff_dim], np.float32)
        arrays["config.backbone_spec"] = np.array(cfg.backbone_spec, np.float32).reshape(-1, 2)
        return arrays

    def save(self, path) -> None:
        checkpoint.save(path, self.to_arrays())

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "ModelParams":
        try:
            sc = [int(v) for v in arrays["config.scalars"]]
            config = ModelConfig(input_hw=tuple(int(v) for v in arrays["config.input_hw"]),
                                 embed_dim=sc[0], heads=sc[1], encoder_layers=sc[2], queue_len=sc[3],
                                 num_classes=sc[4], ff_dim=sc[5],
                                 backbone_spec=tuple((int(c), int(s)) for c, s in arrays["config.backbone_spec"]))
        except KeyError as exc:
            raise checkpoint.CheckpointError(f"checkpoint lacks model config tensor {exc}") from None
        params = cls.init(config)
        params.load_arrays(arrays)
        return params

    @classmethod
    def load(cls, path) -> "ModelParams":
        return cls.from_arrays(checkpoint.load(path))


# --- forward passes --------------------------------------------------------

def backbone_forward(params: ModelParams, images: Tensor) -> Tensor:
    """(N, H, W) or (N, 1, H, W) surfaces -> (N, embed_dim) embeddings."""
    x = images
    if x.data.ndim == 3:
        x = T.reshape(x, (x.shape[0], 1, *x.shape[1:]))
    _BACKBONE_IMAGES[0] += x.shape[0]
    ly = params.layers
    for i in range(len(params.config.backbone_spec)):
        pre = f"backbone.{i}"
        x = L.depthwise_forward(x, ly[f"{pre}.dw"])
        x = T.relu6(L.scale_bias_forward(x, ly[f"{pre}.dw_norm"]))
        x = L.conv_forward(x, ly[f"{pre}.pw"])
        x = T.relu6(L.scale_bias_forward(x, ly[f"{pre}.pw_norm"]))
    x = T.mean(x, axis=(2, 3))
    x = T.relu(L.dense_forward(x, ly["proj.0"]))
    return L.dense_forward(x, ly["proj.1"])


def encoder_body(params: ModelParams, tokens: Tensor) -> tuple[Tensor, np.ndarray]:
    """Causal encoder layers over ``(..., Lq, D)`` embeddings.

    Positions are encoded by index within the given window. Returns the
    encoded tokens and the attention weights of the last layer.
    """
    *_, length, dim = tokens.shape
    if dim != params.config.embed_dim:
        raise DimensionError(f"embedding dimension {dim} != model embed_dim {params.config.embed_dim}")
    ly = params.layers
    x = T.add(tokens, Tensor(L.positional_encoding(length, dim, tokens.dtype)))
    mask = L.causal_mask(length, tokens.dtype)
    attn = None
    for j in range(params.config.encoder_layers):
        pre = f"encoder.{j}"
        a, attn = L.mha_forward(L.layer_norm_forward(x, ly[f"{pre}.ln1"]), ly[f"{pre}.attn"], mask)
        x = T.add(x, a)
        h = T.relu(L.dense_forward(L.layer_norm_forward(x, ly[f"{pre}.ln2"]), ly[f"{pre}.ff1"]))
        x = T.add(x, L.dense_forward(h, ly[f"{pre}.ff2"]))
    return x, attn


def head_forward(params: ModelParams, encoded: Tensor) -> Tensor:
    return L.dense_forward(L.layer_norm_forward(encoded, params.layers["head.ln"]), params.layers["head.out"])


def encoder_forward(params: ModelParams, tokens: Tensor) -> tuple[Tensor, np.ndarray]:
    """Logits for every position plus last-layer attention."""
    x, attn = encoder_body(params, tokens)
    return head_forward(params, x), attn


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _check_surface(values: np.ndarray, config: ModelConfig) -> None:
    if tuple(values.shape[-2:]) != config.input_hw:
        raise DimensionError(f"surface is {values.shape[-2:]}, model expects {config.input_hw}; resize first")


def extract_features(surface: TimeSurface | np.ndarray, params: ModelParams) -> np.ndarray:
    """Backbone embedding of one surface already resized to ``input_hw``."""
    values = surface.values if isinstance(surface, TimeSurface) else np.asarray(surface)
    _check_surface(values, params.config)
    dtype = params.layers["proj.1"]["weight"].dtype
    with no_grad():
        out = backbone_forward(params, Tensor(values.astype(dtype)[None]))
    return out.data[0]


def extract_batch(values: np.ndarray, params: ModelParams) -> np.ndarray:
    _check_surface(values, params.config)
    dtype = params.layers["proj.1"]["weight"].dtype
    with no_grad():
        return backbone_forward(params, Tensor(np.asarray(values, dtype))).data


# --- online state ----------------------------------------------------------

class FeatureQueue:
    """Bounded FIFO of embeddings; the oldest is evicted at capacity."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.tokens: deque[np.ndarray] = deque(maxlen=capacity)
        self.oldest_step = 0

    def push(self, token: np.ndarray, step: int) -> None:
        self.tokens.append(token)
        self.oldest_step = step - len(self.tokens) + 1

    def __len__(self) -> int:
        return len(self.tokens)

    def array(self) -> np.ndarray:
        return np.stack(self.tokens)


@dataclass
class OnlineState:
    queue: FeatureQueue
    steps_seen: int = 0
    last_prediction: np.ndarray | None = None

    @classmethod
    def fresh(cls, config: ModelConfig) -> "OnlineState":
        return cls(FeatureQueue(config.queue_len))


def reset_state(state: OnlineState) -> OnlineState:
    return OnlineState(FeatureQueue(state.queue.capacity))


def push_and_predict(state: OnlineState, embedding: np.ndarray, params: ModelParams):
    """Queue ``embedding`` and re-run the encoder over the window.

    Returns ``(confidence, attention, state)``; the state is updated in place
    and returned for convenience. Attention is ``heads × L × L`` for the
    current window length L.
    """
    embedding = np.asarray(embedding)
    if embedding.shape != (params.config.embed_dim,):
        raise DimensionError(f"embedding shape {embedding.shape} != ({params.config.embed_dim},)")
    if state.queue.capacity != params.config.queue_len:
        raise ConfigError("online state was created for a different queue length")
    state.queue.push(embedding, state.steps_seen)
    state.steps_seen += 1
    dtype = params.layers["head.out"]["weight"].dtype
    with no_grad():
        logits, attn = encoder_forward(params, Tensor(state.queue.array().astype(dtype)))
    conf = _softmax(logits.data[-1].astype(np.float64))
    state.last_prediction = conf
    return conf, attn, state


def predict_offline(embeddings: np.ndarray, params: ModelParams) -> tuple[np.ndarray, np.ndarray]:
    """Per-step confidences (L × C) and attention (heads × L × L) from one causal pass."""
    embeddings = np.asarray(embeddings)
    if embeddings.ndim != 2 or embeddings.shape[1] != params.config.embed_dim:
        raise DimensionError(f"expected (L, {params.config.embed_dim}) embeddings, got {embeddings.shape}")
    if not 1 <= len(embeddings) <= params.config.queue_len:
        raise ValueError(f"sequence length {len(embeddings)} outside [1, {params.config.queue_len}]; window it first")
    dtype = params.layers["head.out"]["weight"].dtype
    with no_grad():
        logits, attn = encoder_forward(params, Tensor(embeddings.astype(dtype)))
    return _softmax(logits.data.astype(np.float64)), attn


# --- traces ----------------------------------------------------------------

@dataclass
class PredictionTrace:
    t_ref: list[int] = field(default_factory=list)
    confidences: list[np.ndarray] = field(default_factory=list)
    attention: list[np.ndarray] = field(default_factory=list)
    label: int | None = None
    subject: str | None = None
    backbone_calls: int = 0

    def __len__(self) -> int:
        return len(self.t_ref)

    def append(self, t_ref: int, conf: np.ndarray, attn: np.ndarray) -> None:
        self.t_ref.append(int(t_ref))
        self.confidences.append(np.asarray(conf))
        self.attention.append(np.asarray(attn))

    @property
    def argmax(self) -> np.ndarray:
        return np.array([int(np.argmax(c)) for c in self.confidences], dtype=np.int64)

    @property
    def times_ms(self) -> np.ndarray:
        return np.asarray(self.t_ref, np.float64) / 1000.0

    def conf_matrix(self) -> np.ndarray:
        return np.stack(self.confidences) if self.confidences else np.zeros((0, 0))

    def final_class(self) -> int:
        return int(np.argmax(self.confidences[-1]))


def trace_csv_header(num_classes: int) -> str:
    return ",".join(["t_ms"] + [f"conf_c{k}" for k in range(num_classes)] + ["argmax"])


def trace_csv_line(t_ref: int, conf: np.ndarray) -> str:
    vals = ",".join(f"{v:.9g}" for v in conf)
    return f"{t_ref / 1000.0:g},{vals},{int(np.argmax(conf))}"


def trace_to_csv(trace: PredictionTrace, num_classes: int | None = None) -> str:
    k = num_classes if num_classes is not None else (len(trace.confidences[0]) if trace.confidences else 0)
    lines = [trace_csv_header(k)]
    lines += [trace_csv_line(t, c) for t, c in zip(trace.t_ref, trace.confidences)]
    return "\n".join(lines) + "\n"


def read_trace_csv(text: str) -> PredictionTrace:
    rows = [r for r in text.strip().splitlines()[1:] if r]
    tr = PredictionTrace()
    for r in rows:
        vals = r.split(",")
        tr.t_ref.append(int(round(float(vals[0]) * 1000)))
        tr.confidences.append(np.array([float(v) for v in vals[1:-1]]))
    return tr


# --- pipeline --------------------------------------------------------------

@dataclass(frozen=True)
class PipelineConfig:
    decay: DecayConfig = DecayConfig()
    filter: FilterConfig | None = FilterConfig()


def prepare_surfaces(stream: EventStream, config: ModelConfig, pipe: PipelineConfig = PipelineConfig(),
                     horizon: int | None = None) -> list[TimeSurface]:
    """filter -> surfaces -> resize to the network input size."""
    if horizon is None:
        horizon = horizon_for(stream, pipe.decay)
    if horizon == 0:
        return []
    s = filter_isolated(stream, pipe.filter) if pipe.filter is not None else stream
    surfaces = surface_sequence(s, pipe.decay, horizon)
    h, w = config.input_hw
    return [TimeSurface(ts.t_ref, resize_array(ts.values, h, w)) for ts in surfaces]


def run_surfaces(surfaces, params: ModelParams, state: OnlineState | None = None,
                 trace: PredictionTrace | None = None) -> PredictionTrace:
    state = OnlineState.fresh(params.config) if state is None else state
    trace = PredictionTrace() if trace is None else trace
    for ts in surfaces:
        emb = extract_features(ts, params)
        trace.backbone_calls += 1
        conf, attn, state = push_and_predict(state, emb, params)
        trace.append(ts.t_ref, conf, attn)
    return trace


def run_stream(stream: EventStream, params: ModelParams, pipe: PipelineConfig = PipelineConfig(),
               horizon: int | None = None) -> PredictionTrace:
    """Online prediction over a whole stream: one trace entry per surface."""
    surfaces = prepare_surfaces(stream, params.config, pipe, horizon)
    trace = PredictionTrace(label=stream.label, subject=stream.subject)
    return run_surfaces(surfaces, params, trace=trace)


# --- attention export ------------------------------------------------------

@dataclass
class AttentionExport:
    step: int
    head: int
    matrix: np.ndarray

    def to_bytes(self) -> bytes:
        n = self.matrix.shape[0]
        return ATT_HEADER.pack(ATT_MAGIC, self.step, self.head, n) + np.ascontiguousarray(self.matrix, "<f4").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, offset: int = 0) -> tuple["AttentionExport", int]:
        magic, step, head, n = ATT_HEADER.unpack_from(data, offset)
        if magic != ATT_MAGIC:
            raise ValueError(f"bad attention magic at byte {offset}")
        start = offset + ATT_HEADER.size
        end = start + 4 * n * n
        if end > len(data):
            raise ValueError(f"truncated attention record at byte {offset}")
        m = np.frombuffer(data, "<f4", n * n, start).reshape(n, n).astype(np.float32)
        return cls(step, head, m), end


def export_attention(trace: PredictionTrace, head: int, step: int | None = None) -> AttentionExport:
    """Attention of one head at one step (default: the last step)."""
    if not trace.attention:
        raise ValueError("trace has no attention records")
    step = len(trace.attention) - 1 if step is None else step
    attn = trace.attention[step]
    if not 0 <= head < attn.shape[0]:
        raise IndexError(f"head {head} out of range [0, {attn.shape[0]})")
    m = np.tril(np.asarray(attn[head], np.float32))
    return AttentionExport(step, head, m)


def import_attention(data: bytes) -> list[AttentionExport]:
    out, off = [], 0
    while off < len(data):
        rec, off = AttentionExport.from_bytes(data, off)
        out.append(rec)
    return out
