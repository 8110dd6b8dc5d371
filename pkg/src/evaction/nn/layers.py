"""Layer set used by the backbone, the encoder block and the classifier."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor

LAYER_KINDS = ("conv2d", "depthwise_conv2d", "dense", "scale_bias_norm", "layer_norm", "attention_heads")


class ConfigError(ValueError):
    pass


@dataclass
class LayerParams:
    kind: str
    weights: dict[str, Tensor]
    hyper: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        _check_shapes(self)

    def __getitem__(self, key: str) -> Tensor:
        return self.weights[key]

    def tensors(self):
        return self.weights.items()


def _check_shapes(p: LayerParams) -> None:
    w = p.weights
    if p.kind == "dense":
        if w["weight"].data.ndim != 2 or ("bias" in w and w["bias"].shape != (w["weight"].shape[1],)):
            raise DimensionError(f"dense weights inconsistent: {w['weight'].shape}")
    elif p.kind == "depthwise_conv2d":
        k = w["weight"].shape
        if len(k) != 3 or k[1] != k[2]:
            raise DimensionError(f"depthwise kernel must be C×K×K, got {k}")
    elif p.kind == "conv2d":
        if w["weight"].data.ndim != 4:
            raise DimensionError(f"conv2d kernel must be Cout×Cin×K×K, got {w['weight'].shape}")
    elif p.kind in ("scale_bias_norm", "layer_norm"):
        a, b = ("scale", "bias") if p.kind == "scale_bias_norm" else ("gamma", "beta")
        if w[a].shape != w[b].shape or w[a].data.ndim != 1:
            raise DimensionError(f"{p.kind} parameter shapes differ: {w[a].shape} vs {w[b].shape}")
    elif p.kind == "attention_heads":
        d = w["wq"].shape[0]
        heads = p.hyper.get("heads", 1)
        if d % heads:
            raise ConfigError(f"model dim {d} not divisible by {heads} heads")
        for name in ("wq", "wk", "wv", "wo"):
            if w[name].shape != (d, d):
                raise DimensionError(f"attention {name} must be {d}×{d}, got {w[name].shape}")


# --- initialisers ----------------------------------------------------------

def init_dense(rng: np.random.Generator, d_in: int, d_out: int, dtype=np.float32, std: float | None = None) -> LayerParams:
    std = np.sqrt(2.0 / (d_in + d_out)) if std is None else std
    return LayerParams("dense", {
        "weight": Tensor(rng.normal(0, std, (d_in, d_out)).astype(dtype), requires_grad=True),
        "bias": Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True),
    })


def init_depthwise(rng, channels: int, k: int = 3, stride: int = 1, dtype=np.float32) -> LayerParams:
    w = rng.normal(0, np.sqrt(2.0 / (k * k)), (channels, k, k)).astype(dtype)
    return LayerParams("depthwise_conv2d", {"weight": Tensor(w, requires_grad=True)},
                       {"stride": stride, "pad": k // 2})


def init_conv(rng, c_in: int, c_out: int, k: int = 1, stride: int = 1, dtype=np.float32, bias: bool = False) -> LayerParams:
    w = rng.normal(0, np.sqrt(2.0 / (c_in * k * k)), (c_out, c_in, k, k)).astype(dtype)
    weights = {"weight": Tensor(w, requires_grad=True)}
    if bias:
        weights["bias"] = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)
    return LayerParams("conv2d", weights, {"stride": stride, "pad": k // 2})


def init_scale_bias(channels: int, dtype=np.float32) -> LayerParams:
    return LayerParams("scale_bias_norm", {
        "scale": Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
        "bias": Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
    })


def init_layer_norm(dim: int, dtype=np.float32) -> LayerParams:
    return LayerParams("layer_norm", {
        "gamma": Tensor(np.ones(dim, dtype=dtype), requires_grad=True),
        "beta": Tensor(np.zeros(dim, dtype=dtype), requires_grad=True),
    })


def init_attention(rng, dim: int, heads: int, dtype=np.float32) -> LayerParams:
    if dim % heads:
        raise ConfigError(f"model dim {dim} not divisible by {heads} heads")
    std = np.sqrt(1.0 / dim)
    weights = {}
    for name in ("q", "k", "v", "o"):
        weights["w" + name] = Tensor(rng.normal(0, std, (dim, dim)).astype(dtype), requires_grad=True)
        weights["b" + name] = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)
    return LayerParams("attention_heads", weights, {"heads": heads})


# --- forward passes --------------------------------------------------------

def dense_forward(x: Tensor, p: LayerParams) -> Tensor:
    return T.linear(x, p["weight"], p.weights.get("bias"))


def conv_forward(x: Tensor, p: LayerParams) -> Tensor:
    return T.conv2d(x, p["weight"], p.weights.get("bias"), stride=p.hyper.get("stride", 1), pad=p.hyper.get("pad", 0))


def depthwise_forward(x: Tensor, p: LayerParams) -> Tensor:
    return T.depthwise_conv2d(x, p["weight"], stride=p.hyper.get("stride", 1), pad=p.hyper.get("pad", 1))


def sepconv_forward(x: Tensor, depthwise: LayerParams, pointwise: LayerParams) -> Tensor:
    """Depthwise K×K convolution followed by a 1×1 pointwise convolution."""
    if pointwise["weight"].shape[1] != depthwise["weight"].shape[0]:
        raise DimensionError(
            f"pointwise input channels {pointwise['weight'].shape[1]} != depthwise channels {depthwise['weight'].shape[0]}")
    return conv_forward(depthwise_forward(x, depthwise), pointwise)


def scale_bias_forward(x: Tensor, p: LayerParams) -> Tensor:
    return T.scale_bias(x, p["scale"], p["bias"])


def layer_norm_forward(x: Tensor, p: LayerParams) -> Tensor:
    return T.layer_norm(x, p["gamma"], p["beta"])


def causal_mask(length: int, dtype=np.float32) -> np.ndarray:
    """0 on and below the diagonal, -inf above it."""
    if length < 1:
        raise ValueError("mask length must be >= 1")
    m = np.zeros((length, length), dtype=dtype)
    m[np.triu_indices(length, k=1)] = -np.inf
    return m


def positional_encoding(length: int, dim: int, dtype=np.float64) -> np.ndarray:
    if dim % 2:
        raise ValueError("positional encoding needs an even dimension")
    pos = np.arange(length, dtype=np.float64)[:, None]
    freq = 10000.0 ** (np.arange(0, dim, 2, dtype=np.float64) / dim)
    pe = np.empty((length, dim), dtype=np.float64)
    pe[:, 0::2] = np.sin(pos / freq)
    pe[:, 1::2] = np.cos(pos / freq)
    return pe.astype(dtype)


def mha_forward(tokens: Tensor, p: LayerParams, mask: np.ndarray | None = None) -> tuple[Tensor, np.ndarray]:
    """Multi-head scaled dot-product self-attention.

    ``tokens`` is ``(..., L, D)``. Returns the projected output with the same
    shape and the attention weights as ``(..., heads, L, L)``.
    """
    heads = p.hyper.get("heads", 1)
    *lead, length, dim = tokens.shape
    if dim % heads:
        raise ConfigError(f"model dim {dim} not divisible by {heads} heads")
    if p["wq"].shape[0] != dim:
        raise DimensionError(f"attention expects dim {p['wq'].shape[0]}, got tokens {tokens.shape}")
    dh = dim // heads

    def split(t: Tensor) -> Tensor:
        t = T.reshape(t, (*lead, length, heads, dh))
        nd = len(lead)
        return T.transpose(t, (*range(nd), nd + 1, nd, nd + 2))

    q = split(T.linear(tokens, p["wq"], p["bq"]))
    k = split(T.linear(tokens, p["wk"], p["bk"]))
    v = split(T.linear(tokens, p["wv"], p["bv"]))
    nd = len(lead)
    kt = T.transpose(k, (*range(nd), nd, nd + 2, nd + 1))
    scores = T.mul(T.matmul(q, kt), 1.0 / np.sqrt(dh))
    if mask is not None:
        scores = T.add(scores, T.Tensor(np.asarray(mask, dtype=tokens.dtype)))
    attn = T.softmax(scores, axis=-1)
    ctx = T.matmul(attn, v)
    ctx = T.transpose(ctx, (*range(nd), nd + 1, nd, nd + 2))
    ctx = T.reshape(ctx, (*lead, length, dim))
    return T.linear(ctx, p["wo"], p["bo"]), attn.data


def softmax_xent(logits: Tensor, labels) -> tuple[Tensor, np.ndarray]:
    return T.softmax_cross_entropy(logits, labels)
