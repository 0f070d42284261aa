"""Encoder model over beat sequences.

Sinusoidal positional encoding, a stack of encoder layers (masked
multi-head self-attention + feed-forward, post-norm residuals), and two
interchangeable output heads: a per-position linear head for next-beat
generation and a pooled sigmoid head for multi-label classification.
"""
from __future__ import annotations

from dataclasses import dataclass, fields, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor

NEG_INF = -1e9  # blocked attention score; large-negative instead of -inf to keep float32 NaN-free

GENERATIVE = "generative"
CLASSIFIER = "classifier"

# trunk fields must agree between a pre-training checkpoint and the
# classifier that reuses it; the head (and its width) may differ
TRUNK_FIELDS = ("d_model", "n_encoders", "n_heads", "dff", "d_qkv",
                "max_pos", "dropout_rate", "causal")


@dataclass
class ModelConfig:
    d_model: int = 1000
    n_encoders: int = 5
    n_heads: int = 8
    dff: int = 2048
    d_qkv: int | None = None  # derived as d_model // n_heads when omitted
    max_pos: int = 50
    d_class: int = 28
    dropout_rate: float = 0.1
    head: str = GENERATIVE
    causal: bool = True

    def __post_init__(self):
        if self.d_qkv is None:
            self.d_qkv = self.d_model // self.n_heads
        for name in ("d_model", "n_encoders", "n_heads", "dff", "d_qkv",
                     "max_pos", "d_class"):
            if getattr(self, name) <= 0:
                raise ValueError(f"ModelConfig.{name} must be positive")
        if self.d_qkv != self.d_model // self.n_heads:
            raise ValueError(
                f"d_qkv must be d_model // n_heads = "
                f"{self.d_model // self.n_heads}, got {self.d_qkv}")
        if self.n_heads * self.d_qkv > self.d_model:
            raise ValueError("n_heads * d_qkv exceeds d_model")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.head not in (GENERATIVE, CLASSIFIER):
            raise ValueError(f"unknown head {self.head!r}")

    def canonical_text(self) -> str:
        lines = [f"{f.name}={getattr(self, f.name)!r}" for f in fields(self)]
        return "\n".join(sorted(lines))

    def with_head(self, head: str) -> "ModelConfig":
        return replace(self, head=head)


def config_from_text(text: str) -> ModelConfig:
    import ast

    kwargs = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        kwargs[key.strip()] = ast.literal_eval(value.strip())
    return ModelConfig(**kwargs)


def positional_encoding(max_pos: int, d_model: int, dtype=np.float64) -> np.ndarray:
    """pe[p, 2i] = sin(p / 10000^(2i/d)), pe[p, 2i+1] = cos of the same angle."""
    pos = np.arange(max_pos, dtype=np.float64)[:, None]
    idx = np.arange(0, d_model, 2, dtype=np.float64)
    angles = pos / np.power(10000.0, idx / d_model)
    pe = np.zeros((max_pos, d_model))
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles[:, : d_model // 2])
    return pe.astype(dtype)


def build_attention_mask(n_real, seq_len: int, causal: bool = True) -> np.ndarray:
    """Allowed[i, j] for each sequence: causal (j <= i) AND key j unpadded.

    `n_real` scalar -> [seq, seq]; array of batch counts -> [B, 1, seq, seq]
    (the head axis broadcasts).
    """
    j = np.arange(seq_len)
    if np.ndim(n_real) == 0:
        allowed = j[None, :] < int(n_real)
        allowed = np.broadcast_to(allowed, (seq_len, seq_len)).copy()
        if causal:
            allowed &= j[None, :] <= j[:, None]
        return allowed
    counts = np.asarray(n_real, dtype=np.int64)
    allowed = j[None, None, :] < counts[:, None, None]
    allowed = np.broadcast_to(allowed[:, :, None, :] if allowed.ndim == 3 else allowed,
                              (counts.size, 1, seq_len, seq_len)).copy()
    if causal:
        allowed &= (j[None, :] <= j[:, None])[None, None, :, :]
    return allowed


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor,
                         allowed: np.ndarray | None,
                         return_weights: bool = False):
    """softmax(QKᵀ/√d_k)V with blocked scores set to -1e9 before the softmax."""
    d_k = q.shape[-1]
    scores = ad.mul(ad.matmul(q, ad.transpose(k, _swap_last(k.ndim))),
                    1.0 / np.sqrt(d_k))
    if allowed is not None:
        scores = ad.masked_fill(scores, ~allowed, NEG_INF)
    weights = ad.softmax(scores, axis=-1)
    out = ad.matmul(weights, v)
    if return_weights:
        return out, weights
    return out


def _swap_last(ndim: int) -> tuple:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def _linear(x: Tensor, params: dict, name: str) -> Tensor:
    return ad.add(ad.matmul(x, params[f"{name}.w"]), params[f"{name}.b"])


def multi_head_attention(x: Tensor, params: dict, prefix: str,
                         allowed: np.ndarray | None, config: ModelConfig) -> Tensor:
    """Project to q/k/v, split across heads, attend, concatenate, project out.

    x: [..., seq, d_model]; q/k/v projections are d_model -> d_model and the
    first n_heads*d_qkv columns are split into head slices of width d_qkv.
    """
    seq = x.shape[-2]
    if seq > config.max_pos:
        raise ValueError(f"sequence length {seq} exceeds max_pos {config.max_pos}")
    h, dk = config.n_heads, config.d_qkv
    used = h * dk
    batch = x.shape[:-2]

    def split_heads(t: Tensor) -> Tensor:
        if used < config.d_model:
            t = t[..., :used]
        t = ad.reshape(t, batch + (seq, h, dk))
        axes = tuple(range(len(batch))) + (len(batch) + 1, len(batch), len(batch) + 2)
        return ad.transpose(t, axes)  # [..., h, seq, dk]

    q = split_heads(_linear(x, params, f"{prefix}.wq"))
    k = split_heads(_linear(x, params, f"{prefix}.wk"))
    v = split_heads(_linear(x, params, f"{prefix}.wv"))
    attended = scaled_dot_attention(q, k, v, allowed)
    axes = tuple(range(len(batch))) + (len(batch) + 1, len(batch), len(batch) + 2)
    merged = ad.reshape(ad.transpose(attended, axes), batch + (seq, used))
    return _linear(merged, params, f"{prefix}.wo")


def encoder_layer(x: Tensor, params: dict, prefix: str,
                  allowed: np.ndarray | None, config: ModelConfig,
                  training: bool = False,
                  rng: ad.RngStream | None = None) -> Tensor:
    """Post-norm residual block: LN(x + Drop(MHA(x))), then LN(a + Drop(FFN(a)))."""
    def drop(t: Tensor) -> Tensor:
        gen = rng.generator() if (training and rng is not None) else None
        return ad.dropout(t, config.dropout_rate, training, gen)

    attn = multi_head_attention(x, params, f"{prefix}.attn", allowed, config)
    a1 = ad.layer_norm(ad.add(x, drop(attn)),
                       params[f"{prefix}.ln1.gamma"], params[f"{prefix}.ln1.beta"])
    hidden = ad.relu(_linear(a1, params, f"{prefix}.ffn.w1"))
    ff = _linear(hidden, params, f"{prefix}.ffn.w2")
    return ad.layer_norm(ad.add(a1, drop(ff)),
                         params[f"{prefix}.ln2.gamma"], params[f"{prefix}.ln2.beta"])


def forward(tokens, n_real=None, config: ModelConfig = None, params: dict = None,
            training: bool = False, rng: ad.RngStream | None = None) -> Tensor:
    """Run the encoder stack on token sequences.

    tokens: a beat sequence object (with .tokens and .n_real), a [seq, d_model]
    array, or a [batch, seq, d_model] array; n_real gives the count of unpadded
    positions (scalar, or one per batch row). Generative head returns
    per-position predictions; classifier head mean-pools unpadded positions
    and returns per-class probabilities.
    """
    if hasattr(tokens, "tokens") and hasattr(tokens, "n_real"):
        if n_real is None:
            n_real = tokens.n_real
        tokens = tokens.tokens
    if n_real is None or config is None or params is None:
        raise ValueError("forward needs n_real, config and params")
    arr = tokens.data if isinstance(tokens, Tensor) else np.asarray(tokens)
    batched = arr.ndim == 3
    counts = np.atleast_1d(np.asarray(n_real, dtype=np.int64))
    if np.any(counts <= 0):
        raise ValueError("sequence has no real beats")
    seq = arr.shape[-2]
    if seq > config.max_pos:
        raise ValueError(f"sequence length {seq} exceeds max_pos {config.max_pos}")

    pe = positional_encoding(config.max_pos, config.d_model, dtype=arr.dtype)[:seq]
    x = ad.add(tokens if isinstance(tokens, Tensor) else Tensor(arr), pe)
    if batched:
        allowed = build_attention_mask(counts, seq, config.causal)
    else:
        allowed = build_attention_mask(int(counts[0]), seq, config.causal)
    for i in range(config.n_encoders):
        x = encoder_layer(x, params, f"enc{i}", allowed, config, training, rng)

    if config.head == GENERATIVE:
        return _linear(x, params, "head")
    real = (np.arange(seq)[None, :] < counts[:, None]).astype(arr.dtype)
    if not batched:
        real = real[0]
    pooled = ad.mul(ad.sum_(ad.mul(x, real[..., None]), axis=-2),
                    (1.0 / counts.astype(np.float64)).astype(arr.dtype)[..., None]
                    if batched else 1.0 / float(counts[0]))
    if not batched:
        pooled = ad.reshape(pooled, (1, config.d_model))
    out = ad.sigmoid(_linear(pooled, params, "head"))
    return out if batched else ad.reshape(out, (config.d_class,))


def param_shapes(config: ModelConfig):
    """Yield (name, shape, kind) for every trainable parameter, in registry order."""
    d, used = config.d_model, config.n_heads * config.d_qkv
    for i in range(config.n_encoders):
        p = f"enc{i}"
        for proj in ("wq", "wk", "wv"):
            yield f"{p}.attn.{proj}.w", (d, d), "weight"
            yield f"{p}.attn.{proj}.b", (d,), "bias"
        yield f"{p}.attn.wo.w", (used, d), "weight"
        yield f"{p}.attn.wo.b", (d,), "bias"
        yield f"{p}.ffn.w1.w", (d, config.dff), "weight"
        yield f"{p}.ffn.w1.b", (config.dff,), "bias"
        yield f"{p}.ffn.w2.w", (config.dff, d), "weight"
        yield f"{p}.ffn.w2.b", (d,), "bias"
        yield f"{p}.ln1.gamma", (d,), "one"
        yield f"{p}.ln1.beta", (d,), "bias"
        yield f"{p}.ln2.gamma", (d,), "one"
        yield f"{p}.ln2.beta", (d,), "bias"
    out = d if config.head == GENERATIVE else config.d_class
    yield "head.w", (d, out), "weight"
    yield "head.b", (out,), "bias"


def init_params(config: ModelConfig, seed: int = 0, dtype=np.float32) -> dict[str, Parameter]:
    """Xavier-uniform weights, zero biases, unit layer-norm gains."""
    params: dict[str, Parameter] = {}
    for idx, (name, shape, kind) in enumerate(param_shapes(config)):
        if kind == "weight":
            data = ad.xavier_uniform(shape, (seed, 0, idx), dtype=dtype)
        elif kind == "one":
            data = np.ones(shape, dtype=dtype)
        else:
            data = np.zeros(shape, dtype=dtype)
        params[name] = Parameter(data, name)
    return params


def count_parameters(config: ModelConfig) -> int:
    return int(sum(int(np.prod(shape)) for _, shape, _ in param_shapes(config)))


def params_to_arrays(params: dict[str, Parameter]) -> dict[str, np.ndarray]:
    return {name: p.data for name, p in params.items()}


def params_from_arrays(arrays: dict[str, np.ndarray], config: ModelConfig,
                       dtype=np.float32) -> dict[str, Parameter]:
    params: dict[str, Parameter] = {}
    for name, shape, _ in param_shapes(config):
        if name not in arrays:
            raise ValueError(f"checkpoint is missing parameter {name}")
        arr = np.asarray(arrays[name], dtype=dtype)
        if arr.shape != shape:
            raise ValueError(
                f"parameter {name}: checkpoint shape {arr.shape} != expected {shape}")
        params[name] = Parameter(arr, name)
    return params


def config_diff(a: ModelConfig, b: ModelConfig) -> list[str]:
    out = []
    for f in fields(ModelConfig):
        va, vb = getattr(a, f.name), getattr(b, f.name)
        if va != vb:
            out.append(f"{f.name}: {va!r} != {vb!r}")
    return out


def trunk_compatible(a: ModelConfig, b: ModelConfig) -> list[str]:
    """Mismatched trunk fields between two configs (empty list = compatible)."""
    return [f"{name}: {getattr(a, name)!r} != {getattr(b, name)!r}"
            for name in TRUNK_FIELDS if getattr(a, name) != getattr(b, name)]
