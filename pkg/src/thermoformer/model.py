"""Decoder-only thermal forecaster with static enrichment and Euler residual output.

Pipeline per window:

1. project the ``[n, f]`` past block to ``[n, hidden]``
2. ``n_layers_past`` causal RoPE blocks; the last position is the temporal state
3. add the projected static descriptors to that state
4. append the projected future-known covariates as a second token
5. ``n_layers_future`` causal RoPE blocks over the 2-token sequence
6. final layer norm and a linear head on the last token -> ΔT̂ (°C)

The predicted temperature is ``t_prev + ΔT̂``.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, DataError, NumericFault, ShapeError
from .features import STATIC_FIELDS, Standardizer, WindowBatch, WindowSample, stack_samples, window_derivative

MASK_VALUE = -1e9
CHECKPOINT_MAGIC = b"THFMCKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    hidden_dim: int = 64
    n_layers_past: int = 2
    n_layers_future: int = 1
    n_heads: int = 4
    ffn_dim: int = 128
    context_length: int = 24
    rope_base: float = 10000.0
    dropout: float = 0.0
    input_dim: int = 10
    static_dim: int = len(STATIC_FIELDS)
    future_dim: int = 4
    ln_eps: float = 1e-5

    def __post_init__(self):
        dims = ("hidden_dim", "n_layers_past", "n_layers_future", "n_heads", "ffn_dim", "input_dim", "static_dim", "future_dim")
        for k in dims:
            if not isinstance(getattr(self, k), int) or getattr(self, k) <= 0:
                raise ConfigError(f"model.{k} must be a positive integer, got {getattr(self, k)!r}")
        if self.context_length < 2:
            raise ConfigError(f"model.context_length must be >= 2, got {self.context_length}")
        if self.hidden_dim % self.n_heads:
            raise ConfigError(f"hidden_dim {self.hidden_dim} is not divisible by n_heads {self.n_heads}")
        if self.head_dim % 2:
            raise ConfigError(f"head_dim {self.head_dim} must be even for rotary embeddings")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if not self.rope_base > 0 or not self.ln_eps > 0:
            raise ConfigError("rope_base and ln_eps must be positive")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.n_heads


Params = dict  # name -> Tensor, insertion order is the serialization order


def _block_shapes(prefix: str, c: ModelConfig) -> list[tuple[str, tuple]]:
    H, F = c.hidden_dim, c.ffn_dim
    return [
        (f"{prefix}.ln1.g", (H,)),
        (f"{prefix}.ln1.b", (H,)),
        (f"{prefix}.attn.wq", (H, H)),
        (f"{prefix}.attn.wk", (H, H)),
        (f"{prefix}.attn.wv", (H, H)),
        (f"{prefix}.attn.wo", (H, H)),
        (f"{prefix}.attn.bo", (H,)),
        (f"{prefix}.ln2.g", (H,)),
        (f"{prefix}.ln2.b", (H,)),
        (f"{prefix}.ffn.w1", (H, F)),
        (f"{prefix}.ffn.b1", (F,)),
        (f"{prefix}.ffn.w2", (F, H)),
        (f"{prefix}.ffn.b2", (H,)),
    ]


def param_shapes(c: ModelConfig) -> list[tuple[str, tuple]]:
    H = c.hidden_dim
    shapes = [
        ("input.w", (c.input_dim, H)),
        ("input.b", (H,)),
        ("static.w", (c.static_dim, H)),
        ("static.b", (H,)),
        ("future.w", (c.future_dim, H)),
        ("future.b", (H,)),
    ]
    for i in range(c.n_layers_past):
        shapes += _block_shapes(f"past.{i}", c)
    for i in range(c.n_layers_future):
        shapes += _block_shapes(f"fut.{i}", c)
    shapes += [("final_ln.g", (H,)), ("final_ln.b", (H,)), ("head.w", (H, 1)), ("head.b", (1,))]
    return shapes


def count_parameters(c: ModelConfig) -> int:
    return sum(int(np.prod(s)) for _, s in param_shapes(c))


def init_params(c: ModelConfig, seed: int = 0) -> Params:
    """Scaled-normal weights (std 1/sqrt(fan_in)), unit LN gains, zero biases, small output head."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(c):
        if name.endswith((".g",)):
            data = np.ones(shape)
        elif len(shape) == 1:
            data = np.zeros(shape)
        else:
            data = rng.normal(0.0, 1.0 / math.sqrt(shape[0]), size=shape)
            if name == "head.w":
                data *= 0.1
        params[name] = Tensor(data, requires_grad=True)
    return params


def params_from_arrays(arrays: Mapping[str, np.ndarray], c: ModelConfig) -> Params:
    params = {}
    for name, shape in param_shapes(c):
        if name not in arrays:
            raise DataError(f"parameter {name} missing")
        arr = np.asarray(arrays[name], dtype=np.float64)
        if arr.shape != shape:
            raise ShapeError(f"parameter {name} has shape {arr.shape}, config needs {shape}")
        params[name] = Tensor(arr.copy(), requires_grad=True)
    return params


def copy_params(params: Params) -> Params:
    return {k: Tensor(v.data.copy(), requires_grad=True) for k, v in params.items()}


# rotary embeddings ------------------------------------------------------

def rope_tables(positions: Sequence[int], head_dim: int, base: float) -> tuple[np.ndarray, np.ndarray]:
    if head_dim % 2:
        raise ConfigError(f"rotary embedding needs an even head_dim, got {head_dim}")
    pos = np.asarray(positions, dtype=np.float64)
    inv_freq = base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    angles = pos[:, None] * inv_freq[None, :]
    return np.cos(angles), np.sin(angles)


def rope_rotate(x, positions: Sequence[int], base: float = 10000.0) -> Tensor:
    """Rotate pairs ``(x[2i], x[2i+1])`` of ``x: [..., seq, heads, head_dim]`` by ``pos * base**(-2i/head_dim)``."""
    x = ad.as_tensor(x)
    *lead, seq, heads, hd = x.shape
    if hd % 2:
        raise ConfigError(f"rotary embedding needs an even head_dim, got {hd}")
    if len(positions) != seq:
        raise ShapeError(f"{len(positions)} positions for a sequence of {seq}")
    cos, sin = rope_tables(positions, hd, base)
    cos = np.broadcast_to(cos[:, None, :], (seq, heads, hd // 2))
    sin = np.broadcast_to(sin[:, None, :], (seq, heads, hd // 2))
    pairs = ad.reshape(x, (*lead, seq, heads, hd // 2, 2))
    even = ad.slice_(pairs, (..., 0))
    odd = ad.slice_(pairs, (..., 1))
    r_even = even * cos - odd * sin
    r_odd = even * sin + odd * cos
    shape1 = (*lead, seq, heads, hd // 2, 1)
    out = ad.concat([ad.reshape(r_even, shape1), ad.reshape(r_odd, shape1)], axis=-1)
    return ad.reshape(out, x.shape)


def attention_scores(
    q, k, positions: Sequence[int], base: float = 10000.0, causal: bool = False, key_positions: Sequence[int] | None = None
) -> Tensor:
    """Scaled dot-product scores ``[..., heads, q_seq, k_seq]`` after rotating ``q`` and ``k``.

    ``positions`` index the queries; keys use ``key_positions`` (default: the same).
    """
    key_positions = positions if key_positions is None else key_positions
    q = rope_rotate(q, positions, base)
    k = rope_rotate(k, key_positions, base)
    nd = q.ndim
    lead = tuple(range(nd - 3))
    qh = ad.transpose(q, lead + (nd - 2, nd - 3, nd - 1))
    kt = ad.transpose(k, lead + (nd - 2, nd - 1, nd - 3))
    scores = ad.matmul(qh, kt) * (1.0 / math.sqrt(q.shape[-1]))
    if causal:
        qp = np.asarray(list(positions))[:, None]
        kp = np.asarray(list(key_positions))[None, :]
        mask = np.where(kp > qp, MASK_VALUE, 0.0)
        if mask.any():
            scores = scores + mask
    return scores


# blocks -----------------------------------------------------------------

def _linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = ad.matmul(x, w)
    return y if b is None else y + b


def _dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    if p <= 0 or rng is None:
        return x
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * mask


def attention_block(
    h: Tensor,
    params: Params,
    prefix: str,
    config: ModelConfig,
    causal: bool = True,
    rng: np.random.Generator | None = None,
    layer_index: int | None = None,
    last_only: bool = False,
) -> Tensor:
    """Pre-norm block: ``h + MHA(LN(h))`` then ``+ FFN(LN(.))`` on ``h: [B, seq, hidden]``.

    With ``last_only`` only the final position is computed (keys and values
    still span the whole sequence); under causal masking this equals the last
    row of the full output.
    """
    p = lambda name: params[f"{prefix}.{name}"]  # noqa: E731
    c = config
    B, seq, H = h.shape
    if H != c.hidden_dim:
        raise ShapeError(f"{prefix}: hidden size {H} != config {c.hidden_dim}")
    heads, hd = c.n_heads, c.head_dim
    positions = range(seq)

    x = ad.layer_norm(h, p("ln1.g"), p("ln1.b"), c.ln_eps)
    if last_only:
        h = ad.slice_(h, (slice(None), slice(seq - 1, seq), slice(None)))
        xq, q_pos = ad.slice_(x, (slice(None), slice(seq - 1, seq), slice(None))), range(seq - 1, seq)
    else:
        xq, q_pos = x, positions
    sq = len(q_pos)
    q = ad.reshape(_linear(xq, p("attn.wq")), (B, sq, heads, hd))
    k = ad.reshape(_linear(x, p("attn.wk")), (B, seq, heads, hd))
    v = ad.reshape(_linear(x, p("attn.wv")), (B, seq, heads, hd))
    scores = attention_scores(q, k, q_pos, c.rope_base, causal=causal, key_positions=positions)
    weights = ad.softmax(scores, axis=-1)
    ctx = ad.matmul(weights, ad.transpose(v, (0, 2, 1, 3)))  # [B, heads, sq, hd]
    ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (B, sq, H))
    h = h + _dropout(_linear(ctx, p("attn.wo"), p("attn.bo")), c.dropout, rng)

    x = ad.layer_norm(h, p("ln2.g"), p("ln2.b"), c.ln_eps)
    f = _linear(ad.gelu(_linear(x, p("ffn.w1"), p("ffn.b1"))), p("ffn.w2"), p("ffn.b2"))
    h = h + _dropout(f, c.dropout, rng)
    if not h.all_finite():
        where = prefix if layer_index is None else f"{prefix} (layer {layer_index})"
        raise NumericFault(f"non-finite activations after {where}")
    return h


def encode_past(past, params: Params, config: ModelConfig, rng=None) -> Tensor:
    """Temporal state of the last past position, ``[B, hidden]``."""
    past = ad.as_tensor(past)
    B, n, f = past.shape
    h = _linear(past, params["input.w"], params["input.b"])
    last = config.n_layers_past - 1
    for i in range(config.n_layers_past):
        h = attention_block(h, params, f"past.{i}", config, causal=True, rng=rng, layer_index=i, last_only=i == last)
    return ad.reshape(h, (B, config.hidden_dim))


def forward_batch(past, static, future, params: Params, config: ModelConfig, rng=None) -> Tensor:
    """Raw ΔT̂ for a batch: ``past [B, n, f]``, ``static [B, 6]``, ``future [B, k]`` -> ``[B]``."""
    past, static, future = ad.as_tensor(past), ad.as_tensor(static), ad.as_tensor(future)
    c = config
    if past.ndim != 3 or past.shape[1:] != (c.context_length, c.input_dim):
        raise ConfigError(f"past block {past.shape} does not match [B, {c.context_length}, {c.input_dim}]")
    B = past.shape[0]
    if static.shape != (B, c.static_dim):
        raise ConfigError(f"static block {static.shape} does not match [{B}, {c.static_dim}]")
    if future.shape != (B, c.future_dim):
        raise ConfigError(f"future block {future.shape} does not match [{B}, {c.future_dim}]")

    state = encode_past(past, params, c, rng)
    fused = state + _linear(static, params["static.w"], params["static.b"])
    fut = _linear(future, params["future.w"], params["future.b"])
    H = c.hidden_dim
    h = ad.concat([ad.reshape(fused, (B, 1, H)), ad.reshape(fut, (B, 1, H))], axis=1)
    for i in range(c.n_layers_future):
        h = attention_block(h, params, f"fut.{i}", c, causal=True, rng=rng, layer_index=c.n_layers_past + i)
    last = ad.reshape(ad.slice_(h, (slice(None), slice(1, 2), slice(None))), (B, H))
    last = ad.layer_norm(last, params["final_ln.g"], params["final_ln.b"], c.ln_eps)
    return ad.reshape(_linear(last, params["head.w"], params["head.b"]), (B,))


def euler_increment(t_prev, delta):
    """The part of ``delta`` that survives ``t_prev + delta`` in float64.

    Returning this instead of the raw network output makes the Euler step
    exactly invertible: ``(t_prev + inc) - t_prev == inc`` bit for bit.
    """
    t_prev = np.asarray(t_prev, dtype=np.float64)
    inc = np.asarray(delta, dtype=np.float64)
    for _ in range(4):
        nxt = (t_prev + inc) - t_prev
        if np.array_equal(nxt, inc):
            break
        inc = nxt
    return inc


def forward(sample: WindowSample, params: Params, config: ModelConfig) -> float:
    """Predicted temperature change ΔT̂ (°C) for one window."""
    past, static, future = stack_samples([sample])
    with ad.no_grad():
        raw = forward_batch(past, static, future, params, config).data[0]
    return float(euler_increment(sample.t_prev, raw))


def predict_temperature(sample: WindowSample, params: Params, config: ModelConfig) -> float:
    return float(sample.t_prev + forward(sample, params, config))


def predict_batch(batch: WindowBatch, params: Params, config: ModelConfig, chunk: int = 2048) -> np.ndarray:
    """Vectorized :func:`predict_temperature` over a :class:`WindowBatch`."""
    out = np.empty(len(batch))
    with ad.no_grad():
        for s in range(0, len(batch), chunk):
            e = min(s + chunk, len(batch))
            raw = forward_batch(batch.past[s:e], batch.static[s:e], batch.future[s:e], params, config).data
            out[s:e] = batch.t_prev[s:e] + euler_increment(batch.t_prev[s:e], raw)
    return out


def rollout(
    samples: Sequence[WindowSample],
    params: Params,
    config: ModelConfig,
    horizon: int,
    standardizer: Standardizer,
) -> np.ndarray:
    """Free-running prediction for ``horizon`` consecutive targets starting at ``samples[0]``.

    Predicted indoor temperatures replace the observed ones (and their
    derivative channel) in later windows; every other channel stays observed.
    Multi-step rollout goes beyond the single-step protocol the model is
    trained for.
    """
    if horizon < 1:
        raise ContractError(f"horizon must be >= 1, got {horizon}")
    if len(samples) < horizon:
        raise ContractError(f"rollout of {horizon} steps needs {horizon} samples, got {len(samples)}")
    for a, b in zip(samples[:horizon], samples[1:horizon]):
        if b.building_id != a.building_id or b.target_index != a.target_index + 1:
            raise ContractError(
                f"samples are not consecutive: ({a.building_id}, {a.target_index}) -> ({b.building_id}, {b.target_index})"
            )
    n = config.context_length
    t0 = samples[0].target_index
    mu, sd = standardizer.past.mean, standardizer.past.std
    d_col = len(mu) // 2  # derivative of channel 0 (t_in)
    preds: list[float] = []
    for h in range(horizon):
        s = samples[h]
        if h == 0:
            cur = s
        else:
            t_in = s.past[:, 0] * sd[0] + mu[0]
            start = s.target_index - n  # record index of window row 0
            for j, pred in enumerate(preds):
                row = t0 + j - start
                if 0 <= row < n:
                    t_in[row] = pred
            past = s.past.copy()
            past[:, 0] = (t_in - mu[0]) / sd[0]
            past[:, d_col] = (window_derivative(t_in[:, None])[:, 0] - mu[d_col]) / sd[d_col]
            cur = WindowSample(past, s.static, s.future, preds[-1], float("nan"), s.building_id, s.target_index)
        preds.append(predict_temperature(cur, params, config))
    return np.array(preds)


# checkpoints ------------------------------------------------------------

@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    standardizer: Standardizer
    meta: dict = field(default_factory=dict)

    def tensors(self) -> Params:
        return params_from_arrays(self.params, self.config)

    def to_bytes(self) -> bytes:
        header = {
            "format_version": CHECKPOINT_VERSION,
            "model_config": asdict(self.config),
            "standardizer": self.standardizer.to_dict(),
            "parameter_names": [n for n, _ in param_shapes(self.config)],
            "meta": self.meta,
        }
        blob = json.dumps(header, sort_keys=True).encode("utf-8")
        buf = io.BytesIO()
        buf.write(CHECKPOINT_MAGIC)
        buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        buf.write(blob)
        for name in header["parameter_names"]:
            raw = name.encode("utf-8")
            buf.write(struct.pack("<I", len(raw)))
            buf.write(raw)
            ad.write_tensor(buf, self.params[name])
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> Checkpoint:
        buf = io.BytesIO(data)
        if buf.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise DataError("not a thermoformer checkpoint")
        version, hlen = struct.unpack("<II", buf.read(8))
        if version != CHECKPOINT_VERSION:
            raise DataError(f"unsupported checkpoint version {version}")
        header = json.loads(buf.read(hlen).decode("utf-8"))
        config = ModelConfig(**header["model_config"])
        params = {}
        for _ in header["parameter_names"]:
            (nlen,) = struct.unpack("<I", buf.read(4))
            name = buf.read(nlen).decode("utf-8")
            params[name] = ad.read_tensor(buf)
        params_from_arrays(params, config)  # validates shapes
        return cls(config, params, Standardizer.from_dict(header["standardizer"]), header.get("meta", {}))

    def save(self, path) -> str:
        data = self.to_bytes()
        Path(path).write_bytes(data)
        return hashlib.sha256(data).hexdigest()

    @classmethod
    def load(cls, path) -> Checkpoint:
        path = Path(path)
        if not path.exists():
            raise DataError(f"checkpoint {path} does not exist")
        return cls.from_bytes(path.read_bytes())

    def sha256(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def make_checkpoint(params: Params, config: ModelConfig, standardizer: Standardizer, meta: dict | None = None) -> Checkpoint:
    if standardizer.n_past != config.input_dim or standardizer.n_future != config.future_dim:
        raise ConfigError(
            f"standardizer produces {standardizer.n_past} past / {standardizer.n_future} future channels, "
            f"model expects {config.input_dim} / {config.future_dim}"
        )
    return Checkpoint(config, {k: v.data.copy() for k, v in params.items()}, standardizer, dict(meta or {}))
