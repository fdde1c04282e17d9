"""Hand-written dense networks: the shared-weight patch encoder (CFN) with a
two-layer aggregate head, embedding extraction, checkpoints and Adam.

A batch of shuffled inputs has shape ``(B, n, d)``.  The encoder runs on all
``B * n`` patches at once with a single set of weights; its outputs are
concatenated per example in patch order (the embedding) and fed to the head,
which returns ``B`` score vectors.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .patches import FormatError, SliceSpec, slice_batch

CKPT_MAGIC = b"PERMCFN1"


@dataclass
class DenseLayer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ("relu", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ValueError(f"inconsistent layer shapes {self.weight.shape} / {self.bias.shape}")

    @property
    def fan_in(self) -> int:
        return self.weight.shape[1]

    @property
    def fan_out(self) -> int:
        return self.weight.shape[0]


def glorot_layer(rng: np.random.Generator, fan_in: int, fan_out: int, activation: str, dtype) -> DenseLayer:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    w = rng.uniform(-limit, limit, size=(fan_out, fan_in)).astype(dtype)
    return DenseLayer(w, np.zeros(fan_out, dtype=dtype), activation)


def mlp_forward(layers: list[DenseLayer], x: np.ndarray):
    """Run ``x`` of shape ``(rows, in)`` through ``layers``.

    Returns the output and a cache of ``(input, pre_activation)`` per layer.
    """
    cache = []
    for layer in layers:
        pre = x @ layer.weight.T + layer.bias
        cache.append((x, pre))
        x = np.maximum(pre, 0) if layer.activation == "relu" else pre
    return x, cache


def mlp_backward(layers: list[DenseLayer], cache, dout: np.ndarray):
    """Backprop ``dout`` through ``layers``; returns ``([(dW, db), ...], dx)``."""
    grads = []
    for layer, (x, pre) in zip(reversed(layers), reversed(cache)):
        if layer.activation == "relu":
            dout = dout * (pre > 0)
        grads.append((dout.T @ x, dout.sum(axis=0)))
        dout = dout @ layer.weight
    grads.reverse()
    return grads, dout


@dataclass
class CfnParams:
    encoder: list[DenseLayer]
    head: list[DenseLayer]
    n: int
    d: int
    # fixed input standardization, (x - shift) / scale, applied before the encoder
    input_shift: float = 0.0
    input_scale: float = 1.0

    def __post_init__(self):
        if not (np.isfinite(self.input_shift) and np.isfinite(self.input_scale) and self.input_scale > 0):
            raise ValueError(f"bad input standardization {self.input_shift}, {self.input_scale}")
        if len(self.head) != 2:
            raise ValueError(f"head must have exactly 2 layers, got {len(self.head)}")
        if not self.encoder:
            raise ValueError("encoder needs at least one layer")
        if self.encoder[0].fan_in != self.d:
            raise ValueError(f"encoder input width {self.encoder[0].fan_in} != patch dim {self.d}")
        for a, b in zip(self.encoder[:-1], self.encoder[1:]):
            if a.fan_out != b.fan_in:
                raise ValueError(f"encoder width mismatch {a.fan_out} -> {b.fan_in}")
        if self.head[0].fan_in != self.n * self.embed_unit:
            raise ValueError(f"head input width {self.head[0].fan_in} != n * encoder output {self.n * self.embed_unit}")
        if self.head[1].fan_in != self.head[0].fan_out:
            raise ValueError("head layer widths do not chain")

    @property
    def embed_unit(self) -> int:
        return self.encoder[-1].fan_out

    @property
    def embed_dim(self) -> int:
        return self.n * self.embed_unit

    @property
    def out_dim(self) -> int:
        return self.head[-1].fan_out

    @property
    def layers(self) -> list[DenseLayer]:
        return self.encoder + self.head

    def arrays(self) -> list[np.ndarray]:
        """Parameter arrays in checkpoint order: encoder then head, weight then bias."""
        out = []
        for layer in self.layers:
            out += [layer.weight, layer.bias]
        return out

    def dims(self) -> dict:
        return {
            "n": self.n,
            "d": self.d,
            "encoder_widths": [l.fan_out for l in self.encoder],
            "head_width": self.head[0].fan_out,
            "out_dim": self.out_dim,
            "input_shift": self.input_shift,
            "input_scale": self.input_scale,
        }

    def copy(self) -> "CfnParams":
        cp = lambda ls: [DenseLayer(l.weight.copy(), l.bias.copy(), l.activation) for l in ls]
        return CfnParams(cp(self.encoder), cp(self.head), self.n, self.d, self.input_shift, self.input_scale)

    def astype(self, dtype) -> "CfnParams":
        cv = lambda ls: [DenseLayer(l.weight.astype(dtype), l.bias.astype(dtype), l.activation) for l in ls]
        return CfnParams(cv(self.encoder), cv(self.head), self.n, self.d, self.input_shift, self.input_scale)

    def encoder_hash(self) -> str:
        import hashlib

        h = hashlib.sha256()
        h.update(np.array([self.input_shift, self.input_scale]).tobytes())
        for layer in self.encoder:
            h.update(layer.weight.tobytes())
            h.update(layer.bias.tobytes())
        return h.hexdigest()


def init_cfn(n: int, d: int, encoder_widths=(256, 128), head_width: int = 256, out_dim: int | None = None,
             seed: int = 0, dtype=np.float32, input_shift: float = 0.0, input_scale: float = 1.0) -> CfnParams:
    """Glorot-uniform weights, zero biases.  ``out_dim`` defaults to ``n``
    (score vector); set it to the fixed-set size for classification.
    ``input_shift``/``input_scale`` standardize patch values and are not trained."""
    if n < 2 or d < 1 or not encoder_widths or min(encoder_widths) < 1 or head_width < 1:
        raise ValueError(f"invalid dims n={n} d={d} encoder={encoder_widths} head={head_width}")
    out_dim = n if out_dim is None else out_dim
    if out_dim < 1:
        raise ValueError(f"out_dim must be positive, got {out_dim}")
    rng = np.random.default_rng(seed)
    encoder = []
    fan_in = d
    for w in encoder_widths:
        encoder.append(glorot_layer(rng, fan_in, w, "relu", dtype))
        fan_in = w
    head = [
        glorot_layer(rng, n * fan_in, head_width, "relu", dtype),
        glorot_layer(rng, head_width, out_dim, "identity", dtype),
    ]
    return CfnParams(encoder, head, n, d, float(input_shift), float(input_scale))


@dataclass
class ForwardTrace:
    batch: int
    encoder_cache: list
    head_cache: list
    embedding: np.ndarray  # (B, n * embed_unit)


def _check_input(params: CfnParams, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X)
    if X.ndim != 3 or X.shape[1:] != (params.n, params.d):
        raise ValueError(f"expected input of shape (B, {params.n}, {params.d}), got {X.shape}")
    return X


def encode(params: CfnParams, X: np.ndarray):
    """Shared encoder on every patch; returns the ``(B, n * e)`` embedding and cache."""
    X = _check_input(params, X)
    B = X.shape[0]
    dtype = params.encoder[0].weight.dtype
    flat = X.reshape(B * params.n, params.d).astype(dtype, copy=False)
    if params.input_shift != 0.0 or params.input_scale != 1.0:
        flat = ((flat - dtype.type(params.input_shift)) / dtype.type(params.input_scale)).astype(dtype, copy=False)
    h, cache = mlp_forward(params.encoder, flat)
    return h.reshape(B, params.n * params.embed_unit), cache


def cfn_forward(params: CfnParams, X: np.ndarray) -> tuple[np.ndarray, ForwardTrace]:
    emb, enc_cache = encode(params, X)
    theta, head_cache = mlp_forward(params.head, emb)
    return theta, ForwardTrace(emb.shape[0], enc_cache, head_cache, emb)


def cfn_backward(params: CfnParams, trace: ForwardTrace, dtheta: np.ndarray) -> list[np.ndarray]:
    """Gradients of ``sum(theta * dtheta)``, in :meth:`CfnParams.arrays` order."""
    dtheta = np.asarray(dtheta)
    if dtheta.shape != (trace.batch, params.out_dim):
        raise ValueError(f"dtheta shape {dtheta.shape} != {(trace.batch, params.out_dim)}")
    dtype = params.head[0].weight.dtype
    head_grads, demb = mlp_backward(params.head, trace.head_cache, dtheta.astype(dtype, copy=False))
    dflat = demb.reshape(trace.batch * params.n, params.embed_unit)
    enc_grads, _ = mlp_backward(params.encoder, trace.encoder_cache, dflat)
    out = []
    for dw, db in enc_grads + head_grads:
        out += [dw, db]
    return out


def embed(params: CfnParams, s: np.ndarray, spec: SliceSpec) -> np.ndarray:
    """Embedding of one spectrogram in identity (unshuffled) patch order."""
    return embed_batch(params, np.asarray(s)[None], spec)[0]


def embed_batch(params: CfnParams, spectrograms: np.ndarray, spec: SliceSpec, chunk: int = 256) -> np.ndarray:
    if spec.n != params.n:
        raise ValueError(f"slice spec gives {spec.n} patches, network expects {params.n}")
    X = slice_batch(np.asarray(spectrograms), spec)
    if X.shape[2] != params.d:
        raise ValueError(f"patch dim {X.shape[2]} != network input {params.d}")
    return np.concatenate([encode(params, X[i:i + chunk])[0] for i in range(0, X.shape[0], chunk)])


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    delta: float = 1e-8

    @classmethod
    def zeros_like(cls, arrays, **hyper) -> "AdamState":
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], **hyper)


def adam_step(state: AdamState, params: list[np.ndarray], grads: list[np.ndarray]):
    """Bias-corrected Adam update, applied in place; returns ``(state, params)``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("parameter, gradient and state lists differ in length")
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch {p.shape} / {g.shape} / {m.shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = g.astype(p.dtype, copy=False)
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.delta)).astype(p.dtype, copy=False)
    return state, params


def save_checkpoint(path, params: CfnParams, meta: dict | None = None) -> None:
    """``PERMCFN1`` | u32 header length | JSON header | float32 parameters.

    The header is UTF-8 JSON with sorted keys holding the dims, activations
    and ``meta``.  Parameters follow in :meth:`CfnParams.arrays` order,
    little-endian, weights row-major.
    """
    header = dict(params.dims())
    header["activations"] = [l.activation for l in params.layers]
    header["meta"] = meta or {}
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in params.arrays())
    Path(path).write_bytes(CKPT_MAGIC + struct.pack("<I", len(hb)) + hb + body)


def load_checkpoint(path) -> tuple[CfnParams, dict]:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except FileNotFoundError:
        raise FileNotFoundError(f"checkpoint not found: {path}") from None
    if buf[:8] != CKPT_MAGIC:
        raise FormatError("bad checkpoint magic", 0, path)
    if len(buf) < 12:
        raise FormatError("truncated header", 8, path)
    (hlen,) = struct.unpack_from("<I", buf, 8)
    if len(buf) < 12 + hlen:
        raise FormatError("truncated header", 12, path)
    try:
        header = json.loads(buf[12:12 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise FormatError("unreadable header", 12, path) from None
    n, d = header["n"], header["d"]
    widths = [d] + list(header["encoder_widths"])
    shapes = [(widths[i + 1], widths[i]) for i in range(len(widths) - 1)]
    shapes += [(header["head_width"], n * widths[-1]), (header["out_dim"], header["head_width"])]
    acts = header["activations"]
    off = 12 + hlen
    layers = []
    for (o, i), act in zip(shapes, acts):
        need = 4 * (o * i + o)
        if len(buf) < off + need:
            raise FormatError("truncated parameters", off, path)
        w = np.frombuffer(buf, dtype="<f4", count=o * i, offset=off).astype(np.float32).reshape(o, i)
        b = np.frombuffer(buf, dtype="<f4", count=o, offset=off + 4 * o * i).astype(np.float32)
        layers.append(DenseLayer(w, b, act))
        off += need
    if off != len(buf):
        raise FormatError(f"{len(buf) - off} trailing bytes", off, path)
    n_enc = len(header["encoder_widths"])
    try:
        return CfnParams(layers[:n_enc], layers[n_enc:], n, d, float(header.get("input_shift", 0.0)),
                         float(header.get("input_scale", 1.0))), header["meta"]
    except ValueError as exc:
        raise FormatError(f"inconsistent header: {exc}", 12, path) from None
