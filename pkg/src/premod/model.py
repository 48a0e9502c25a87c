"""Transformer-encoder risk classifier with additive-attention pooling.

Pipeline per patient matrix X (T x D):
    X W_in + P -> l encoder layers -> Z (T x d_model)
    a_g = softmax_T(MLP_g(Z)),  c_g = a_g^T Z        (g pooling heads)
    c = [c_1 .. c_g] W_c  ->  two-hidden-layer MLP  ->  logit  ->  sigmoid

The optional ``cls`` pooling mode prepends a learnable token and reads the
context from its encoder output instead.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeMismatch, Tensor

CHECKPOINT_MAGIC = b"PREMOD1"
CHECKPOINT_VERSION = 1


class VersionMismatch(ValueError):
    pass


class VocabMismatch(ValueError):
    pass


class Corrupt(ValueError):
    pass


@dataclass
class ModelConfig:
    T: int
    D: int
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 4
    n_agg_heads: int = 2
    ff_dim: int | None = None
    pooling: str = "attention"  # or "cls"
    dropout: float = 0.1

    def __post_init__(self):
        if self.ff_dim is None:
            self.ff_dim = 4 * self.d_model
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.d_model % 2:
            raise ValueError("d_model must be even for the sinusoidal encoding")
        if self.n_agg_heads < 1:
            raise ValueError("n_agg_heads must be >= 1")
        if self.pooling not in ("attention", "cls"):
            raise ValueError(f"unknown pooling {self.pooling!r}")
        if self.T <= 0 or self.D <= 0:
            raise ValueError("T and D must be positive")


@dataclass
class ForwardOutput:
    prob: np.ndarray
    logit: np.ndarray
    attention: np.ndarray | None  # (B, g, T); None for cls pooling


def positional_encoding(T: int, d_model: int) -> np.ndarray:
    if d_model % 2:
        raise ValueError("d_model must be even")
    pos = np.arange(T, dtype=np.float64)[:, None]
    i2 = np.arange(0, d_model, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, i2 / d_model)
    P = np.zeros((T, d_model))
    P[:, 0::2] = np.sin(angle)
    P[:, 1::2] = np.cos(angle)
    return P


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Declared parameter order; checkpoints are written in this order."""
    d, f = cfg.d_model, cfg.ff_dim
    half = max(d // 2, 1)
    shapes = [("W_in", (cfg.D, d)), ("b_in", (d,))]
    if cfg.pooling == "cls":
        shapes.append(("cls_token", (d,)))
    for i in range(cfg.n_layers):
        p = f"enc{i}."
        shapes += [
            (p + "Wq", (d, d)), (p + "Wk", (d, d)), (p + "Wv", (d, d)), (p + "Wo", (d, d)),
            (p + "bo", (d,)),
            (p + "ln1_g", (d,)), (p + "ln1_b", (d,)),
            (p + "W1", (d, f)), (p + "b1", (f,)), (p + "W2", (f, d)), (p + "b2", (d,)),
            (p + "ln2_g", (d,)), (p + "ln2_b", (d,)),
        ]
    if cfg.pooling == "attention":
        for g in range(cfg.n_agg_heads):
            p = f"agg{g}."
            shapes += [(p + "W1", (d, half)), (p + "b1", (half,)),
                       (p + "w2", (half, 1)), (p + "b2", (1,))]
        shapes += [("W_c", (cfg.n_agg_heads * d, d)), ("b_c", (d,))]
    shapes += [("cls.W1", (d, d)), ("cls.b1", (d,)),
               ("cls.W2", (d, half)), ("cls.b2", (half,)),
               ("cls.W3", (half, 1)), ("cls.b3", (1,))]
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0, prior: float | None = None) -> dict[str, Tensor]:
    """Glorot-uniform weights, zero biases, unit layer-norm scales.

    With ``prior`` the output bias starts at logit(prior), so the untrained
    model already predicts the training prevalence.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg):
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("_g"):
            value = np.ones(shape)
        elif leaf.startswith("b") or leaf.endswith("_b"):
            value = np.zeros(shape)
        elif leaf == "cls_token":
            value = rng.normal(0.0, 0.02, shape)
        else:
            fan_in, fan_out = shape[0], shape[-1]
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            value = rng.uniform(-limit, limit, shape)
        params[name] = Tensor(value, requires_grad=True)
    if prior is not None:
        if not 0.0 < prior < 1.0:
            raise ValueError("prior must lie in (0, 1)")
        params["cls.b3"].data[:] = np.log(prior) - np.log1p(-prior)
    return params


def _attention(x: Tensor, params, prefix, cfg, rng):
    B, T, d = x.shape
    h = cfg.n_heads
    dk = d // h

    def heads(t):
        return ad.transpose(ad.reshape(t, (B, T, h, dk)), (0, 2, 1, 3))

    q = heads(ad.matmul(x, params[prefix + "Wq"]))
    k = heads(ad.matmul(x, params[prefix + "Wk"]))
    v = heads(ad.matmul(x, params[prefix + "Wv"]))
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dk))
    attn = ad.dropout(ad.softmax(scores, axis=-1), cfg.dropout, rng)
    ctx = ad.matmul(attn, v)
    ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (B, T, d))
    return ad.add(ad.matmul(ctx, params[prefix + "Wo"]), params[prefix + "bo"])


def _encoder_layer(x, params, i, cfg, rng):
    p = f"enc{i}."
    a = ad.dropout(_attention(x, params, p, cfg, rng), cfg.dropout, rng)
    x = ad.layer_norm(ad.add(x, a), params[p + "ln1_g"], params[p + "ln1_b"])
    hdn = ad.relu(ad.add(ad.matmul(x, params[p + "W1"]), params[p + "b1"]))
    ff = ad.add(ad.matmul(hdn, params[p + "W2"]), params[p + "b2"])
    ff = ad.dropout(ff, cfg.dropout, rng)
    return ad.layer_norm(ad.add(x, ff), params[p + "ln2_g"], params[p + "ln2_b"])


def forward_graph(x, params, cfg: ModelConfig, rng: np.random.Generator | None = None):
    """Differentiable forward pass; returns (logit Tensor (B,), attention array or None).

    ``rng`` enables dropout (training); pass None for evaluation.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[1:] != (cfg.T, cfg.D):
        raise ShapeMismatch(f"input shape {x.shape[1:]} does not match (T, D)=({cfg.T}, {cfg.D})")
    B = x.shape[0]
    h = ad.add(ad.matmul(Tensor(x), params["W_in"]), params["b_in"])
    h = ad.add(h, Tensor(positional_encoding(cfg.T, cfg.d_model)))
    if cfg.pooling == "cls":
        tok = ad.reshape(params["cls_token"], (1, 1, cfg.d_model))
        tok = ad.add(tok, Tensor(np.zeros((B, 1, cfg.d_model))))
        h = ad.concat([tok, h], axis=1)
    h = ad.dropout(h, cfg.dropout, rng)
    for i in range(cfg.n_layers):
        h = _encoder_layer(h, params, i, cfg, rng)

    attention = None
    if cfg.pooling == "cls":
        c = ad.getitem(h, (slice(None), 0, slice(None)))
    else:
        contexts, maps = [], []
        for g in range(cfg.n_agg_heads):
            p = f"agg{g}."
            e = ad.tanh(ad.add(ad.matmul(h, params[p + "W1"]), params[p + "b1"]))
            e = ad.add(ad.matmul(e, params[p + "w2"]), params[p + "b2"])  # (B, T, 1)
            a = ad.softmax(e, axis=1)
            maps.append(a.data[..., 0])
            # c_g = a_g^T Z
            contexts.append(ad.reshape(ad.matmul(ad.transpose(a, (0, 2, 1)), h), (B, cfg.d_model)))
        attention = np.stack(maps, axis=1)
        c = ad.add(ad.matmul(ad.concat(contexts, axis=-1), params["W_c"]), params["b_c"])

    c = ad.dropout(c, cfg.dropout, rng)
    z = ad.relu(ad.add(ad.matmul(c, params["cls.W1"]), params["cls.b1"]))
    z = ad.relu(ad.add(ad.matmul(z, params["cls.W2"]), params["cls.b2"]))
    logit = ad.add(ad.matmul(z, params["cls.W3"]), params["cls.b3"])
    return ad.reshape(logit, (B,)), attention


def forward(x, params, cfg: ModelConfig, batch_size: int = 256) -> ForwardOutput:
    """Evaluation-mode forward pass over one matrix or a stack of matrices."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    logits, maps = [], []
    with ad.no_grad():
        for start in range(0, len(x), batch_size):
            z, a = forward_graph(x[start:start + batch_size], params, cfg, rng=None)
            logits.append(z.data)
            if a is not None:
                maps.append(a)
    logit = np.concatenate(logits) if logits else np.zeros(0)
    attention = np.concatenate(maps) if maps else None
    prob = ad._sigmoid(logit) if logit.size else logit
    if single:
        return ForwardOutput(prob[0], logit[0], None if attention is None else attention[0])
    return ForwardOutput(prob, logit, attention)


class Premod:
    """Bundles configuration, parameters and encoder metadata for scoring."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor], meta: dict | None = None):
        self.cfg = cfg
        self.params = params
        self.meta = meta or {}

    def logits(self, x) -> np.ndarray:
        return np.atleast_1d(forward(x, self.params, self.cfg).logit)

    def predict_proba(self, x) -> np.ndarray:
        return np.atleast_1d(forward(x, self.params, self.cfg).prob)

    def __call__(self, x):
        return self.logits(x)


# ------------------------------------------------------------ checkpoints


def vocab_fingerprint(vocab) -> str:
    return hashlib.sha256("\x1f".join(vocab).encode("utf-8")).hexdigest()[:16]


def save_checkpoint(params, cfg: ModelConfig, fingerprints: dict | None = None,
                    extra: dict | None = None) -> bytes:
    header = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(cfg),
        "fingerprints": fingerprints or {},
        "extra": extra or {},
        "params": [[name, list(shape)] for name, shape in param_shapes(cfg)],
    }
    block = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<Q", len(block)))
    buf.write(block)
    for name, shape in param_shapes(cfg):
        arr = np.ascontiguousarray(params[name].data, dtype="<f8")
        if arr.shape != tuple(shape):
            raise ShapeMismatch(f"{name}: {arr.shape} != {shape}")
        buf.write(arr.tobytes())
    return buf.getvalue()


def load_checkpoint(blob: bytes, expected_fingerprints: dict | None = None):
    """Returns (params, cfg, header). Raises Corrupt / VersionMismatch / VocabMismatch."""
    n_magic = len(CHECKPOINT_MAGIC)
    if len(blob) < n_magic + 8 or blob[:n_magic] != CHECKPOINT_MAGIC:
        raise Corrupt("missing PREMOD1 magic")
    (hlen,) = struct.unpack("<Q", blob[n_magic:n_magic + 8])
    start = n_magic + 8
    if start + hlen > len(blob):
        raise Corrupt("truncated header")
    try:
        header = json.loads(blob[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise Corrupt(f"unreadable header: {exc}") from exc
    if header.get("version") != CHECKPOINT_VERSION:
        raise VersionMismatch(f"checkpoint version {header.get('version')}, expected {CHECKPOINT_VERSION}")
    if expected_fingerprints:
        stored = header.get("fingerprints", {})
        for key, value in expected_fingerprints.items():
            if stored.get(key) != value:
                raise VocabMismatch(f"{key} fingerprint {stored.get(key)} != {value}")
    cfg = ModelConfig(**header["config"])
    offset = start + hlen
    params = {}
    for name, shape in header["params"]:
        n = int(np.prod(shape)) * 8
        if offset + n > len(blob):
            raise Corrupt(f"truncated at parameter {name}")
        arr = np.frombuffer(blob, dtype="<f8", count=n // 8, offset=offset).reshape(shape)
        params[name] = Tensor(arr.astype(np.float64), requires_grad=True)
        offset += n
    if offset != len(blob):
        raise Corrupt("trailing bytes after parameter blocks")
    return params, cfg, header
