"""Small pre-norm transformer shared by the CLM and MLM objectives.

The only thing that changes between objectives is the attention mask mode
passed to :func:`forward`; the parameters, the tied LM head and the forward
graph are identical.  Every op has a hand-written backward in
:func:`_backward`.
"""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import numerics as nx

PAD_ID = 0
EOS_ID = 1


class MaskMode(str, enum.Enum):
    CAUSAL = "causal"
    BIDIRECTIONAL = "bidirectional"

    @classmethod
    def coerce(cls, value: "MaskMode | str") -> "MaskMode":
        return value if isinstance(value, cls) else cls(str(value))


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 8
    hidden_dim: int = 64
    n_heads: int = 4
    vocab_size: int = 512
    max_seq_len: int = 256
    rope_base: float = 10000.0
    dropout_rate: float = 0.1
    init_std: float = 0.02
    ln_eps: float = 1e-5
    # when set, the mask token is the last vocabulary entry
    has_mask_token: bool = True

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.n_heads < 1 or self.hidden_dim % self.n_heads:
            raise ValueError("hidden_dim must be divisible by n_heads")
        if (self.hidden_dim // self.n_heads) % 2:
            raise ValueError("head_dim must be even for rotary embeddings")
        if self.max_seq_len < 2:
            raise ValueError("max_seq_len must be >= 2")
        if self.vocab_size < 4:
            raise ValueError("vocab_size must be >= 4 (pad, eos, mask, content)")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.init_std < 0 or self.ln_eps <= 0:
            raise ValueError("init_std must be >= 0 and ln_eps > 0")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.n_heads

    @property
    def mask_token_id(self) -> int | None:
        return self.vocab_size - 1 if self.has_mask_token else None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


ATTENTION_KEYS = ("attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv", "attn.wo", "attn.bo")
MLP_KEYS = ("mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2")
NORM_KEYS = ("ln1.g", "ln1.b", "ln2.g", "ln2.b")
COMPONENT_KEYS = {"attention": ATTENTION_KEYS, "mlp": MLP_KEYS, "layer_norms": NORM_KEYS}


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Parameter names and shapes in the fixed (checkpoint) order."""
    d, v, f = cfg.hidden_dim, cfg.vocab_size, 4 * cfg.hidden_dim
    shapes: dict[str, tuple[int, ...]] = {"tok_emb": (v, d), "head_bias": (v,)}
    for layer in range(cfg.n_layers):
        p = f"blocks.{layer}."
        shapes.update({
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "attn.wq": (d, d), p + "attn.bq": (d,),
            p + "attn.wk": (d, d), p + "attn.bk": (d,),
            p + "attn.wv": (d, d), p + "attn.bv": (d,),
            p + "attn.wo": (d, d), p + "attn.bo": (d,),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
            p + "mlp.w1": (d, f), p + "mlp.b1": (f,),
            p + "mlp.w2": (f, d), p + "mlp.b2": (d,),
        })
    shapes["final_ln.g"] = (d,)
    shapes["final_ln.b"] = (d,)
    return shapes


def layer_of(name: str) -> int | None:
    """Block index of a parameter name, or None for embeddings/head/final norm."""
    if name.startswith("blocks."):
        return int(name.split(".", 2)[1])
    return None


@dataclass
class TransformerModel:
    config: ModelConfig
    params: dict[str, np.ndarray] = field(repr=False)

    @property
    def dtype(self):
        return self.params["tok_emb"].dtype

    def copy(self) -> "TransformerModel":
        return TransformerModel(self.config, {k: v.copy() for k, v in self.params.items()})

    def astype(self, dtype) -> "TransformerModel":
        return TransformerModel(self.config, {k: v.astype(dtype, copy=True) for k, v in self.params.items()})

    def layer_params(self, layer: int) -> list[str]:
        if not 0 <= layer < self.config.n_layers:
            raise IndexError(f"layer {layer} outside [0, {self.config.n_layers})")
        prefix = f"blocks.{layer}."
        return [k for k in self.params if k.startswith(prefix)]

    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for k, v in self.params.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(v).tobytes())
        return h.hexdigest()


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    if std == 0:
        return np.zeros(shape)
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


def init_model(config: ModelConfig, seed: int, dtype=np.float32) -> TransformerModel:
    """Fresh model: matrices ~ N(0, init_std) truncated at 2 sigma, norms at identity, biases zero."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            arr = np.ones(shape)
        elif leaf.startswith("b") or name == "head_bias":
            arr = np.zeros(shape)
        else:
            arr = _trunc_normal(rng, shape, config.init_std)
        params[name] = arr.astype(dtype)
    return TransformerModel(config, params)


def extend_vocab_with_mask(model: TransformerModel, seed: int = 0) -> TransformerModel:
    """Append a ``<mask>`` row to the (tied) embedding and head bias.

    Every existing parameter is copied bit-for-bit; the new embedding row is
    drawn from the init distribution and its head bias is zero.
    """
    cfg = model.config
    if cfg.has_mask_token:
        raise ValueError("model already has a mask token")
    new_cfg = dataclasses.replace(cfg, vocab_size=cfg.vocab_size + 1, has_mask_token=True)
    rng = np.random.default_rng(seed)
    params = {k: v.copy() for k, v in model.params.items()}
    row = _trunc_normal(rng, (1, cfg.hidden_dim), cfg.init_std).astype(model.dtype)
    params["tok_emb"] = np.concatenate([params["tok_emb"], row], axis=0)
    params["head_bias"] = np.concatenate([params["head_bias"], np.zeros(1, dtype=model.dtype)])
    return TransformerModel(new_cfg, params)


# ---------------------------------------------------------------------------
# rotary embeddings
# ---------------------------------------------------------------------------

_ROPE_CACHE: dict = {}


def _rope_tables(positions: np.ndarray, head_dim: int, base: float, dtype):
    key = (positions.tobytes(), head_dim, float(base), np.dtype(dtype).str)
    hit = _ROPE_CACHE.get(key)
    if hit is not None:
        return hit
    inv_freq = base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    ang = positions.astype(np.float64)[:, None] * inv_freq[None, :]
    tables = (np.cos(ang).astype(dtype), np.sin(ang).astype(dtype))
    if len(_ROPE_CACHE) > 64:
        _ROPE_CACHE.clear()
    _ROPE_CACHE[key] = tables
    return tables


def _rotate(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    xe = x[..., 0::2]
    xo = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = xe * cos - xo * sin
    out[..., 1::2] = xe * sin + xo * cos
    return out


def apply_rope(q: np.ndarray, k: np.ndarray, positions: Sequence[int], base: float = 10000.0):
    """Rotate interleaved feature pairs of ``q`` and ``k`` by ``pos * base**(-2i/head_dim)``.

    The position axis is the second-to-last axis; the head axis is last.
    """
    head_dim = q.shape[-1]
    if head_dim % 2 or k.shape[-1] != head_dim:
        raise ValueError("rotary embeddings need an even, matching head_dim")
    pos = np.asarray(positions, dtype=np.int64)
    cos, sin = _rope_tables(pos, head_dim, base, q.dtype)
    return _rotate(q, cos, sin), _rotate(k, cos, sin)


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------


def _dropout_mask(rng: np.random.Generator, shape, rate: float, dtype) -> np.ndarray:
    keep = rng.random(shape, dtype=np.float32) >= rate
    return keep.astype(dtype) * dtype(1.0 / (1.0 - rate))


_ATTN_CHUNK = 4  # sequences per attention chunk; keeps the L x L stacks cache-resident


def _attention_fwd(q, k, v, causal):
    """Softmax attention on ``(B, H, L, dh)`` stacks, q pre-scaled; returns ``(out, probs)``."""
    B = q.shape[0]
    out = np.empty_like(v)
    probs = np.empty(q.shape[:3] + (k.shape[2],), dtype=q.dtype)
    for i in range(0, B, _ATTN_CHUNK):
        sl = slice(i, i + _ATTN_CHUNK)
        s = np.matmul(q[sl], np.ascontiguousarray(k[sl].transpose(0, 1, 3, 2)), out=probs[sl])
        nx.attention_softmax(s, causal)
        np.matmul(s, v[sl], out=out[sl])
    return out, probs


def _attention_bwd(q, k, v, probs, dout, causal):
    B = q.shape[0]
    dq, dk, dv = np.empty_like(q), np.empty_like(k), np.empty_like(v)
    for i in range(0, B, _ATTN_CHUNK):
        sl = slice(i, i + _ATTN_CHUNK)
        p = probs[sl]
        dp = np.matmul(dout[sl], np.ascontiguousarray(v[sl].transpose(0, 1, 3, 2)))
        np.matmul(p.transpose(0, 1, 3, 2), dout[sl], out=dv[sl])
        ds = nx.attention_softmax_backward(p, dp, causal)
        np.matmul(ds, k[sl], out=dq[sl])
        np.matmul(ds.transpose(0, 1, 3, 2), q[sl], out=dk[sl])
    return dq, dk, dv


def _forward(model: TransformerModel, ids: np.ndarray, causal: bool, training: bool,
             rng: np.random.Generator | None, keep: bool, capture: bool):
    cfg = model.config
    P = model.params
    B, L = ids.shape
    if L > cfg.max_seq_len:
        raise ValueError(f"sequence length {L} exceeds max_seq_len {cfg.max_seq_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise ValueError("token id outside the model vocabulary")
    dt = model.dtype.type
    d, H, dh = cfg.hidden_dim, cfg.n_heads, cfg.head_dim
    use_drop = training and cfg.dropout_rate > 0
    if use_drop and rng is None:
        raise ValueError("training-mode dropout needs an rng")
    cos, sin = _rope_tables(np.arange(L), dh, cfg.rope_base, model.dtype)
    scale = dt(1.0 / np.sqrt(dh))

    x = P["tok_emb"][ids]
    states = [x.copy()] if capture else None
    caches = []
    for layer in range(cfg.n_layers):
        p = f"blocks.{layer}."
        h1, ln1c = nx.layer_norm(x, P[p + "ln1.g"], P[p + "ln1.b"], cfg.ln_eps)
        h1f = h1.reshape(B * L, d)

        def heads(w, b):
            return np.ascontiguousarray((h1f @ P[p + w] + P[p + b]).reshape(B, L, H, dh).transpose(0, 2, 1, 3))

        q = _rotate(heads("attn.wq", "attn.bq"), cos, sin)
        q *= scale
        k = _rotate(heads("attn.wk", "attn.bk"), cos, sin)
        v = heads("attn.wv", "attn.bv")
        o, pr = _attention_fwd(q, k, v, causal)
        of = np.ascontiguousarray(o.transpose(0, 2, 1, 3)).reshape(B * L, d)
        a = of @ P[p + "attn.wo"] + P[p + "attn.bo"]
        m1 = _dropout_mask(rng, a.shape, cfg.dropout_rate, dt) if use_drop else None
        if m1 is not None:
            a = a * m1
        x = x + a.reshape(B, L, d)

        h2, ln2c = nx.layer_norm(x, P[p + "ln2.g"], P[p + "ln2.b"], cfg.ln_eps)
        h2f = h2.reshape(B * L, d)
        u = h2f @ P[p + "mlp.w1"] + P[p + "mlp.b1"]
        g, gc = nx.gelu(u)
        mo = g @ P[p + "mlp.w2"] + P[p + "mlp.b2"]
        m2 = _dropout_mask(rng, mo.shape, cfg.dropout_rate, dt) if use_drop else None
        if m2 is not None:
            mo = mo * m2
        x = x + mo.reshape(B, L, d)
        if capture:
            states.append(x.copy())
        if keep:
            caches.append((h1f, ln1c, q, k, v, pr, of, m1, h2f, ln2c, gc, g, m2))

    xf, lnfc = nx.layer_norm(x, P["final_ln.g"], P["final_ln.b"], cfg.ln_eps)
    xff = xf.reshape(B * L, d)
    logits = xff @ P["tok_emb"].T + P["head_bias"]
    cache = (ids, causal, caches, xff, lnfc, cos, sin, scale) if keep else None
    return logits.reshape(B, L, -1), cache, states


def _backward(model: TransformerModel, cache, dlogits: np.ndarray) -> nx.GradStore:
    cfg = model.config
    P = model.params
    ids, causal, caches, xff, lnfc, cos, sin, scale = cache
    B, L = ids.shape
    d, H, dh = cfg.hidden_dim, cfg.n_heads, cfg.head_dim
    grads: nx.GradStore = {}
    dl = dlogits.reshape(B * L, -1)
    grads["head_bias"] = dl.sum(axis=0)
    d_emb = dl.T @ xff
    dx = (dl @ P["tok_emb"]).reshape(B, L, d)
    dx, grads["final_ln.g"], grads["final_ln.b"] = nx.layer_norm_backward(dx, lnfc)

    for layer in reversed(range(cfg.n_layers)):
        p = f"blocks.{layer}."
        h1f, ln1c, q, k, v, pr, of, m1, h2f, ln2c, gc, g, m2 = caches[layer]
        # MLP branch
        dm = dx.reshape(B * L, d)
        if m2 is not None:
            dm = dm * m2
        grads[p + "mlp.w2"] = g.T @ dm
        grads[p + "mlp.b2"] = dm.sum(axis=0)
        du = nx.gelu_backward(dm @ P[p + "mlp.w2"].T, gc)
        grads[p + "mlp.w1"] = h2f.T @ du
        grads[p + "mlp.b1"] = du.sum(axis=0)
        dh2 = (du @ P[p + "mlp.w1"].T).reshape(B, L, d)
        dln, grads[p + "ln2.g"], grads[p + "ln2.b"] = nx.layer_norm_backward(dh2, ln2c)
        dx = dx + dln
        # attention branch
        da = dx.reshape(B * L, d)
        if m1 is not None:
            da = da * m1
        grads[p + "attn.wo"] = of.T @ da
        grads[p + "attn.bo"] = da.sum(axis=0)
        do = np.ascontiguousarray((da @ P[p + "attn.wo"].T).reshape(B, L, H, dh).transpose(0, 2, 1, 3))
        dqs, dk, dv = _attention_bwd(q, k, v, pr, do, causal)
        dqs *= scale
        dq = _rotate(dqs, cos, -sin)
        dk = _rotate(dk, cos, -sin)

        def merge(t):
            return np.ascontiguousarray(t.transpose(0, 2, 1, 3)).reshape(B * L, d)

        dqf, dkf, dvf = merge(dq), merge(dk), merge(dv)
        grads[p + "attn.wq"] = h1f.T @ dqf
        grads[p + "attn.bq"] = dqf.sum(axis=0)
        grads[p + "attn.wk"] = h1f.T @ dkf
        grads[p + "attn.bk"] = dkf.sum(axis=0)
        grads[p + "attn.wv"] = h1f.T @ dvf
        grads[p + "attn.bv"] = dvf.sum(axis=0)
        dh1 = dqf @ P[p + "attn.wq"].T + dkf @ P[p + "attn.wk"].T + dvf @ P[p + "attn.wv"].T
        dln, grads[p + "ln1.g"], grads[p + "ln1.b"] = nx.layer_norm_backward(dh1.reshape(B, L, d), ln1c)
        dx = dx + dln

    flat_ids = ids.reshape(-1)
    order = np.argsort(flat_ids, kind="stable")
    sorted_ids = flat_ids[order]
    starts = np.flatnonzero(np.r_[True, sorted_ids[1:] != sorted_ids[:-1]])
    d_emb[sorted_ids[starts]] += np.add.reduceat(dx.reshape(B * L, d)[order], starts, axis=0)
    grads["tok_emb"] = d_emb
    return {k: np.asarray(grads[k], dtype=model.dtype) for k in P}


def _as_batch(token_ids) -> tuple[np.ndarray, bool]:
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim == 1:
        return ids[None, :], True
    if ids.ndim != 2:
        raise ValueError("token_ids must be [L] or [B, L]")
    return ids, False


def forward(model: TransformerModel, token_ids, mask_mode: MaskMode | str = MaskMode.BIDIRECTIONAL, *,
            capture: bool = False, training: bool = False, rng: np.random.Generator | None = None):
    """Logits for ``token_ids`` ([L] or [B, L]).

    With ``capture`` set, also returns the activation cache: a list whose
    entry ``l + 1`` holds the output of block ``l`` (entry 0 is the embedding
    output, addressable as layer ``-1``).
    """
    ids, single = _as_batch(token_ids)
    causal = MaskMode.coerce(mask_mode) is MaskMode.CAUSAL
    logits, _, states = _forward(model, ids, causal, training, rng, keep=False, capture=capture)
    if single:
        logits = logits[0]
        states = [s[0] for s in states] if capture else None
    return (logits, states) if capture else logits


def loss_and_grads(model: TransformerModel, input_ids, target_ids, supervision_mask,
                   mask_mode: MaskMode | str, *, training: bool = False,
                   rng: np.random.Generator | None = None) -> tuple[float, nx.GradStore]:
    """Masked-mean cross entropy of the model's predictions and its full gradient."""
    ids, _ = _as_batch(input_ids)
    causal = MaskMode.coerce(mask_mode) is MaskMode.CAUSAL
    logits, cache, _ = _forward(model, ids, causal, training, rng, keep=True, capture=False)
    B, L, V = logits.shape
    loss, dlogits = nx.cross_entropy(logits.reshape(B * L, V), np.asarray(target_ids).reshape(-1),
                                     np.asarray(supervision_mask, dtype=bool).reshape(-1))
    return loss, _backward(model, cache, dlogits)


# ---------------------------------------------------------------------------
# representations
# ---------------------------------------------------------------------------


def extract_representations(model: TransformerModel, texts: Iterable[Sequence[int]], layer: int, *,
                            mask_mode: MaskMode | str = MaskMode.BIDIRECTIONAL,
                            pad_id: int = PAD_ID, batch_size: int = 32) -> np.ndarray:
    """Mean-pooled block-``layer`` outputs, one float64 row per text.

    Padding tokens are removed before the forward pass, so trailing padding
    never changes the result.  Texts of equal length are batched together.
    Layer ``-1`` is the embedding output.
    """
    return extract_all_layers(model, texts, [layer], mask_mode=mask_mode, pad_id=pad_id,
                              batch_size=batch_size)[layer]


def extract_all_layers(model: TransformerModel, texts: Iterable[Sequence[int]], layers: Sequence[int] | None = None,
                       *, mask_mode: MaskMode | str = MaskMode.BIDIRECTIONAL, pad_id: int = PAD_ID,
                       batch_size: int = 32) -> dict[int, np.ndarray]:
    cfg = model.config
    if layers is None:
        layers = list(range(cfg.n_layers))
    for layer in layers:
        if not -1 <= layer < cfg.n_layers:
            raise IndexError(f"layer {layer} outside [-1, {cfg.n_layers})")
    seqs = [np.asarray(t, dtype=np.int64) for t in texts]
    seqs = [s[s != pad_id] for s in seqs]
    if not seqs:
        raise ValueError("no texts given")
    if any(s.size == 0 for s in seqs):
        raise ValueError("a text is empty after removing padding")
    m64 = model if model.dtype == np.float64 else model.astype(np.float64)
    out = {layer: np.empty((len(seqs), cfg.hidden_dim)) for layer in layers}
    by_len: dict[int, list[int]] = {}
    for i, s in enumerate(seqs):
        by_len.setdefault(s.size, []).append(i)
    for length in sorted(by_len):
        idx = by_len[length]
        for start in range(0, len(idx), batch_size):
            chunk = idx[start:start + batch_size]
            ids = np.stack([seqs[i] for i in chunk])
            _, states = forward(m64, ids, mask_mode, capture=True)
            for layer in layers:
                out[layer][chunk] = states[layer + 1].mean(axis=1)
    return out


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------

_MAGIC = "CLMDETOUR-CHECKPOINT 1"
_END = "end_header"


def checkpoint_bytes(model: TransformerModel, meta: dict | None = None) -> bytes:
    """Serialise to the checkpoint format.

    Layout: UTF-8 header of ``key = value`` lines (``config.*``, ``meta.*``)
    followed by ``param <name> <d0>x<d1>...`` lines in :func:`param_shapes`
    order and a terminating ``end_header`` line; then each parameter as a
    little-endian float32 blob, same order, no padding.
    """
    lines = [_MAGIC]
    for k, v in model.config.to_dict().items():
        lines.append(f"config.{k} = {v}")
    for k, v in sorted((meta or {}).items()):
        sval = str(v)
        if "\n" in sval:
            raise ValueError(f"meta value for {k!r} contains a newline")
        lines.append(f"meta.{k} = {sval}")
    shapes = param_shapes(model.config)
    for name, shape in shapes.items():
        lines.append(f"param {name} {'x'.join(map(str, shape))}")
    lines.append(_END)
    buf = io.BytesIO()
    buf.write(("\n".join(lines) + "\n").encode("utf-8"))
    for name in shapes:
        buf.write(np.ascontiguousarray(model.params[name], dtype="<f4").tobytes())
    return buf.getvalue()


def save_checkpoint(path: str | Path, model: TransformerModel, meta: dict | None = None) -> str:
    """Write a checkpoint; returns its git-style blob hash."""
    data = checkpoint_bytes(model, meta)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(data)
    return git_blob_hash(data)


def git_blob_hash(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _parse_config_value(field_type, raw: str):
    if field_type in (bool, "bool"):
        return raw == "True"
    if field_type in (int, "int"):
        return int(raw)
    return float(raw)


def load_checkpoint(path: str | Path) -> tuple[TransformerModel, dict[str, str]]:
    data = Path(path).read_bytes()
    end = data.find(("\n" + _END + "\n").encode())
    if not data.startswith(_MAGIC.encode()) or end < 0:
        raise ValueError(f"{path}: not a checkpoint file")
    header = data[:end].decode("utf-8").splitlines()
    body = memoryview(data)[end + len(_END) + 2:]
    cfg_raw: dict[str, str] = {}
    meta: dict[str, str] = {}
    declared: list[tuple[str, tuple[int, ...]]] = []
    for line in header[1:]:
        if line.startswith("param "):
            _, name, shp = line.split(" ")
            declared.append((name, tuple(int(s) for s in shp.split("x"))))
        else:
            key, _, val = line.partition(" = ")
            if key.startswith("config."):
                cfg_raw[key[7:]] = val
            elif key.startswith("meta."):
                meta[key[5:]] = val
    types = {f.name: f.type for f in dataclasses.fields(ModelConfig)}
    cfg = ModelConfig(**{k: _parse_config_value(types[k], v) for k, v in cfg_raw.items()})
    expected = param_shapes(cfg)
    if [n for n, _ in declared] != list(expected):
        raise ValueError(f"{path}: parameter list does not match the config")
    params = {}
    offset = 0
    for name, shape in declared:
        if shape != expected[name]:
            raise ValueError(f"{path}: {name} has shape {shape}, config implies {expected[name]}")
        nbytes = 4 * int(np.prod(shape))
        if offset + nbytes > len(body):
            raise ValueError(f"{path}: truncated parameter data at {name}")
        params[name] = np.frombuffer(body[offset:offset + nbytes], dtype="<f4").reshape(shape).astype(np.float32)
        offset += nbytes
    if offset != len(body):
        raise ValueError(f"{path}: {len(body) - offset} trailing bytes after parameters")
    return TransformerModel(cfg, params), meta
