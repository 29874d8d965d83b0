"""Post-norm transformer encoder over text tokens and region features.

Everything is float64 numpy with hand-written backpropagation.  Several
:class:`~vivo.batching.EncodedBatch` items can be run together; they are
padded to a common text length and region count, and padded rows/columns
are excluded from attention.

Parameter names (``L`` = layer index)::

    tok_emb (V, H)  seg_emb (3, H)  pos_emb (P, H)
    region_w (D_region, H)  region_b (H,)  emb_ln_g (H,)  emb_ln_b (H,)
    layerL.{q,k,v,o}_w (H, H)  layerL.{q,k,v,o}_b (H,)
    layerL.ln1_g  layerL.ln1_b  layerL.ff1_w (H, F)  layerL.ff1_b (F,)
    layerL.ff2_w (F, H)  layerL.ff2_b (H,)  layerL.ln2_g  layerL.ln2_b
    head_w (H, V)   -- absent when the head is tied to tok_emb
    head_b (V,)
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy.special import erf

from .batching import N_SEGMENTS, EncodedBatch
from .errors import CorruptCheckpoint, MissingForwardCache, NonFiniteInput, ShapeMismatch, VivoIOError

MASK_NEG = -1e9
LN_EPS = 1e-12
_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class EncoderConfig:
    layers: int
    hidden: int
    heads: int
    ff_dim: int
    vocab_size: int
    max_positions: int
    d_region: int
    n_segments: int = N_SEGMENTS
    tie_head: bool = False
    dropout: float = 0.0

    def __post_init__(self):
        for name in ("layers", "hidden", "heads", "ff_dim", "vocab_size", "max_positions", "d_region"):
            if getattr(self, name) < 1:
                raise ShapeMismatch(f"EncoderConfig.{name} must be positive")
        if self.hidden % self.heads:
            raise ShapeMismatch(f"hidden={self.hidden} is not divisible by heads={self.heads}")
        if self.n_segments != N_SEGMENTS:
            raise ShapeMismatch(f"n_segments must be {N_SEGMENTS}")
        if not 0.0 <= self.dropout < 1.0:
            raise ShapeMismatch("dropout must lie in [0, 1)")

    def shapes(self) -> dict[str, tuple[int, ...]]:
        h, f, v = self.hidden, self.ff_dim, self.vocab_size
        out = {
            "tok_emb": (v, h),
            "seg_emb": (self.n_segments, h),
            "pos_emb": (self.max_positions, h),
            "region_w": (self.d_region, h),
            "region_b": (h,),
            "emb_ln_g": (h,),
            "emb_ln_b": (h,),
        }
        for i in range(self.layers):
            p = f"layer{i}."
            for m in "qkvo":
                out[p + f"{m}_w"] = (h, h)
                out[p + f"{m}_b"] = (h,)
            out.update({
                p + "ln1_g": (h,), p + "ln1_b": (h,),
                p + "ff1_w": (h, f), p + "ff1_b": (f,),
                p + "ff2_w": (f, h), p + "ff2_b": (h,),
                p + "ln2_g": (h,), p + "ln2_b": (h,),
            })
        if not self.tie_head:
            out["head_w"] = (h, v)
        out["head_b"] = (v,)
        return out


class Parameters(dict):
    """Named float64 arrays plus the :class:`EncoderConfig` that shapes them."""

    def __init__(self, config: EncoderConfig, arrays: dict[str, np.ndarray]):
        expected = config.shapes()
        if set(arrays) != set(expected):
            missing = sorted(set(expected) - set(arrays))
            extra = sorted(set(arrays) - set(expected))
            raise ShapeMismatch(f"parameter names differ from config: missing={missing} extra={extra}")
        super().__init__()
        for name, shape in expected.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != shape:
                raise ShapeMismatch(f"{name}: shape {arr.shape} != expected {shape}")
            self[name] = arr
        self.config = config

    def copy(self) -> "Parameters":
        return Parameters(self.config, {k: v.copy() for k, v in self.items()})

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.items()}


def init_params(config: EncoderConfig, seed: int, std: float = 0.02) -> Parameters:
    """Normal(0, std) weights, zero biases, unit layer-norm scales."""
    rng = np.random.Generator(np.random.PCG64(seed))
    arrays = {}
    for name, shape in config.shapes().items():
        if name.endswith("_g"):
            arrays[name] = np.ones(shape)
        elif name.endswith("_b"):
            arrays[name] = np.zeros(shape)
        else:
            arrays[name] = rng.normal(0.0, std, size=shape)
    return Parameters(config, arrays)


# ---------------------------------------------------------------- primitives


def _ln_forward(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    y = xc * inv
    return y * g + b, (y, inv)


def _ln_backward(dout, g, cache):
    y, inv = cache
    dg = (dout * y).reshape(-1, y.shape[-1]).sum(0)
    db = dout.reshape(-1, y.shape[-1]).sum(0)
    dy = dout * g
    dx = inv * (dy - dy.mean(-1, keepdims=True) - y * (dy * y).mean(-1, keepdims=True))
    return dx, dg, db


def _gelu(x):
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def _gelu_grad(x):
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def _softmax(s):
    s = s - s.max(-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(-1, keepdims=True)
    return z - np.log(np.exp(z).sum(-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return _softmax(np.asarray(logits, dtype=np.float64))


# ---------------------------------------------------------------- collation


@dataclass
class _Stacked:
    tokens: np.ndarray  # (B, S)
    positions: np.ndarray  # (B, S)
    segments: np.ndarray  # (B, T)
    regions: np.ndarray  # (B, K, D)
    attn_bias: np.ndarray  # (B, 1, T, T)
    n_text: int
    query_b: np.ndarray  # (Q,)
    query_t: np.ndarray  # (Q,)


def _stack(batches: Sequence[EncodedBatch], config: EncoderConfig, pad_id: int) -> _Stacked:
    n = len(batches)
    s = max(b.n_text for b in batches)
    k = max(b.n_regions for b in batches)
    t = s + k
    tokens = np.full((n, s), pad_id, dtype=np.int64)
    positions = np.zeros((n, s), dtype=np.int64)
    segments = np.zeros((n, t), dtype=np.int64)
    regions = np.zeros((n, k, config.d_region))
    allowed = np.zeros((n, t, t), dtype=bool)
    qb, qt = [], []
    for i, b in enumerate(batches):
        nt, nr = b.n_text, b.n_regions
        if b.regions.shape[1:] != (config.d_region,) and nr:
            raise ShapeMismatch(f"region width {b.regions.shape[1]} != d_region {config.d_region}")
        if b.attn_mask.shape != (nt + nr, nt + nr) or b.segment_ids.shape != (nt + nr,):
            raise ShapeMismatch("attn_mask/segment_ids do not match text + region length")
        tokens[i, :nt] = b.token_ids
        positions[i, :nt] = b.position_ids
        segments[i, :nt] = b.segment_ids[:nt]
        segments[i, s:s + nr] = b.segment_ids[nt:]
        regions[i, :nr] = b.regions
        idx = np.concatenate([np.arange(nt), s + np.arange(nr)])
        allowed[i][np.ix_(idx, idx)] = b.attn_mask
        for slot in b.mask_slots:
            qb.append(i)
            qt.append(slot.position)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= config.vocab_size):
        raise ShapeMismatch("token id outside the vocabulary")
    if positions.size and positions.max() >= config.max_positions:
        raise ShapeMismatch(f"position id {positions.max()} exceeds max_positions={config.max_positions}")
    if segments.size and (segments.min() < 0 or segments.max() >= config.n_segments):
        raise ShapeMismatch("segment id out of range")
    if not np.all(np.isfinite(regions)):
        raise NonFiniteInput("region features contain NaN or Inf")
    bias = np.where(allowed, 0.0, MASK_NEG)[:, None, :, :]
    return _Stacked(tokens, positions, segments, regions, bias, s,
                    np.asarray(qb, dtype=np.int64), np.asarray(qt, dtype=np.int64))


# ---------------------------------------------------------------- forward


class ForwardResult:
    """Output of :func:`forward`.

    ``states`` is the padded (B, T, H) last-layer tensor; ``slot_logits``
    stacks the logits at every mask slot of every item, in item order.
    """

    def __init__(self, batches, stacked, states, slot_logits, head, cache):
        self.batches = batches
        self._stacked = stacked
        self.states = states
        self.slot_logits = slot_logits
        self._head = head
        self.cache = cache

    def _rows(self, item: int) -> np.ndarray:
        b = self.batches[item]
        s = self._stacked.n_text
        return np.concatenate([np.arange(b.n_text), s + np.arange(b.n_regions)])

    def last_layer(self, item: int = 0) -> np.ndarray:
        """(n_text + n_regions, H) rows for one item, padding removed."""
        return self.states[item, self._rows(item)]

    def logits_at(self, position: int, item: int = 0) -> np.ndarray:
        row = self._rows(item)[position]
        w, bias = self._head
        return self.states[item, row] @ w + bias

    def slot_probs(self) -> np.ndarray:
        return softmax(self.slot_logits)


def _head(params: Parameters):
    w = params["tok_emb"].T if params.config.tie_head else params["head_w"]
    return w, params["head_b"]


def _dropout(x, rate, rng):
    if rate <= 0.0 or rng is None:
        return x, None
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * keep, keep


def forward(
    params: Parameters,
    batch: EncodedBatch | Sequence[EncodedBatch],
    pad_id: int = 0,
    keep_cache: bool = True,
    dropout_rng: np.random.Generator | None = None,
) -> ForwardResult:
    """Run the encoder over one item or a list of items.

    Dropout is applied only when the config enables it and ``dropout_rng`` is
    given.  ``keep_cache=False`` drops the intermediates needed by
    :func:`backward`.
    """
    cfg = params.config
    batches = [batch] if isinstance(batch, EncodedBatch) else list(batch)
    if not batches:
        raise ShapeMismatch("forward needs at least one item")
    st = _stack(batches, cfg, pad_id)
    n, s = st.tokens.shape
    h, nh = cfg.hidden, cfg.heads
    dh = h // nh
    scale = 1.0 / math.sqrt(dh)
    rate = cfg.dropout

    text = params["tok_emb"][st.tokens] + params["pos_emb"][st.positions] + params["seg_emb"][st.segments[:, :s]]
    reg = st.regions @ params["region_w"] + params["region_b"] + params["seg_emb"][st.segments[:, s:]]
    emb = np.concatenate([text, reg], axis=1)
    x, ln_c = _ln_forward(emb, params["emb_ln_g"], params["emb_ln_b"])
    x, drop_emb = _dropout(x, rate, dropout_rng)
    t = x.shape[1]
    cache = {"stacked": st, "ln_emb": ln_c, "drop_emb": drop_emb, "layers": []}

    for i in range(cfg.layers):
        p = f"layer{i}."
        q = (x @ params[p + "q_w"] + params[p + "q_b"]).reshape(n, t, nh, dh).transpose(0, 2, 1, 3)
        k = (x @ params[p + "k_w"] + params[p + "k_b"]).reshape(n, t, nh, dh).transpose(0, 2, 1, 3)
        v = (x @ params[p + "v_w"] + params[p + "v_b"]).reshape(n, t, nh, dh).transpose(0, 2, 1, 3)
        att = _softmax(q @ k.transpose(0, 1, 3, 2) * scale + st.attn_bias)
        ctx = (att @ v).transpose(0, 2, 1, 3).reshape(n, t, h)
        a = ctx @ params[p + "o_w"] + params[p + "o_b"]
        a, drop_a = _dropout(a, rate, dropout_rng)
        x1, ln1_c = _ln_forward(x + a, params[p + "ln1_g"], params[p + "ln1_b"])
        pre = x1 @ params[p + "ff1_w"] + params[p + "ff1_b"]
        act = _gelu(pre)
        f = act @ params[p + "ff2_w"] + params[p + "ff2_b"]
        f, drop_f = _dropout(f, rate, dropout_rng)
        x2, ln2_c = _ln_forward(x1 + f, params[p + "ln2_g"], params[p + "ln2_b"])
        cache["layers"].append(dict(x=x, q=q, k=k, v=v, att=att, ctx=ctx, drop_a=drop_a, ln1=ln1_c,
                                    x1=x1, pre=pre, act=act, drop_f=drop_f, ln2=ln2_c))
        x = x2

    w, bias = _head(params)
    queried = x[st.query_b, st.query_t]
    slot_logits = queried @ w + bias
    if not np.all(np.isfinite(slot_logits)):
        raise NonFiniteInput("encoder produced non-finite logits")
    cache["queried"] = queried
    return ForwardResult(batches, st, x, slot_logits, (w, bias), cache if keep_cache else None)


# ---------------------------------------------------------------- backward


def backward(params: Parameters, result: ForwardResult, slot_grads: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of a loss with respect to every parameter.

    ``slot_grads`` is dLoss/dlogits at the mask slots, shaped like
    ``result.slot_logits``.
    """
    if result.cache is None:
        raise MissingForwardCache("forward was run with keep_cache=False")
    slot_grads = np.asarray(slot_grads, dtype=np.float64)
    if slot_grads.shape != result.slot_logits.shape:
        raise ShapeMismatch(f"slot_grads shape {slot_grads.shape} != logits shape {result.slot_logits.shape}")
    cfg = params.config
    cache = result.cache
    st: _Stacked = cache["stacked"]
    grads = params.zeros_like()
    n, t, h = result.states.shape
    nh = cfg.heads
    dh = h // nh
    scale = 1.0 / math.sqrt(dh)
    s = st.n_text

    queried = cache["queried"]
    grads["head_b"] += slot_grads.sum(0)
    if cfg.tie_head:
        grads["tok_emb"] += slot_grads.T @ queried
        dq_rows = slot_grads @ params["tok_emb"]
    else:
        grads["head_w"] += queried.T @ slot_grads
        dq_rows = slot_grads @ params["head_w"].T
    dx = np.zeros((n, t, h))
    np.add.at(dx, (st.query_b, st.query_t), dq_rows)

    def flat(a):
        return a.reshape(-1, a.shape[-1])

    for i in reversed(range(cfg.layers)):
        p = f"layer{i}."
        c = cache["layers"][i]
        dy2, grads[p + "ln2_g"], grads[p + "ln2_b"] = _ln_backward(dx, params[p + "ln2_g"], c["ln2"])
        df = dy2 if c["drop_f"] is None else dy2 * c["drop_f"]
        grads[p + "ff2_w"] = flat(c["act"]).T @ flat(df)
        grads[p + "ff2_b"] = flat(df).sum(0)
        dpre = (df @ params[p + "ff2_w"].T) * _gelu_grad(c["pre"])
        grads[p + "ff1_w"] = flat(c["x1"]).T @ flat(dpre)
        grads[p + "ff1_b"] = flat(dpre).sum(0)
        dx1 = dy2 + dpre @ params[p + "ff1_w"].T
        dy1, grads[p + "ln1_g"], grads[p + "ln1_b"] = _ln_backward(dx1, params[p + "ln1_g"], c["ln1"])
        da = dy1 if c["drop_a"] is None else dy1 * c["drop_a"]
        grads[p + "o_w"] = flat(c["ctx"]).T @ flat(da)
        grads[p + "o_b"] = flat(da).sum(0)
        dctx = (da @ params[p + "o_w"].T).reshape(n, t, nh, dh).transpose(0, 2, 1, 3)
        att = c["att"]
        datt = dctx @ c["v"].transpose(0, 1, 3, 2)
        dv = att.transpose(0, 1, 3, 2) @ dctx
        ds = att * (datt - (datt * att).sum(-1, keepdims=True)) * scale
        dq = ds @ c["k"]
        dk = ds.transpose(0, 1, 3, 2) @ c["q"]
        xin = flat(c["x"])
        dx = dy1
        for m, d in (("q", dq), ("k", dk), ("v", dv)):
            d = d.transpose(0, 2, 1, 3).reshape(n, t, h)
            grads[p + f"{m}_w"] = xin.T @ flat(d)
            grads[p + f"{m}_b"] = flat(d).sum(0)
            dx = dx + d @ params[p + f"{m}_w"].T

    if cache["drop_emb"] is not None:
        dx = dx * cache["drop_emb"]
    demb, grads["emb_ln_g"], grads["emb_ln_b"] = _ln_backward(dx, params["emb_ln_g"], cache["ln_emb"])
    dtext, dreg = demb[:, :s], demb[:, s:]
    np.add.at(grads["tok_emb"], st.tokens, dtext)
    np.add.at(grads["pos_emb"], st.positions, dtext)
    np.add.at(grads["seg_emb"], st.segments, demb)
    grads["region_w"] = flat(st.regions).T @ flat(dreg) if dreg.size else grads["region_w"]
    grads["region_b"] = flat(dreg).sum(0) if dreg.size else grads["region_b"]
    return grads


# ---------------------------------------------------------------- checkpoints

_MAGIC = "VIVO-TENSORS 1"


def save_tensors(path: str | os.PathLike, header: dict, arrays: dict[str, np.ndarray]) -> None:
    """Write named float64 arrays atomically.

    Layout: ASCII manifest lines, then the raw payload::

        VIVO-TENSORS 1
        header {"layers": 2, ...}
        tensor <name> <dim1,dim2,...> <byte offset> <byte length>
        ...
        payload <total bytes> <sha256 hex of payload>
        <payload: little-endian float64 arrays, C order, in manifest order>

    A 0-d array is written with an empty dimension list.
    """
    lines = [_MAGIC, "header " + json.dumps(header, sort_keys=True)]
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        if not name or any(c.isspace() for c in name):
            raise VivoIOError(f"tensor name {name!r} cannot be stored")
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        shape = ",".join(str(d) for d in np.shape(arr))
        lines.append(f"tensor {name} {shape} {offset} {len(data)}")
        chunks.append(data)
        offset += len(data)
    payload = b"".join(chunks)
    lines.append(f"payload {len(payload)} {hashlib.sha256(payload).hexdigest()}")
    blob = ("\n".join(lines) + "\n").encode("ascii") + payload
    tmp = f"{os.fspath(path)}.tmp"
    try:
        with open(tmp, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except OSError as exc:
        raise VivoIOError(f"cannot write {path}: {exc.strerror}") from exc


def load_tensors(path: str | os.PathLike) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise VivoIOError(f"cannot read {path}: {exc.strerror}") from exc

    pos = 0

    def next_line():
        nonlocal pos
        end = blob.find(b"\n", pos)
        if end < 0:
            raise CorruptCheckpoint(f"{path}: truncated manifest")
        line = blob[pos:end]
        pos = end + 1
        try:
            return line.decode("ascii")
        except UnicodeDecodeError as exc:
            raise CorruptCheckpoint(f"{path}: manifest is not ASCII") from exc

    if next_line() != _MAGIC:
        raise CorruptCheckpoint(f"{path}: not a tensor file (bad magic line)")
    head = next_line()
    if not head.startswith("header "):
        raise CorruptCheckpoint(f"{path}: missing header line")
    try:
        header = json.loads(head[len("header "):])
    except ValueError as exc:
        raise CorruptCheckpoint(f"{path}: bad header line") from exc

    entries = []
    while True:
        parts = next_line().split(" ")
        try:
            if parts[0] == "payload" and len(parts) == 3:
                total, digest = int(parts[1]), parts[2]
                break
            if parts[0] != "tensor" or len(parts) != 5:
                raise ValueError
            shape = tuple(int(d) for d in parts[2].split(",") if d)
            entries.append((parts[1], shape, int(parts[3]), int(parts[4])))
        except ValueError as exc:
            raise CorruptCheckpoint(f"{path}: malformed manifest line {' '.join(parts)!r}") from exc

    payload = blob[pos:]
    if len(payload) != total:
        raise CorruptCheckpoint(f"{path}: payload has {len(payload)} bytes, manifest says {total} (truncated?)")
    if hashlib.sha256(payload).hexdigest() != digest:
        raise CorruptCheckpoint(f"{path}: payload checksum mismatch")
    arrays = {}
    for name, shape, off, size in entries:
        if size != 8 * int(np.prod(shape, dtype=np.int64)) or off < 0 or off + size > total:
            raise CorruptCheckpoint(f"{path}: tensor {name} has inconsistent size/offset")
        arrays[name] = np.frombuffer(payload, dtype="<f8", count=size // 8, offset=off).astype(np.float64).reshape(shape)
    return header, arrays


def save(params: Parameters, path: str | os.PathLike) -> None:
    """Checkpoint = tensor file whose header is the EncoderConfig."""
    save_tensors(path, asdict(params.config), dict(params))


def load(path: str | os.PathLike, expected: EncoderConfig | None = None) -> Parameters:
    """Load a checkpoint; ``expected`` additionally pins the model shape."""
    header, arrays = load_tensors(path)
    try:
        config = EncoderConfig(**header)
    except (TypeError, ValueError, ShapeMismatch) as exc:
        raise CorruptCheckpoint(f"{path}: bad config header: {exc}") from exc
    problems = []
    stored = config.shapes()
    for name in sorted(set(stored) | set(arrays)):
        got = arrays[name].shape if name in arrays else None
        if stored.get(name) != got:
            problems.append(f"{name}: stored {got} vs config {stored.get(name)}")
    if expected is not None and expected != config:
        wanted = expected.shapes()
        for name in sorted(set(wanted) | set(arrays)):
            got = arrays[name].shape if name in arrays else None
            if wanted.get(name) != got:
                problems.append(f"{name}: checkpoint {got} vs expected {wanted.get(name)}")
        if not problems:
            problems.append(f"config mismatch: checkpoint {asdict(config)} vs expected {asdict(expected)}")
    if problems:
        shown = "; ".join(problems[:5]) + (f"; ... {len(problems) - 5} more" if len(problems) > 5 else "")
        raise CorruptCheckpoint(f"{path}: shape mismatch in {len(problems)} array(s): {shown}")
    return Parameters(config, arrays)
