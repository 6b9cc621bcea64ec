"""Causal decoder-only transformer in numpy with hand-written backprop.

Pre-norm blocks: RMSNorm -> multi-head attention with rotary positions ->
residual, RMSNorm -> SiLU-gated feed-forward -> residual. A final RMSNorm and
an untied output projection produce logits over the unified vocabulary.

Parameters live in a plain ``dict[str, np.ndarray]`` whose key order (see
:func:`param_names`) is also the on-disk order in checkpoints.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

RMS_EPS = 1e-5
CKPT_MAGIC = b"DGCK"
CKPT_VERSION = 1


class ModelError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    vocab: int = 304
    context: int = 304
    layers: int = 4
    width: int = 128
    heads: int = 4
    ffn_mult: float = 8 / 3
    token_dropout: float = 0.1
    seed: int = 0
    rope_base: float = 10000.0
    dtype: str = "float32"

    def __post_init__(self) -> None:
        if min(self.vocab, self.context, self.layers, self.width, self.heads) < 1:
            raise ModelError(f"all sizes must be positive: {self}")
        if self.width % self.heads:
            raise ModelError(f"width {self.width} not divisible by heads {self.heads}")
        if self.head_dim % 2:
            raise ModelError(f"head_dim {self.head_dim} must be even for rotary pairs")
        if not 0.0 <= self.token_dropout < 1.0:
            raise ModelError("token_dropout must be in [0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ModelError(f"unsupported dtype {self.dtype}")

    @property
    def head_dim(self) -> int:
        return self.width // self.heads

    @property
    def ffn_hidden(self) -> int:
        return int(math.ceil(self.ffn_mult * self.width / 8.0) * 8)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


def param_names(cfg: ModelConfig) -> list[str]:
    names = ["tok_emb"]
    for i in range(cfg.layers):
        names += [f"l{i}.attn_norm", f"l{i}.wq", f"l{i}.wk", f"l{i}.wv", f"l{i}.wo",
                  f"l{i}.ffn_norm", f"l{i}.w1", f"l{i}.w3", f"l{i}.w2"]
    return names + ["final_norm", "out"]


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f, V = cfg.width, cfg.ffn_hidden, cfg.vocab
    shapes: dict[str, tuple[int, ...]] = {"tok_emb": (V, d)}
    for i in range(cfg.layers):
        shapes.update({
            f"l{i}.attn_norm": (d,), f"l{i}.wq": (d, d), f"l{i}.wk": (d, d), f"l{i}.wv": (d, d),
            f"l{i}.wo": (d, d), f"l{i}.ffn_norm": (d,), f"l{i}.w1": (d, f), f"l{i}.w3": (d, f),
            f"l{i}.w2": (f, d),
        })
    shapes["final_norm"] = (d,)
    shapes["out"] = (d, V)
    return {n: shapes[n] for n in param_names(cfg)}


def init(cfg: ModelConfig) -> dict[str, np.ndarray]:
    """Seeded N(0, 0.02) init; residual output projections scaled by 1/sqrt(2 * layers)."""
    rng = np.random.default_rng(cfg.seed)
    resid_std = 0.02 / math.sqrt(2 * cfg.layers)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if len(shape) == 1:
            p = np.ones(shape)
        else:
            std = resid_std if name.endswith((".wo", ".w2")) else 0.02
            p = rng.normal(0.0, std, size=shape)
        params[name] = p.astype(cfg.np_dtype)
    return params


def count_params(params: dict[str, np.ndarray]) -> int:
    return int(sum(p.size for p in params.values()))


# ---------------------------------------------------------------- rotary

def rope_tables(positions: np.ndarray, head_dim: int, base: float, dtype) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables of shape positions.shape + (head_dim // 2,)."""
    if head_dim % 2:
        raise ModelError("rotary embedding needs an even head_dim")
    freqs = base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    ang = np.asarray(positions, dtype=np.float64)[..., None] * freqs
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def _rotate(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    x0, x1 = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = x0 * cos - x1 * sin
    out[..., 1::2] = x0 * sin + x1 * cos
    return out


def apply_rotary(q: np.ndarray, k: np.ndarray, position, base: float = 10000.0):
    """Rotate consecutive pairs of the last axis of ``q`` and ``k`` by position * base**(-2i/d)."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if q.shape[-1] % 2 or k.shape[-1] % 2:
        raise ModelError("rotary embedding needs an even head_dim")
    cos, sin = rope_tables(np.asarray(position), q.shape[-1], base, np.float64)
    return _rotate(q, cos, sin), _rotate(k, cos, sin)


# ---------------------------------------------------------------- pieces

def _rms(x, g):
    r = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)
    return x * r * g, r


def _rms_back(dy, x, r, g):
    u = dy * g
    dg = (dy * x * r).reshape(-1, x.shape[-1]).sum(0)
    dx = r * u - x * (r ** 3) * np.mean(u * x, axis=-1, keepdims=True)
    return dx, dg


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def _softmax(s, axis=-1, inplace: bool = False):
    m = np.max(s, axis=axis, keepdims=True)
    if not inplace:
        e = np.exp(s - m)
        return e / e.sum(axis=axis, keepdims=True)
    s -= m
    np.exp(s, out=s)
    s /= s.sum(axis=axis, keepdims=True)
    return s


def _as_batch(tokens, positions):
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    B, T = tokens.shape
    if positions is None:
        positions = np.arange(T)
    positions = np.asarray(positions, dtype=np.int64)
    if positions.ndim == 1:
        positions = np.broadcast_to(positions[None, :], (B, T))
    if positions.shape != (B, T):
        raise ModelError(f"positions shape {positions.shape} does not match tokens {tokens.shape}")
    return tokens, positions


def dropout_mask(shape, rate: float, seed) -> np.ndarray:
    """Boolean keep-mask for token dropout; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    return rng.random(shape) >= rate


def forward(tokens, params, cfg: ModelConfig, positions=None, train_mode: bool = False,
            dropout_seed=None, keep_cache: bool = False):
    """Logits of shape (B, T, vocab) (or (T, vocab) for 1-D input).

    ``logits[t]`` depends only on tokens[:t+1]. In ``train_mode`` each token
    embedding is zeroed with probability ``cfg.token_dropout``. With
    ``keep_cache`` the activations needed by :func:`backward` are returned as a
    second value.
    """
    squeeze = np.asarray(tokens).ndim == 1
    tokens, positions = _as_batch(tokens, positions)
    B, T = tokens.shape
    if T > cfg.context:
        raise ModelError(f"sequence length {T} exceeds context {cfg.context}")
    if T == 0:
        raise ModelError("empty token stream")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab:
        raise ModelError(f"token id outside [0, {cfg.vocab})")
    dt = cfg.np_dtype
    H, hd, d = cfg.heads, cfg.head_dim, cfg.width
    cos, sin = rope_tables(positions, hd, cfg.rope_base, dt)
    cos, sin = cos[:, None], sin[:, None]  # (B, 1, T, hd/2)
    causal = np.triu(np.ones((T, T), dtype=bool), k=1)
    scale = dt.type(1.0 / math.sqrt(hd))

    x = params["tok_emb"][tokens]
    keep = None
    if train_mode and cfg.token_dropout > 0:
        keep = dropout_mask((B, T), cfg.token_dropout, dropout_seed)
        x = x * keep[..., None].astype(dt)
    cache = {"tokens": tokens, "keep": keep, "cos": cos, "sin": sin, "causal": causal, "layers": []}

    for i in range(cfg.layers):
        p = lambda n: params[f"l{i}.{n}"]
        lc = {"x_in": x}
        h, r1 = _rms(x, p("attn_norm"))
        h2 = h.reshape(B * T, d)
        q = (h2 @ p("wq")).reshape(B, T, H, hd).transpose(0, 2, 1, 3)
        k = (h2 @ p("wk")).reshape(B, T, H, hd).transpose(0, 2, 1, 3)
        v = (h2 @ p("wv")).reshape(B, T, H, hd).transpose(0, 2, 1, 3)
        qr, kr = _rotate(q, cos, sin), _rotate(k, cos, sin)
        s = qr @ kr.transpose(0, 1, 3, 2)
        s *= scale
        s[..., causal] = -np.inf
        P = _softmax(s, inplace=True)
        o = (P @ v).transpose(0, 2, 1, 3).reshape(B * T, d)
        x = x + (o @ p("wo")).reshape(B, T, d)
        lc.update(r1=r1, h=h2, qr=qr, kr=kr, v=v, P=P, o=o, x_mid=x)

        g, r2 = _rms(x, p("ffn_norm"))
        g2 = g.reshape(B * T, d)
        a = g2 @ p("w1")
        b = g2 @ p("w3")
        sg = _sigmoid(a)
        act = a * sg * b
        x = x + (act @ p("w2")).reshape(B, T, d)
        lc.update(r2=r2, g=g2, a=a, b=b, sg=sg, act=act)
        cache["layers"].append(lc)

    cache["x_final"] = x
    hf, rf = _rms(x, params["final_norm"])
    hf2 = hf.reshape(B * T, d)
    logits = (hf2 @ params["out"]).reshape(B, T, cfg.vocab)
    cache.update(rf=rf, hf=hf2)
    out = logits[0] if squeeze else logits
    return (out, cache) if keep_cache else out


def nll_loss(logits: np.ndarray, targets: np.ndarray) -> float:
    """Mean negative log-likelihood of ``targets`` under ``softmax(logits)``."""
    logits = np.asarray(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise ModelError(f"logits {logits.shape} and targets {targets.shape} disagree")
    l2 = logits.reshape(-1, logits.shape[-1]).astype(np.float64)
    t = targets.ravel()
    m = l2.max(1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(l2 - m).sum(1))
    return float(np.mean(lse - l2[np.arange(t.size), t]))


def nll_grad(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """d nll_loss / d logits."""
    V = logits.shape[-1]
    P = _softmax(logits.reshape(-1, V))
    t = np.asarray(targets, dtype=np.int64).ravel()
    P[np.arange(t.size), t] -= 1.0
    return (P / t.size).reshape(logits.shape)


def backward(dlogits: np.ndarray, cache: dict, params, cfg: ModelConfig) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. every parameter, given d loss / d logits."""
    tokens = cache["tokens"]
    B, T = tokens.shape
    H, hd, d, V = cfg.heads, cfg.head_dim, cfg.width, cfg.vocab
    dt = cfg.np_dtype
    cos, sin = cache["cos"], cache["sin"]
    scale = dt.type(1.0 / math.sqrt(hd))
    grads: dict[str, np.ndarray] = {}

    dl = np.asarray(dlogits, dtype=dt).reshape(B * T, V)
    grads["out"] = cache["hf"].T @ dl
    dhf = (dl @ params["out"].T).reshape(B, T, d)
    dx, grads["final_norm"] = _rms_back(dhf, cache["x_final"], cache["rf"], params["final_norm"])

    for i in reversed(range(cfg.layers)):
        p = lambda n: params[f"l{i}.{n}"]
        lc = cache["layers"][i]
        # feed-forward
        d2 = dx.reshape(B * T, d)
        grads[f"l{i}.w2"] = lc["act"].T @ d2
        dact = d2 @ p("w2").T
        a, b, sg = lc["a"], lc["b"], lc["sg"]
        silu = a * sg
        db = dact * silu
        da = dact * b * sg * (1.0 + a * (1.0 - sg))
        grads[f"l{i}.w1"] = lc["g"].T @ da
        grads[f"l{i}.w3"] = lc["g"].T @ db
        dg = (da @ p("w1").T + db @ p("w3").T).reshape(B, T, d)
        dxn, grads[f"l{i}.ffn_norm"] = _rms_back(dg, lc["x_mid"], lc["r2"], p("ffn_norm"))
        dx = dx + dxn
        # attention
        d2 = dx.reshape(B * T, d)
        grads[f"l{i}.wo"] = lc["o"].T @ d2
        do = (d2 @ p("wo").T).reshape(B, T, H, hd).transpose(0, 2, 1, 3)
        P, v = lc["P"], lc["v"]
        dv = P.transpose(0, 1, 3, 2) @ do
        dP = do @ v.transpose(0, 1, 3, 2)
        ds = dP  # softmax backward, in place: P * (dP - sum(dP * P)) * scale
        ds -= np.einsum("bhij,bhij->bhi", dP, P)[..., None]
        ds *= P
        ds *= scale
        dqr = ds @ lc["kr"]
        dkr = ds.transpose(0, 1, 3, 2) @ lc["qr"]
        dq = _rotate(dqr, cos, -sin)
        dk = _rotate(dkr, cos, -sin)
        flat = lambda z: z.transpose(0, 2, 1, 3).reshape(B * T, d)
        dq, dk, dv = flat(dq), flat(dk), flat(dv)
        h = lc["h"]
        grads[f"l{i}.wq"] = h.T @ dq
        grads[f"l{i}.wk"] = h.T @ dk
        grads[f"l{i}.wv"] = h.T @ dv
        dh = (dq @ p("wq").T + dk @ p("wk").T + dv @ p("wv").T).reshape(B, T, d)
        dxn, grads[f"l{i}.attn_norm"] = _rms_back(dh, lc["x_in"], lc["r1"], p("attn_norm"))
        dx = dx + dxn

    if cache["keep"] is not None:
        dx = dx * cache["keep"][..., None].astype(dt)
    demb = np.zeros_like(params["tok_emb"])
    np.add.at(demb, tokens.ravel(), dx.reshape(B * T, d))
    grads["tok_emb"] = demb
    return {n: grads[n] for n in param_names(cfg)}


def loss_and_grads(inputs, targets, params, cfg: ModelConfig, positions=None,
                   train_mode: bool = False, dropout_seed=None):
    logits, cache = forward(inputs, params, cfg, positions, train_mode, dropout_seed, keep_cache=True)
    targets = np.asarray(targets, dtype=np.int64).reshape(cache["tokens"].shape)
    logits = logits.reshape(cache["tokens"].shape + (cfg.vocab,))
    loss = nll_loss(logits, targets)
    grads = backward(nll_grad(logits, targets), cache, params, cfg)
    return loss, grads


# ---------------------------------------------------------------- optimizer

@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 5e-2
    clip_norm: float = 1.0
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray], **hyper) -> "OptimizerState":
        return cls({n: np.zeros_like(p) for n, p in params.items()},
                   {n: np.zeros_like(p) for n, p in params.items()}, **hyper)

    def hyper(self) -> dict:
        return {k: getattr(self, k) for k in ("lr", "beta1", "beta2", "weight_decay", "clip_norm", "eps")}


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def decays(name: str, p: np.ndarray) -> bool:
    """Weight decay applies to matrices (embeddings and projections), not norm gains."""
    return p.ndim >= 2


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], opt: OptimizerState) -> float:
    """Clip to ``opt.clip_norm`` by global norm, then one AdamW update in place.

    Returns the pre-clip gradient norm.
    """
    norm = global_norm(grads)
    if not math.isfinite(norm):
        raise TrainingDivergedError(f"non-finite gradient norm at step {opt.step}")
    scale = opt.clip_norm / norm if norm > opt.clip_norm else 1.0
    opt.step += 1
    bc1 = 1.0 - opt.beta1 ** opt.step
    bc2 = 1.0 - opt.beta2 ** opt.step
    for n, p in params.items():
        g = grads[n] * p.dtype.type(scale)
        m, v = opt.m[n], opt.v[n]
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        if opt.weight_decay and decays(n, p):
            p *= 1.0 - opt.lr * opt.weight_decay
        p -= opt.lr * (m / bc1) / (np.sqrt(v / bc2) + opt.eps)
    return norm


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path: str | Path, params, cfg: ModelConfig, opt: OptimizerState | None = None,
                    extra: dict | None = None) -> None:
    """Binary checkpoint: header, JSON config block, float32 params, optimizer state."""
    meta = {"model": asdict(cfg), "extra": extra or {}}
    if opt is not None:
        meta["optimizer"] = {"step": opt.step, **opt.hyper()}
    blob = json.dumps(meta, sort_keys=True).encode()
    names = param_names(cfg)
    with open(path, "wb") as f:
        f.write(struct.pack("<4sII", CKPT_MAGIC, CKPT_VERSION, len(blob)))
        f.write(blob)
        for n in names:
            f.write(np.ascontiguousarray(params[n], dtype="<f4").tobytes())
        f.write(struct.pack("<B", 1 if opt is not None else 0))
        if opt is not None:
            for n in names:
                f.write(np.ascontiguousarray(opt.m[n], dtype="<f4").tobytes())
            for n in names:
                f.write(np.ascontiguousarray(opt.v[n], dtype="<f4").tobytes())


@dataclass
class Checkpoint:
    cfg: ModelConfig
    params: dict[str, np.ndarray]
    opt: OptimizerState | None = None
    extra: dict = field(default_factory=dict)


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    head = struct.calcsize("<4sII")
    if len(raw) < head:
        raise ModelError(f"{path}: truncated checkpoint")
    magic, version, n = struct.unpack_from("<4sII", raw)
    if magic != CKPT_MAGIC:
        raise ModelError(f"{path}: bad magic {magic!r}")
    if version != CKPT_VERSION:
        raise ModelError(f"{path}: unsupported checkpoint version {version}")
    meta = json.loads(raw[head:head + n])
    cfg = ModelConfig(**meta["model"])
    off = head + n
    shapes = param_shapes(cfg)

    def read_block():
        nonlocal off
        out = {}
        for name, shape in shapes.items():
            size = int(np.prod(shape))
            arr = np.frombuffer(raw, dtype="<f4", count=size, offset=off)
            off += 4 * size
            out[name] = arr.reshape(shape).astype(cfg.np_dtype)
        return out

    params = read_block()
    has_opt = raw[off]
    off += 1
    opt = None
    if has_opt:
        m, v = read_block(), read_block()
        om = meta["optimizer"]
        opt = OptimizerState(m, v, step=om.pop("step"), **om)
    if off != len(raw):
        raise ModelError(f"{path}: {len(raw) - off} trailing bytes")
    return Checkpoint(cfg, params, opt, meta.get("extra", {}))


# ---------------------------------------------------------------- incremental decoding

class KVDecoder:
    """Incremental forward pass with a per-layer key/value cache (single stream)."""

    def __init__(self, params, cfg: ModelConfig):
        self.params = params
        self.cfg = cfg
        self.reset()

    def reset(self) -> None:
        self.k = [np.zeros((self.cfg.heads, 0, self.cfg.head_dim), self.cfg.np_dtype) for _ in range(self.cfg.layers)]
        self.v = [np.zeros((self.cfg.heads, 0, self.cfg.head_dim), self.cfg.np_dtype) for _ in range(self.cfg.layers)]

    @property
    def length(self) -> int:
        return self.k[0].shape[1]

    def feed(self, tokens, positions) -> np.ndarray:
        """Append tokens; returns logits (n, vocab) for the appended tokens."""
        cfg, params = self.cfg, self.params
        tokens = np.asarray(tokens, dtype=np.int64).ravel()
        positions = np.asarray(positions, dtype=np.int64).ravel()
        n = tokens.size
        T0 = self.length
        if T0 + n > cfg.context:
            raise ModelError(f"context overflow: {T0 + n} > {cfg.context}")
        if n == 0:
            return np.zeros((0, cfg.vocab), cfg.np_dtype)
        dt = cfg.np_dtype
        H, hd, d = cfg.heads, cfg.head_dim, cfg.width
        cos, sin = rope_tables(positions, hd, cfg.rope_base, dt)
        mask = np.arange(T0 + n)[None, :] > (T0 + np.arange(n))[:, None]
        scale = dt.type(1.0 / math.sqrt(hd))
        x = params["tok_emb"][tokens]
        for i in range(cfg.layers):
            p = lambda nm: params[f"l{i}.{nm}"]
            h, _ = _rms(x, p("attn_norm"))
            q = (h @ p("wq")).reshape(n, H, hd).transpose(1, 0, 2)
            k = (h @ p("wk")).reshape(n, H, hd).transpose(1, 0, 2)
            v = (h @ p("wv")).reshape(n, H, hd).transpose(1, 0, 2)
            q, k = _rotate(q, cos, sin), _rotate(k, cos, sin)
            self.k[i] = np.concatenate([self.k[i], k], axis=1)
            self.v[i] = np.concatenate([self.v[i], v], axis=1)
            s = (q @ self.k[i].transpose(0, 2, 1)) * scale
            s = np.where(mask, -np.inf, s)
            o = (_softmax(s) @ self.v[i]).transpose(1, 0, 2).reshape(n, d)
            x = x + o @ p("wo")
            g, _ = _rms(x, p("ffn_norm"))
            a = g @ p("w1")
            x = x + ((a * _sigmoid(a)) * (g @ p("w3"))) @ p("w2")
        hf, _ = _rms(x, params["final_norm"])
        return hf @ params["out"]
