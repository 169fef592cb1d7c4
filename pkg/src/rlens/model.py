"""Toy waveform transformer classifier with hand-written forward/backward passes.

Layout mirrors a wav2vec2-style detector at desk scale: a strided 1-D conv
frontend (GELU after every layer), a linear projection to the token dimension
plus fixed sinusoidal positions, pre-LN multi-head self-attention blocks, a
final layer norm, mean pooling over tokens and a two-way linear head
(class 0 = bona fide, class 1 = spoof).

Everything is plain numpy. The backward pass exposes the quantities the
attribution methods need: gradients with respect to every post-softmax
attention map, the last conv feature map and the input samples.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._util import ConfigError, DataError, rng_for, thread_map
from .signal import Utterance, as_samples

SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
LN_EPS = 1e-5
N_CLASSES = 2
SCORE_KINDS = ("logit", "prob")


@dataclass(frozen=True)
class ModelConfig:
    # (channels, kernel, stride) per conv layer
    conv: tuple[tuple[int, int, int], ...] = ((32, 10, 8), (32, 8, 5), (32, 4, 1))
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 2
    d_ff: int = 64
    positional: bool = True

    def __post_init__(self):
        object.__setattr__(self, "conv", tuple(tuple(int(v) for v in c) for c in self.conv))
        if not self.conv:
            raise ConfigError("need at least one conv layer")
        if any(min(c) < 1 for c in self.conv):
            raise ConfigError("conv channels, kernels and strides must be >= 1")
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        if self.n_layers < 1 or self.d_ff < 1:
            raise ConfigError("need n_layers >= 1 and d_ff >= 1")

    @property
    def stride(self) -> int:
        """Samples per token."""
        return math.prod(c[2] for c in self.conv)

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def n_tokens(self, T: int) -> int:
        self.check_length(T)
        return T // self.stride

    def check_length(self, T: int) -> None:
        if T < 1 or T % self.stride:
            raise ConfigError(f"input length {T} is not a multiple of the total stride {self.stride}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["conv"] = [list(c) for c in self.conv]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        if set(d) - known:
            raise ConfigError(f"unknown model config fields: {sorted(set(d) - known)}")
        return cls(**d)


MICRO_CONFIG = ModelConfig(conv=((4, 4, 4), (4, 3, 2)), d_model=8, n_layers=1, n_heads=2, d_ff=16)


@dataclass(frozen=True, eq=False)
class ModelParams:
    config: ModelConfig
    tensors: dict[str, np.ndarray]

    def __getitem__(self, name):
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def replace(self, **updates) -> "ModelParams":
        t = dict(self.tensors)
        t.update(updates)
        return ModelParams(self.config, t)

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()})


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes = {}
    c_in = 1
    for i, (c, k, _) in enumerate(cfg.conv):
        shapes[f"conv{i}.w"] = (c, c_in, k)
        shapes[f"conv{i}.b"] = (c,)
        c_in = c
    d, f = cfg.d_model, cfg.d_ff
    shapes["proj.w"] = (c_in, d)
    shapes["proj.b"] = (d,)
    for l in range(cfg.n_layers):
        p = f"layer{l}."
        shapes.update({
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "wq": (d, d), p + "bq": (d,),
            p + "wk": (d, d), p + "bk": (d,),
            p + "wv": (d, d), p + "bv": (d,),
            p + "wo": (d, d), p + "bo": (d,),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
            p + "ff.w1": (d, f), p + "ff.b1": (f,),
            p + "ff.w2": (f, d), p + "ff.b2": (d,),
        })
    shapes["lnf.g"] = (d,)
    shapes["lnf.b"] = (d,)
    shapes["head.w"] = (d, N_CLASSES)
    shapes["head.b"] = (N_CLASSES,)
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    rng = rng_for(seed, "init")
    tensors = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            tensors[name] = np.ones(shape)
        elif leaf.startswith("b"):
            tensors[name] = np.zeros(shape)
        elif name.startswith("conv"):
            fan_in = shape[1] * shape[2]
            tensors[name] = rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)
        else:
            scale = 0.01 if name == "head.w" else math.sqrt(1.0 / shape[0])
            tensors[name] = rng.standard_normal(shape) * scale
    return ModelParams(cfg, tensors)


# -- primitives ---------------------------------------------------------------

def _gelu(z):
    t = np.tanh(SQRT_2_OVER_PI * (z + 0.044715 * (z * z * z)))
    return 0.5 * z * (1.0 + t), t


def _gelu_grad(z, t):
    return 0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * z * z)


def _layernorm(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def _layernorm_back(dy, g, cache):
    xhat, inv = cache
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(-1, keepdims=True) - xhat * (dxhat * xhat).mean(-1, keepdims=True))
    red = tuple(range(dy.ndim - 1))
    return dx, (dy * xhat).sum(red), dy.sum(red)


def _pad(L: int, k: int, s: int) -> tuple[int, int, int]:
    """Left/right padding so that the output has ceil(L / s) frames."""
    out = -(-L // s)
    total = max((out - 1) * s + k - L, 0)
    return total // 2, total - total // 2, out


def _im2col(x, k, s):
    # x: (B, L, C) -> (B, out, k*C) with window index major
    B, L, C = x.shape
    lp, rp, out = _pad(L, k, s)
    xp = np.pad(x, ((0, 0), (lp, rp), (0, 0)))
    win = sliding_window_view(xp, k, axis=1)[:, ::s][:, :out]  # (B, out, C, k)
    return win.transpose(0, 1, 3, 2).reshape(B, out, k * C), (L, lp, rp, out)


def _col2im(dcols, k, s, C, meta):
    L, lp, rp, out = meta
    B = dcols.shape[0]
    dcols = dcols.reshape(B, out, k, C)
    dxp = np.zeros((B, lp + L + rp, C), dtype=dcols.dtype)
    for j in range(k):
        dxp[:, j:j + s * (out - 1) + 1:s] += dcols[:, :, j]
    return dxp[:, lp:lp + L]


def _outer(a, b):
    # sum over leading axes of a[..., i] * b[..., j]
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


def _conv_matrix(w):
    # (C_out, C_in, k) -> (k*C_in, C_out) matching the im2col layout
    c_out, c_in, k = w.shape
    return w.transpose(2, 1, 0).reshape(k * c_in, c_out)


def positional_encoding(s: int, d: int) -> np.ndarray:
    pos = np.arange(s)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


# -- batched passes -------------------------------------------------------------

def _forward(params: ModelParams, x: np.ndarray, perturb: dict | None = None):
    """Batched forward on (B, T) inputs; returns (logits, cache)."""
    cfg = params.config
    P = params.tensors
    dtype = P["proj.w"].dtype
    x = np.asarray(x, dtype=dtype)
    if x.ndim != 2:
        raise DataError("expected a (batch, samples) array")
    cfg.check_length(x.shape[1])
    perturb = perturb or {}
    cache = {"x_shape": x.shape, "conv": []}

    h = x[:, :, None]
    for i, (c, k, s) in enumerate(cfg.conv):
        cols, meta = _im2col(h, k, s)
        z = cols @ _conv_matrix(P[f"conv{i}.w"]) + P[f"conv{i}.b"]
        h, t = _gelu(z)
        cache["conv"].append((cols, meta, z, t, cols.shape[2] // k))
    if "feat" in perturb:
        h = h + perturb["feat"]
    cache["feat"] = h
    B, s_tok, _ = h.shape

    e = h @ P["proj.w"] + P["proj.b"]
    if cfg.positional:
        e = e + positional_encoding(s_tok, cfg.d_model).astype(dtype)

    nh, dh = cfg.n_heads, cfg.head_dim
    scale = 1.0 / math.sqrt(dh)
    layers = []
    for l in range(cfg.n_layers):
        p = f"layer{l}."
        u, ln1 = _layernorm(e, P[p + "ln1.g"], P[p + "ln1.b"])

        def heads(m):
            return m.reshape(B, s_tok, nh, dh).transpose(0, 2, 1, 3)

        q = heads(u @ P[p + "wq"] + P[p + "bq"])
        kk = heads(u @ P[p + "wk"] + P[p + "bk"])
        v = heads(u @ P[p + "wv"] + P[p + "bv"])
        sc = (q @ kk.transpose(0, 1, 3, 2)) * scale
        sc = sc - sc.max(-1, keepdims=True)
        A = np.exp(sc)
        A /= A.sum(-1, keepdims=True)
        A_used = A + perturb[f"attn{l}"] if f"attn{l}" in perturb else A
        ctx = (A_used @ v).transpose(0, 2, 1, 3).reshape(B, s_tok, cfg.d_model)
        e = e + ctx @ P[p + "wo"] + P[p + "bo"]

        u2, ln2 = _layernorm(e, P[p + "ln2.g"], P[p + "ln2.b"])
        z1 = u2 @ P[p + "ff.w1"] + P[p + "ff.b1"]
        g1, t1 = _gelu(z1)
        e = e + g1 @ P[p + "ff.w2"] + P[p + "ff.b2"]
        layers.append(dict(u=u, ln1=ln1, q=q, k=kk, v=v, A=A, A_used=A_used, ctx=ctx,
                           u2=u2, ln2=ln2, z1=z1, t1=t1, g1=g1))
    cache["layers"] = layers

    zf, lnf = _layernorm(e, P["lnf.g"], P["lnf.b"])
    pooled = zf.mean(1)
    logits = pooled @ P["head.w"] + P["head.b"]
    cache.update(lnf=lnf, pooled=pooled, s=s_tok)
    return logits, cache


def _backward(params: ModelParams, cache: dict, dlogits: np.ndarray, need_params: bool = True):
    """Backpropagate ``dlogits`` (B, 2); returns a dict of gradients.

    Keys: every parameter name (when ``need_params``), ``attn`` (list of
    (B, h, s, s) gradients w.r.t. the post-softmax maps), ``feat`` (B, s, C)
    and ``input`` (B, T).
    """
    cfg = params.config
    P = params.tensors
    B, s_tok = dlogits.shape[0], cache["s"]
    nh, dh = cfg.n_heads, cfg.head_dim
    scale = 1.0 / math.sqrt(dh)
    g = {}

    g["head.w"] = cache["pooled"].T @ dlogits
    g["head.b"] = dlogits.sum(0)
    dzf = np.repeat((dlogits @ P["head.w"].T)[:, None, :] / s_tok, s_tok, axis=1)
    de, g["lnf.g"], g["lnf.b"] = _layernorm_back(dzf, P["lnf.g"], cache["lnf"])

    attn_grads = [None] * cfg.n_layers
    for l in reversed(range(cfg.n_layers)):
        p = f"layer{l}."
        c = cache["layers"][l]
        # feed-forward branch
        g[p + "ff.w2"] = _outer(c["g1"], de)
        g[p + "ff.b2"] = de.sum((0, 1))
        dz1 = (de @ P[p + "ff.w2"].T) * _gelu_grad(c["z1"], c["t1"])
        g[p + "ff.w1"] = _outer(c["u2"], dz1)
        g[p + "ff.b1"] = dz1.sum((0, 1))
        du2 = dz1 @ P[p + "ff.w1"].T
        dx, g[p + "ln2.g"], g[p + "ln2.b"] = _layernorm_back(du2, P[p + "ln2.g"], c["ln2"])
        de = de + dx
        # attention branch
        g[p + "wo"] = _outer(c["ctx"], de)
        g[p + "bo"] = de.sum((0, 1))
        dctx = (de @ P[p + "wo"].T).reshape(B, s_tok, nh, dh).transpose(0, 2, 1, 3)
        dA = dctx @ c["v"].transpose(0, 1, 3, 2)
        attn_grads[l] = dA
        dv = c["A_used"].transpose(0, 1, 3, 2) @ dctx
        A = c["A"]
        dsc = A * (dA - (dA * A).sum(-1, keepdims=True)) * scale
        dq = dsc @ c["k"]
        dk = dsc.transpose(0, 1, 3, 2) @ c["q"]

        def merge(m):
            return m.transpose(0, 2, 1, 3).reshape(B, s_tok, cfg.d_model)

        du = np.zeros_like(c["u"])
        for name, dm in (("q", dq), ("k", dk), ("v", dv)):
            dm = merge(dm)
            g[p + "w" + name] = _outer(c["u"], dm)
            g[p + "b" + name] = dm.sum((0, 1))
            du += dm @ P[p + "w" + name].T
        dx, g[p + "ln1.g"], g[p + "ln1.b"] = _layernorm_back(du, P[p + "ln1.g"], c["ln1"])
        de = de + dx

    feat = cache["feat"]
    g["proj.w"] = _outer(feat, de)
    g["proj.b"] = de.sum((0, 1))
    dh_ = de @ P["proj.w"].T
    g["feat"] = dh_
    g["attn"] = attn_grads

    for i in reversed(range(len(cfg.conv))):
        c_out, k, s = cfg.conv[i]
        cols, meta, z, t, c_in = cache["conv"][i]
        dz = dh_ * _gelu_grad(z, t)
        if need_params:
            dW = _outer(cols, dz)
            g[f"conv{i}.w"] = dW.reshape(k, c_in, c_out).transpose(2, 1, 0)
            g[f"conv{i}.b"] = dz.sum((0, 1))
        dcols = dz @ _conv_matrix(P[f"conv{i}.w"]).T
        dh_ = _col2im(dcols, k, s, c_in, meta)
    g["input"] = dh_[:, :, 0]
    return g


def _score_dlogits(logits: np.ndarray, cls: int, score: str) -> np.ndarray:
    if cls not in (0, 1):
        raise ConfigError(f"class must be 0 or 1, got {cls}")
    if score not in SCORE_KINDS:
        raise ConfigError(f"score must be one of {SCORE_KINDS}")
    onehot = np.zeros_like(logits)
    onehot[:, cls] = 1.0
    if score == "logit":
        return onehot
    p = softmax(logits)
    return p[:, cls:cls + 1] * (onehot - p)


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(-1, keepdims=True)


# -- single-utterance API ----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ForwardTrace:
    features: np.ndarray          # last conv layer, (channels, frames)
    attentions: list[np.ndarray]  # per layer, (heads, s, s), post-softmax
    logits: np.ndarray
    probs: np.ndarray
    input: np.ndarray = field(repr=False)
    _cache: dict = field(repr=False, default_factory=dict)

    @property
    def n_tokens(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True, eq=False)
class GradTrace:
    attention_grads: list[np.ndarray]  # per layer, (heads, s, s)
    feature_grad: np.ndarray           # (channels, frames)
    input_grad: np.ndarray             # (T,)
    param_grads: dict[str, np.ndarray] = field(repr=False, default_factory=dict)
    target_class: int = 1
    score: str = "logit"


def forward(params: ModelParams, w) -> tuple[ForwardTrace, float]:
    """Run the classifier on one waveform; returns the trace and the spoof probability."""
    x = as_samples(w)
    logits, cache = _forward(params, x[None, :])
    probs = softmax(logits)[0]
    trace = ForwardTrace(
        features=cache["feat"][0].T,
        attentions=[c["A"][0] for c in cache["layers"]],
        logits=logits[0],
        probs=probs,
        input=x,
        _cache=cache,
    )
    return trace, float(probs[1])


def backward_from_class(params: ModelParams, trace: ForwardTrace, cls: int,
                        score: str = "logit") -> GradTrace:
    """Gradients of the class score (pre-softmax logit by default, or its
    softmax probability with ``score="prob"``) w.r.t. attention maps, last
    conv features, input samples and parameters."""
    dl = _score_dlogits(trace.logits[None, :], cls, score)
    g = _backward(params, trace._cache, dl)
    return GradTrace(
        attention_grads=[a[0] for a in g.pop("attn")],
        feature_grad=g.pop("feat")[0].T,
        input_grad=g.pop("input")[0],
        param_grads=g,
        target_class=cls,
        score=score,
    )


SCORE_CHUNK = 32


def predict_proba(params: ModelParams, X, threads: int = 1) -> np.ndarray:
    """Class probabilities (N, 2) for a stack of equal-length waveforms.

    Always evaluated in fixed-size chunks so that results do not depend on the
    number of threads.
    """
    X = np.asarray([as_samples(x) for x in X]) if not isinstance(X, np.ndarray) else X
    X = np.atleast_2d(X)
    chunks = [X[i:i + SCORE_CHUNK] for i in range(0, len(X), SCORE_CHUNK)]
    out = thread_map(lambda c: softmax(_forward(params, c)[0]), chunks, threads)
    return np.concatenate(out) if out else np.zeros((0, N_CLASSES))


def input_gradients(params: ModelParams, X: np.ndarray, cls: int, score: str = "logit") -> np.ndarray:
    """d score(x) / d x for each row of X (batched)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    out = []
    for i in range(0, len(X), SCORE_CHUNK):
        logits, cache = _forward(params, X[i:i + SCORE_CHUNK])
        out.append(_backward(params, cache, _score_dlogits(logits, cls, score), need_params=False)["input"])
    return np.concatenate(out)


# -- training ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 16
    epochs: int = 20
    val_fraction: float = 0.2

    @classmethod
    def from_dict(cls, d: dict) -> "TrainHyper":
        known = {f.name for f in dataclasses.fields(cls)}
        if set(d) - known:
            raise ConfigError(f"unknown training fields: {sorted(set(d) - known)}")
        return cls(**d)


@dataclass
class TrainLog:
    losses: list[float] = field(default_factory=list)       # mean loss per epoch
    first_batch_loss: float = float("nan")
    heldout_ids: list[str] = field(default_factory=list)
    heldout_scores: list[float] = field(default_factory=list)
    heldout_labels: list[int] = field(default_factory=list)
    heldout_eer: float = float("nan")


def cross_entropy(logits: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    p = softmax(logits)
    n = len(y)
    loss = -np.mean(np.log(p[np.arange(n), y] + 1e-300))
    d = p.copy()
    d[np.arange(n), y] -= 1.0
    return float(loss), d / n


def _split_heldout(utts: Sequence[Utterance], frac: float, seed: int):
    train, held = [], []
    for target in (0, 1):
        group = sorted((u for u in utts if u.target == target), key=lambda u: u.id)
        perm = rng_for(seed, "heldout", target).permutation(len(group))
        n_held = int(round(frac * len(group)))
        held_idx = set(perm[:n_held].tolist())
        for i, u in enumerate(group):
            (held if i in held_idx else train).append(u)
    return train, held


def train(utterances: Sequence[Utterance], config: ModelConfig | None = None,
          hyper: TrainHyper | None = None, seed: int = 0,
          heldout: Sequence[Utterance] | None = None) -> tuple[ModelParams, TrainLog]:
    """Minimise cross-entropy with Adam; deterministic given ``seed``.

    Without an explicit ``heldout`` set a stratified ``val_fraction`` of
    ``utterances`` is held out. Final parameters are rounded to float32 values
    so that a checkpoint round-trip reproduces them exactly.
    """
    from .metrics import eer  # metrics depends on model

    config = config or ModelConfig()
    hyper = hyper or TrainHyper()
    if {u.target for u in utterances} != {0, 1}:
        raise DataError("training data must contain both bona fide and spoof utterances")
    if heldout is None and hyper.val_fraction > 0:
        utterances, heldout = _split_heldout(utterances, hyper.val_fraction, seed)
    utterances = sorted(utterances, key=lambda u: u.id)
    X = np.stack([u.samples for u in utterances])
    y = np.array([u.target for u in utterances])

    params = init_params(config, seed)
    names = params.names()
    m = {k: np.zeros_like(v) for k, v in params.tensors.items()}
    v2 = {k: np.zeros_like(v) for k, v in params.tensors.items()}
    tensors = {k: v.copy() for k, v in params.tensors.items()}
    log = TrainLog()
    rng = rng_for(seed, "shuffle")
    step = 0
    for epoch in range(hyper.epochs):
        order = rng.permutation(len(X))
        total, count = 0.0, 0
        for i in range(0, len(order), hyper.batch_size):
            idx = order[i:i + hyper.batch_size]
            cur = ModelParams(config, tensors)
            logits, cache = _forward(cur, X[idx])
            loss, dl = cross_entropy(logits, y[idx])
            if step == 0:
                log.first_batch_loss = loss
            grads = _backward(cur, cache, dl)
            step += 1
            bc1 = 1 - hyper.beta1 ** step
            bc2 = 1 - hyper.beta2 ** step
            for k in names:
                gk = grads[k]
                m[k] = hyper.beta1 * m[k] + (1 - hyper.beta1) * gk
                v2[k] = hyper.beta2 * v2[k] + (1 - hyper.beta2) * gk * gk
                tensors[k] = tensors[k] - hyper.lr * (m[k] / bc1) / (np.sqrt(v2[k] / bc2) + hyper.adam_eps)
            total += loss * len(idx)
            count += len(idx)
        log.losses.append(total / count)

    params = ModelParams(config, {k: v.astype(np.float32).astype(np.float64) for k, v in tensors.items()})
    if heldout:
        heldout = sorted(heldout, key=lambda u: u.id)
        scores = predict_proba(params, np.stack([u.samples for u in heldout]))[:, 1]
        labels = [u.target for u in heldout]
        log.heldout_ids = [u.id for u in heldout]
        log.heldout_scores = scores.tolist()
        log.heldout_labels = labels
        if len(set(labels)) == 2:
            log.heldout_eer = eer(scores, labels).eer
    return params, log


# -- gradient verification --------------------------------------------------------------

def finite_diff_check(config: ModelConfig | None = None, seed: int = 0, eps: float = 1e-4,
                      T: int = 64, dtype=np.float64, cls: int | None = None,
                      score: str = "logit", detail: bool = False):
    """Compare every analytic gradient against central differences.

    Covers all parameters, the input samples, the last conv feature map and
    every attention map. Per tensor the error is ``max|analytic - numeric|``
    divided by the larger of the two max magnitudes; the worst tensor wins.
    Use ``eps`` around 1e-2 for float32.
    """
    config = config or MICRO_CONFIG
    rng = rng_for(seed, "fdcheck")
    params = init_params(config, seed)
    # non-trivial norms and biases so every path is exercised
    params = ModelParams(config, {
        k: (v + 0.1 * rng.standard_normal(v.shape)).astype(dtype) for k, v in params.tensors.items()
    })
    x = rng.uniform(-1, 1, (1, T)).astype(dtype)
    cls = int(rng.integers(2)) if cls is None else cls

    def score_of(p, xx, perturb=None):
        logits, _ = _forward(p, xx, perturb)
        if score == "logit":
            return float(logits[0, cls])
        return float(softmax(logits)[0, cls])

    logits, cache = _forward(params, x)
    g = _backward(params, cache, _score_dlogits(logits, cls, score))

    def numeric(f, shape):
        out = np.zeros(shape)
        flat = out.reshape(-1)
        for j in range(flat.size):
            delta = np.zeros(shape, dtype=dtype)
            delta.reshape(-1)[j] = eps
            flat[j] = (f(delta) - f(-delta)) / (2 * eps)
        return out

    pairs = {}
    for name in params.names():
        base = params.tensors[name]
        pairs[name] = g[name], numeric(lambda d: score_of(params.replace(**{name: base + d}), x), base.shape)
    pairs["input"] = g["input"], numeric(lambda d: score_of(params, x + d), x.shape)
    pairs["feat"] = g["feat"], numeric(lambda d: score_of(params, x, {"feat": d}), g["feat"].shape)
    for l, ga in enumerate(g["attn"]):
        pairs[f"attn{l}"] = ga, numeric(lambda d: score_of(params, x, {f"attn{l}": d}), ga.shape)

    # Tensors whose true gradient is ~0 (e.g. key biases, which softmax ignores)
    # are judged against a floor tied to the network-wide gradient scale.
    scale = max(np.max(np.abs(a)) for a, _ in pairs.values())
    floor = np.finfo(dtype).eps ** (1 / 3) * scale
    errors = {
        k: float(np.max(np.abs(a - n)) / max(np.max(np.abs(a)), np.max(np.abs(n)), floor))
        for k, (a, n) in pairs.items()
    }
    worst = max(errors.values())
    return (worst, errors) if detail else worst


# -- checkpoints ------------------------------------------------------------------------

CKPT_MAGIC = b"RLENSCKP"
CKPT_VERSION = 1


def save_checkpoint(params: ModelParams, path) -> None:
    """Binary layout: magic, u32 version, u32 header size, JSON header, f32 LE tensors."""
    names = params.names()
    header = {
        "config": params.config.to_dict(),
        "tensors": [{"name": k, "shape": list(params[k].shape)} for k in names],
    }
    hb = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<II", CKPT_VERSION, len(hb)))
        f.write(hb)
        for k in names:
            f.write(np.ascontiguousarray(params[k], dtype="<f4").tobytes())


def load_checkpoint(path) -> ModelParams:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file")
    if len(raw) < 16:
        raise DataError(f"{path}: truncated header")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != CKPT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[16:16 + hlen])
        config = ModelConfig.from_dict(header["config"])
    except (ValueError, KeyError, TypeError) as e:
        raise DataError(f"{path}: malformed header ({e})") from None
    off = 16 + hlen
    tensors = {}
    for t in header["tensors"]:
        n = math.prod(t["shape"])
        if off + 4 * n > len(raw):
            raise DataError(f"{path}: missing tensor data for {t['name']}")
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=off).astype(np.float64)
        tensors[t["name"]] = arr.reshape(t["shape"])
        off += 4 * n
    if off != len(raw):
        raise DataError(f"{path}: trailing or missing tensor data")
    expected = param_shapes(config)
    if {k: tuple(v.shape) for k, v in tensors.items()} != expected:
        raise DataError(f"{path}: tensor shapes do not match the stored config")
    return ModelParams(config, tensors)
