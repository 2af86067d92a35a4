"""Tiny decoder-only transformer in numpy with a hand-written backward pass.

Parameters are grouped into named layers:

* ``embedding`` -- token and learned positional embeddings
* ``block.k``   -- one pre-norm transformer block (k = 1..num_blocks)
* ``head``      -- final layer norm and output projection

Each layer is stored as one contiguous float64 vector; the individual
tensors (``wte``, ``attn.w_qkv``, ...) are reshaped views into it. That keeps
flattening, gradient storage and scoped updates trivial.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

LN_EPS = 1e-5
INIT_STD = 0.02

GradientSet = Dict[str, np.ndarray]


class ModelError(ValueError):
    """Invalid model configuration or model input."""


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    context_len: int = 64
    embed_dim: int = 64
    num_blocks: int = 4
    num_heads: int = 4
    seed: int = 0
    # output projection shares the token embedding matrix (GPT-2 style)
    tied_head: bool = False

    def __post_init__(self):
        for name in ("vocab_size", "context_len", "embed_dim", "num_blocks", "num_heads"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ModelError(f"{name} must be a positive integer, got {value!r}")
        if self.vocab_size < 2:
            raise ModelError("vocab_size must be >= 2")
        if self.context_len < 2:
            raise ModelError("context_len must be >= 2")
        if self.embed_dim % self.num_heads:
            raise ModelError(
                f"embed_dim={self.embed_dim} is not divisible by num_heads={self.num_heads}"
            )
        if not 0 <= self.seed < 2**64:
            raise ModelError("seed must fit in an unsigned 64-bit integer")

    @property
    def layer_names(self) -> List[str]:
        return ["embedding"] + [f"block.{k}" for k in range(1, self.num_blocks + 1)] + ["head"]


@dataclass(frozen=True)
class TensorSpec:
    name: str
    shape: Tuple[int, ...]
    init: str  # "normal" | "zeros" | "ones"
    # axis living in the residual stream (width embed_dim); None for e.g. qkv biases
    feature_axis: Optional[int]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


def layer_specs(config: ModelConfig) -> Dict[str, List[TensorSpec]]:
    """Ordered tensor layout of every layer."""
    V, C, D = config.vocab_size, config.context_len, config.embed_dim
    specs: Dict[str, List[TensorSpec]] = {
        "embedding": [
            TensorSpec("wte", (V, D), "normal", 1),
            TensorSpec("wpe", (C, D), "normal", 1),
        ]
    }
    for k in range(1, config.num_blocks + 1):
        specs[f"block.{k}"] = [
            TensorSpec("ln1.g", (D,), "ones", 0),
            TensorSpec("ln1.b", (D,), "zeros", 0),
            TensorSpec("attn.w_qkv", (D, 3 * D), "normal", 0),
            TensorSpec("attn.b_qkv", (3 * D,), "zeros", None),
            TensorSpec("attn.w_out", (D, D), "normal", 1),
            TensorSpec("attn.b_out", (D,), "zeros", 0),
            TensorSpec("ln2.g", (D,), "ones", 0),
            TensorSpec("ln2.b", (D,), "zeros", 0),
            TensorSpec("mlp.w_in", (D, 4 * D), "normal", 0),
            TensorSpec("mlp.b_in", (4 * D,), "zeros", None),
            TensorSpec("mlp.w_out", (4 * D, D), "normal", 1),
            TensorSpec("mlp.b_out", (D,), "zeros", 0),
        ]
    specs["head"] = [
        TensorSpec("lnf.g", (D,), "ones", 0),
        TensorSpec("lnf.b", (D,), "zeros", 0),
    ]
    if not config.tied_head:
        specs["head"].append(TensorSpec("w_out", (D, V), "normal", 0))
    return specs


def views(flat: np.ndarray, specs: Sequence[TensorSpec]) -> Dict[str, np.ndarray]:
    """Named reshaped views into one layer's flat vector."""
    out = {}
    offset = 0
    for spec in specs:
        out[spec.name] = flat[offset:offset + spec.size].reshape(spec.shape)
        offset += spec.size
    return out


@dataclass
class ModelParams:
    """Named-layer parameter vectors of one model.

    Treat instances as immutable: training and unlearning build new ones.
    """

    config: ModelConfig
    layers: Dict[str, np.ndarray]
    specs: Dict[str, List[TensorSpec]] = field(repr=False, default=None)

    def __post_init__(self):
        if self.specs is None:
            self.specs = layer_specs(self.config)
        if list(self.layers) != list(self.specs):
            raise ModelError(f"layer names {list(self.layers)} do not match {list(self.specs)}")
        for name, flat in self.layers.items():
            expected = sum(s.size for s in self.specs[name])
            if flat.shape != (expected,):
                raise ModelError(f"layer {name!r} has shape {flat.shape}, expected ({expected},)")

    @property
    def layer_names(self) -> List[str]:
        return list(self.layers)

    @property
    def num_params(self) -> int:
        return sum(v.size for v in self.layers.values())

    def tensors(self, layer: str) -> Dict[str, np.ndarray]:
        return views(self.layers[layer], self.specs[layer])

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.layers.items()}, self.specs)

    def replace(self, layers: Dict[str, np.ndarray]) -> "ModelParams":
        """New params with some layers swapped out; the rest are shared."""
        merged = dict(self.layers)
        merged.update(layers)
        return ModelParams(self.config, merged, self.specs)

    def zeros_like(self) -> GradientSet:
        return {k: np.zeros_like(v) for k, v in self.layers.items()}


def init_model(config: ModelConfig) -> ModelParams:
    """Deterministic initialisation from ``config.seed``.

    Weights ~ N(0, 0.02), biases zero, norm gains one. Uses the counter-based
    Philox generator so that the stream only depends on the seed.
    """
    rng = np.random.Generator(np.random.Philox(config.seed))
    specs = layer_specs(config)
    layers = {}
    for name, tensor_specs in specs.items():
        chunks = []
        for spec in tensor_specs:
            if spec.init == "normal":
                chunks.append(rng.normal(0.0, INIT_STD, size=spec.size))
            elif spec.init == "ones":
                chunks.append(np.ones(spec.size))
            else:
                chunks.append(np.zeros(spec.size))
        layers[name] = np.concatenate(chunks).astype(np.float64)
    return ModelParams(config, layers, specs)


# --------------------------------------------------------------------------
# forward / backward


@dataclass
class ForwardTrace:
    logits: np.ndarray  # (T, V)
    activations: Dict[str, np.ndarray]  # layer -> (T, D)
    cache: Optional[dict] = field(default=None, repr=False)

    def probs(self) -> np.ndarray:
        return softmax(self.logits)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


_GELU_C = np.sqrt(2.0 / np.pi)


def _gelu(u):
    t = np.tanh(_GELU_C * (u + 0.044715 * u**3))
    return 0.5 * u * (1.0 + t), t


def _gelu_grad(u, t):
    dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * u * u)
    return 0.5 * (1.0 + t) + 0.5 * u * dt


def _layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def _layer_norm_backward(dy, g, cache):
    xhat, inv = cache
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, (dy * xhat).sum(axis=0), dy.sum(axis=0)


def check_tokens(config: ModelConfig, tokens) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or tokens.size == 0:
        raise ModelError("token sequence must be a non-empty 1-D sequence")
    if tokens.size > config.context_len:
        raise ModelError(
            f"sequence of {tokens.size} tokens exceeds context_len={config.context_len}"
        )
    if tokens.min() < 0 or tokens.max() >= config.vocab_size:
        raise ModelError(f"token id out of range [0, {config.vocab_size})")
    return tokens


def forward(params: ModelParams, tokens, keep_cache: bool = False) -> ForwardTrace:
    """Run the model on one sequence and capture per-layer activations."""
    cfg = params.config
    tokens = check_tokens(cfg, tokens)
    T, D, H = tokens.size, cfg.embed_dim, cfg.num_heads
    hd = D // H
    cache = {"tokens": tokens, "blocks": []} if keep_cache else None
    acts = {}

    emb = params.tensors("embedding")
    x = emb["wte"][tokens] + emb["wpe"][:T]
    acts["embedding"] = x

    mask = np.triu(np.ones((T, T), dtype=bool), k=1)
    scale = 1.0 / np.sqrt(hd)
    for k in range(1, cfg.num_blocks + 1):
        p = params.tensors(f"block.{k}")
        x_in = x
        h1, ln1 = _layer_norm(x, p["ln1.g"], p["ln1.b"])
        qkv = h1 @ p["attn.w_qkv"] + p["attn.b_qkv"]
        q, kk, v = (qkv[:, i * D:(i + 1) * D].reshape(T, H, hd).transpose(1, 0, 2) for i in range(3))
        scores = (q @ kk.transpose(0, 2, 1)) * scale
        scores[:, mask] = -np.inf
        att = softmax(scores)
        o = (att @ v).transpose(1, 0, 2).reshape(T, D)
        x = x + o @ p["attn.w_out"] + p["attn.b_out"]
        x_mid = x
        h2, ln2 = _layer_norm(x, p["ln2.g"], p["ln2.b"])
        u = h2 @ p["mlp.w_in"] + p["mlp.b_in"]
        gu, t = _gelu(u)
        x = x + gu @ p["mlp.w_out"] + p["mlp.b_out"]
        acts[f"block.{k}"] = x
        if keep_cache:
            cache["blocks"].append(dict(x_in=x_in, h1=h1, ln1=ln1, q=q, k=kk, v=v, att=att, o=o,
                                        x_mid=x_mid, h2=h2, ln2=ln2, u=u, gu=gu, t=t))

    hp = params.tensors("head")
    hf, lnf = _layer_norm(x, hp["lnf.g"], hp["lnf.b"])
    acts["head"] = hf
    logits = hf @ (emb["wte"].T if cfg.tied_head else hp["w_out"])
    if keep_cache:
        cache["x_final"] = x
        cache["lnf"] = lnf
    return ForwardTrace(logits=logits, activations=acts, cache=cache)


def _check_targets(trace: ForwardTrace, targets) -> np.ndarray:
    targets = np.asarray(targets, dtype=np.int64)
    if targets.ndim != 1 or targets.size != trace.logits.shape[0]:
        raise ModelError(
            f"targets length {targets.size} does not match {trace.logits.shape[0]} positions"
        )
    if targets.size == 0:
        raise ModelError("no predicted positions; loss is undefined")
    if targets.min() < 0 or targets.max() >= trace.logits.shape[1]:
        raise ModelError("target id out of range")
    return targets


def token_nll(trace: ForwardTrace, targets) -> np.ndarray:
    """Per-position negative log-likelihood of ``targets``."""
    targets = _check_targets(trace, targets)
    logp = log_softmax(trace.logits)
    return -logp[np.arange(targets.size), targets]


def loss(trace: ForwardTrace, targets) -> float:
    """Mean next-token cross-entropy. ``targets[t]`` is the token following input ``t``."""
    return float(token_nll(trace, targets).mean())


def backward(params: ModelParams, tokens, targets) -> Tuple[float, GradientSet]:
    """Loss and its gradient with respect to every layer."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if np.asarray(targets).size == 0:
        raise ModelError("no predicted positions; loss is undefined")
    trace = forward(params, tokens, keep_cache=True)
    targets = _check_targets(trace, targets)
    cfg = params.config
    T, D, H = tokens.size, cfg.embed_dim, cfg.num_heads
    hd = D // H
    cache = trace.cache
    grads = params.zeros_like()

    probs = softmax(trace.logits)
    L = float(-np.log(probs[np.arange(T), targets]).mean())
    dlogits = probs
    dlogits[np.arange(T), targets] -= 1.0
    dlogits /= T

    hp = params.tensors("head")
    gh = views(grads["head"], params.specs["head"])
    hf = trace.activations["head"]
    ge = views(grads["embedding"], params.specs["embedding"])
    if cfg.tied_head:
        ge["wte"][...] = dlogits.T @ hf
        dhf = dlogits @ params.tensors("embedding")["wte"]
    else:
        gh["w_out"][...] = hf.T @ dlogits
        dhf = dlogits @ hp["w_out"].T
    dx, gh["lnf.g"][...], gh["lnf.b"][...] = _layer_norm_backward(dhf, hp["lnf.g"], cache["lnf"])

    scale = 1.0 / np.sqrt(hd)
    for k in range(cfg.num_blocks, 0, -1):
        p = params.tensors(f"block.{k}")
        g = views(grads[f"block.{k}"], params.specs[f"block.{k}"])
        c = cache["blocks"][k - 1]
        # MLP branch
        g["mlp.b_out"][...] = dx.sum(axis=0)
        g["mlp.w_out"][...] = c["gu"].T @ dx
        du = (dx @ p["mlp.w_out"].T) * _gelu_grad(c["u"], c["t"])
        g["mlp.b_in"][...] = du.sum(axis=0)
        g["mlp.w_in"][...] = c["h2"].T @ du
        dh2 = du @ p["mlp.w_in"].T
        dln, g["ln2.g"][...], g["ln2.b"][...] = _layer_norm_backward(dh2, p["ln2.g"], c["ln2"])
        dx = dx + dln
        # attention branch
        g["attn.b_out"][...] = dx.sum(axis=0)
        g["attn.w_out"][...] = c["o"].T @ dx
        do = (dx @ p["attn.w_out"].T).reshape(T, H, hd).transpose(1, 0, 2)
        att = c["att"]
        datt = do @ c["v"].transpose(0, 2, 1)
        dv = att.transpose(0, 2, 1) @ do
        dscores = att * (datt - (datt * att).sum(axis=-1, keepdims=True)) * scale
        dq = dscores @ c["k"]
        dk = dscores.transpose(0, 2, 1) @ c["q"]
        dqkv = np.concatenate([a.transpose(1, 0, 2).reshape(T, D) for a in (dq, dk, dv)], axis=1)
        g["attn.b_qkv"][...] = dqkv.sum(axis=0)
        g["attn.w_qkv"][...] = c["h1"].T @ dqkv
        dh1 = dqkv @ p["attn.w_qkv"].T
        dln, g["ln1.g"][...], g["ln1.b"][...] = _layer_norm_backward(dh1, p["ln1.g"], c["ln1"])
        dx = dx + dln

    np.add.at(ge["wte"], cache["tokens"], dx)
    ge["wpe"][:T] = dx
    return L, grads


def sequence_grad(params: ModelParams, seq) -> Tuple[float, GradientSet]:
    """Next-token loss and gradient over a full framed sequence."""
    seq = np.asarray(seq, dtype=np.int64)
    return backward(params, seq[:-1], seq[1:])


def sequence_nll(params: ModelParams, seq) -> np.ndarray:
    seq = np.asarray(seq, dtype=np.int64)
    if seq.size < 2:
        raise ModelError("a sequence needs at least two tokens to predict anything")
    return token_nll(forward(params, seq[:-1]), seq[1:])


def mean_grad(params: ModelParams, sequences) -> Tuple[float, np.ndarray]:
    """Flat gradient of the mean per-sequence loss over ``sequences``."""
    total = None
    total_loss = 0.0
    for seq in sequences:
        L, g = sequence_grad(params, seq)
        f = flatten(g)
        total = f if total is None else total + f
        total_loss += L
    n = len(sequences)
    return total_loss / n, total / n


# --------------------------------------------------------------------------
# flat vectors and Hessian-vector products


def flatten(grads: GradientSet) -> np.ndarray:
    return np.concatenate([np.ravel(grads[name]) for name in grads])


def unflatten(flat: np.ndarray, like) -> GradientSet:
    """Inverse of :func:`flatten`. ``like`` is a ModelParams or a GradientSet template."""
    template = like.layers if isinstance(like, ModelParams) else like
    flat = np.asarray(flat, dtype=np.float64)
    sizes = [v.size for v in template.values()]
    if flat.ndim != 1 or flat.size != sum(sizes):
        raise ModelError(f"flat vector has length {flat.size}, expected {sum(sizes)}")
    out = {}
    offset = 0
    for (name, ref), size in zip(template.items(), sizes):
        out[name] = flat[offset:offset + size].reshape(ref.shape).copy()
        offset += size
    return out


def fd_hvp(grad_fn: Callable[[np.ndarray], np.ndarray], theta: np.ndarray, v: np.ndarray,
           eps: Optional[float] = None) -> np.ndarray:
    """Central-difference Hessian-vector product of a gradient function.

    The probe direction is normalised so that the step size is independent of
    ``|v|``; the result is rescaled by ``|v|`` afterwards.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ModelError("v must be a non-empty flat vector")
    if v.size != theta.size:
        raise ModelError(f"v has length {v.size}, expected {theta.size}")
    if not np.all(np.isfinite(v)):
        raise ModelError("v has non-finite entries")
    norm = np.linalg.norm(v)
    if norm == 0.0:
        return np.zeros_like(v)
    if eps is None:
        eps = 1e-3
    if eps <= 0:
        raise ModelError("eps must be positive")
    unit = v / norm
    g_plus = grad_fn(theta + eps * unit)
    g_minus = grad_fn(theta - eps * unit)
    return (g_plus - g_minus) * (norm / (2.0 * eps))


def hvp(params: ModelParams, sequences, v: np.ndarray, eps: Optional[float] = None) -> np.ndarray:
    """Hessian of the mean sequence loss over ``sequences`` applied to ``v``."""
    base = flatten(params.layers)

    def grad_fn(theta):
        return mean_grad(ModelParams(params.config, unflatten(theta, params), params.specs),
                         sequences)[1]

    return fd_hvp(grad_fn, base, v, eps)
