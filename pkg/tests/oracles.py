"""Independent reference implementations used only by the tests."""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np
from scipy import integrate


def torch_logits(params, tokens):
    """Same architecture written directly against torch.nn.functional, float64."""
    import torch
    import torch.nn.functional as F

    cfg = params.config
    D, H = cfg.embed_dim, cfg.num_heads
    t = {name: {k: torch.tensor(v) for k, v in params.tensors(name).items()}
         for name in params.layer_names}
    ids = torch.tensor(list(tokens))
    T = ids.numel()
    x = t["embedding"]["wte"][ids] + t["embedding"]["wpe"][:T]
    causal = torch.ones(T, T, dtype=torch.bool).tril()
    for k in range(1, cfg.num_blocks + 1):
        p = t[f"block.{k}"]
        h = F.layer_norm(x, (D,), p["ln1.g"], p["ln1.b"], eps=1e-5)
        q, kk, v = (h @ p["attn.w_qkv"] + p["attn.b_qkv"]).split(D, dim=-1)
        q, kk, v = (z.view(T, H, D // H).transpose(0, 1) for z in (q, kk, v))
        att = F.scaled_dot_product_attention(q, kk, v, attn_mask=causal)
        x = x + att.transpose(0, 1).reshape(T, D) @ p["attn.w_out"] + p["attn.b_out"]
        h = F.layer_norm(x, (D,), p["ln2.g"], p["ln2.b"], eps=1e-5)
        x = x + F.gelu(h @ p["mlp.w_in"] + p["mlp.b_in"], approximate="tanh") @ p["mlp.w_out"] \
            + p["mlp.b_out"]
    hp = t["head"]
    h = F.layer_norm(x, (D,), hp["lnf.g"], hp["lnf.b"], eps=1e-5)
    w_out = t["embedding"]["wte"].T if cfg.tied_head else hp["w_out"]
    return (h @ w_out).numpy()


def gestalt_matches(a: str, b: str) -> int:
    """Ratcliff/Obershelp matched-character count by exhaustive block search.

    Takes the longest common substring (earliest in ``a``, then in ``b``) and
    recurses on both sides.
    """

    @lru_cache(maxsize=None)
    def rec(a: str, b: str) -> int:
        best = (0, 0, 0)
        for i in range(len(a)):
            for j in range(len(b)):
                k = 0
                while i + k < len(a) and j + k < len(b) and a[i + k] == b[j + k]:
                    k += 1
                if k > best[2]:
                    best = (i, j, k)
        i, j, k = best
        if k == 0:
            return 0
        return k + rec(a[:i], b[:j]) + rec(a[i + k:], b[j + k:])

    return rec(a, b)


def gestalt_ratio(a: str, b: str) -> float:
    total = len(a) + len(b)
    return 1.0 if total == 0 else 2.0 * gestalt_matches(a, b) / total


def t_pdf(x: float, df: float) -> float:
    c = math.exp(math.lgamma((df + 1) / 2) - math.lgamma(df / 2)) / math.sqrt(df * math.pi)
    return c * (1 + x * x / df) ** (-(df + 1) / 2)


def t_cdf_quad(t: float, df: float) -> float:
    """CDF by adaptive quadrature of the density from 0 to |t|."""
    area, _ = integrate.quad(t_pdf, 0.0, abs(t), args=(df,), epsabs=1e-13, epsrel=1e-13, limit=200)
    return 0.5 + area if t >= 0 else 0.5 - area


def lcs_brute(a, b) -> int:
    """LCS length by memoised recursion."""

    @lru_cache(maxsize=None)
    def rec(i, j):
        if i == len(a) or j == len(b):
            return 0
        if a[i] == b[j]:
            return 1 + rec(i + 1, j + 1)
        return max(rec(i + 1, j), rec(i, j + 1))

    return rec(0, 0)


def central_difference(f, x: np.ndarray, index: int, eps: float) -> float:
    xp, xm = x.copy(), x.copy()
    xp[index] += eps
    xm[index] -= eps
    return (f(xp) - f(xm)) / (2 * eps)
