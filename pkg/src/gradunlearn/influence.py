"""Influence scores: activation/gradient cosine and inverse-HVP based scores."""

from __future__ import annotations

import csv
import hashlib
import io
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Sequence

import numpy as np

from .data import Dataset
from .gradstore import GradientStore
from .model import ModelParams, flatten, forward, hvp, mean_grad, sequence_grad


class InfluenceError(ValueError):
    pass


def cosine_influence(activation, grad) -> float:
    """Cosine between an activation vector and a gradient vector."""
    a = np.asarray(activation, dtype=np.float64).ravel()
    g = np.asarray(grad, dtype=np.float64).ravel()
    if a.shape != g.shape:
        raise InfluenceError(f"length mismatch: activation {a.size} vs gradient {g.size}")
    if not a.any() or not g.any():
        raise InfluenceError("influence is undefined for a zero vector")
    # rescale first so tiny or huge entries do not under/overflow when squared
    a, g = a / np.abs(a).max(), g / np.abs(g).max()
    na, ng = np.linalg.norm(a), np.linalg.norm(g)
    return float(np.clip(a @ g / (na * ng), -1.0, 1.0))


def feature_projection(params: ModelParams, layer: str, grad_flat: np.ndarray) -> np.ndarray:
    """Collapse a layer's parameter gradient onto its residual-stream axis.

    Each tensor is summed over every axis except the one of width
    ``embed_dim`` that reads from or writes to the residual stream. For the
    embedding layer this is the sum over positions of the gradient with
    respect to the input hidden states.
    """
    D = params.config.embed_dim
    out = np.zeros(D)
    offset = 0
    for spec in params.specs[layer]:
        t = grad_flat[offset:offset + spec.size].reshape(spec.shape)
        offset += spec.size
        if spec.feature_axis is None:
            continue
        other = tuple(ax for ax in range(t.ndim) if ax != spec.feature_axis)
        out += t.sum(axis=other) if other else t
    return out


def mean_activation(params: ModelParams, token_ids: Sequence[int], layer: str) -> np.ndarray:
    return forward(params, list(token_ids)[:-1]).activations[layer].mean(axis=0)


def datapoint_cosine(params: ModelParams, token_ids, store: GradientStore, dp_id: str,
                     layer: str = "embedding") -> float:
    """Cosine influence of a datapoint under the current parameters."""
    g = store.entries.get((dp_id, layer))
    if g is None:
        raise InfluenceError(f"no stored {layer!r} gradient for {dp_id!r}")
    return cosine_influence(mean_activation(params, token_ids, layer),
                            feature_projection(params, layer, g))


# --------------------------------------------------------------------------
# inverse Hessian-vector products


@dataclass(frozen=True)
class IhvpConfig:
    damping: float = 0.01
    scale: float = 10.0
    iterations: int = 100
    epsilon: float = 1e-8
    recurrence: str = "paper"
    hvp_eps: Optional[float] = None

    def __post_init__(self):
        if not 0.0 <= self.damping < 1.0:
            raise InfluenceError("damping must be in [0, 1)")
        if not self.scale > 0:
            raise InfluenceError("scale must be > 0")
        if not isinstance(self.iterations, int) or self.iterations < 1:
            raise InfluenceError("iterations must be a positive integer")
        if not self.epsilon > 0:
            raise InfluenceError("epsilon must be > 0")
        if self.recurrence not in ("paper", "standard"):
            raise InfluenceError(f"unknown recurrence {self.recurrence!r}")


def lissa(hvp_fn: Callable[[np.ndarray], np.ndarray], v: np.ndarray, config: IhvpConfig,
          callback: Optional[Callable[[int, np.ndarray], None]] = None) -> np.ndarray:
    """Iterative inverse-HVP estimate starting from ``h_0 = v``.

    ``paper``:    h <- normalise(v + (1 - damping) * H h / scale)
    ``standard``: h <- v + (1 - damping) * h - H h / scale, returned as h / scale
    """
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise InfluenceError("test gradient has non-finite entries")
    if not np.any(v):
        raise InfluenceError("test gradient is zero")
    lam, alpha = config.damping, config.scale
    h = v.copy()
    for i in range(1, config.iterations + 1):
        hv = hvp_fn(h)
        if config.recurrence == "paper":
            h = v + (1.0 - lam) * hv / alpha
            h = h / (np.linalg.norm(h) + config.epsilon)
        else:
            h = v + (1.0 - lam) * h - hv / alpha
        if not np.all(np.isfinite(h)):
            raise InfluenceError(f"non-finite IHVP iterate at step {i}; scale may be too small")
        if callback is not None:
            callback(i, h)
    return h if config.recurrence == "paper" else h / alpha


def eval_gradient(params: ModelParams, sequences) -> np.ndarray:
    """Flat gradient of the mean loss over ``sequences``."""
    return mean_grad(params, list(sequences))[1]


def lissa_ihvp(params: ModelParams, sequences, v: np.ndarray, config: IhvpConfig = IhvpConfig(),
               callback=None) -> np.ndarray:
    sequences = list(sequences)
    return lissa(lambda x: hvp(params, sequences, x, config.hvp_eps), v, config, callback)


# --------------------------------------------------------------------------
# reports


def snapshot_id(params: ModelParams) -> str:
    h = hashlib.sha256()
    for name, arr in params.layers.items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()[:16]


@dataclass
class InfluenceReport:
    method: str
    scores: Dict[str, float]
    iteration: int = 0
    snapshot: str = ""

    def __post_init__(self):
        if self.method not in ("cosine", "hvp"):
            raise InfluenceError(f"unknown influence method {self.method!r}")
        bad = [k for k, v in self.scores.items() if not np.isfinite(v)]
        if bad:
            raise InfluenceError(f"non-finite influence scores for {bad}")

    def values(self, order: Optional[Sequence[str]] = None) -> np.ndarray:
        keys = list(order) if order is not None else list(self.scores)
        return np.array([self.scores[k] for k in keys])

    def to_csv(self, header: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if header:
            w.writerow(["dp_id", "method", "score", "iteration"])
        for dp_id, score in self.scores.items():
            w.writerow([dp_id, self.method, repr(float(score)), self.iteration])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "InfluenceReport":
        rows = list(csv.DictReader(io.StringIO(text)))
        if not rows:
            raise InfluenceError("empty influence report")
        return cls(rows[0]["method"], {r["dp_id"]: float(r["score"]) for r in rows},
                   int(rows[0]["iteration"]))


def per_datapoint_grads(params: ModelParams, dataset: Dataset) -> Dict[str, np.ndarray]:
    return {it.dp_id: flatten(sequence_grad(params, it.token_ids)[1]) for it in dataset}


def hvp_influence(params: ModelParams, trainset: Dataset, ihvp: np.ndarray,
                  iteration: int = 0) -> InfluenceReport:
    """Per-datapoint score ``-(grad L(z_i) . ihvp)`` for every training point."""
    ihvp = np.asarray(ihvp, dtype=np.float64)
    if ihvp.size != params.num_params:
        raise InfluenceError(f"ihvp has length {ihvp.size}, expected {params.num_params}")
    scores = {dp: -float(g @ ihvp) for dp, g in per_datapoint_grads(params, trainset).items()}
    return InfluenceReport("hvp", scores, iteration, snapshot_id(params))


def cosine_report(params: ModelParams, dataset: Dataset, store: GradientStore,
                  layer: str = "embedding", iteration: int = 0) -> InfluenceReport:
    scores = {it.dp_id: datapoint_cosine(params, it.token_ids, store, it.dp_id, layer)
              for it in dataset}
    return InfluenceReport("cosine", scores, iteration, snapshot_id(params))
