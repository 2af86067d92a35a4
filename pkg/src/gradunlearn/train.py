"""Batch-size-1 Adam training with per-datapoint gradient and activation recording."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, List, Mapping, Optional

import numpy as np

from .data import Dataset
from .gradstore import GradientStore, atomic_write
from .model import GradientSet, ModelError, ModelParams, forward, sequence_grad

logger = logging.getLogger(__name__)

EPOCH_PRESETS = (5, 10, 15, 20)


class TrainError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-5
    epochs: int = 15
    batch_size: int = 1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    record_scopes: FrozenSet[str] = frozenset({"first_epoch", "all_epochs"})
    # per-layer learning-rate multipliers, e.g. {"embedding": 15.0}
    layer_lr_scale: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise TrainError("learning_rate must be > 0")
        if self.batch_size != 1:
            raise TrainError("only batch_size=1 is supported")
        if not isinstance(self.epochs, int) or self.epochs < 1:
            raise TrainError("epochs must be a positive integer")
        object.__setattr__(self, "record_scopes", frozenset(self.record_scopes))
        unknown = self.record_scopes - {"first_epoch", "all_epochs"}
        if unknown:
            raise TrainError(f"unknown record scopes {sorted(unknown)}")
        object.__setattr__(self, "layer_lr_scale", dict(self.layer_lr_scale))
        if any(not v > 0 for v in self.layer_lr_scale.values()):
            raise TrainError("layer_lr_scale values must be > 0")


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: ModelParams, grads: GradientSet, state: Optional[AdamState], lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              lr_scale: Optional[Mapping[str, float]] = None):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``.

    ``lr_scale`` multiplies the step size of the named layers.
    """
    if state is None:
        state = AdamState()
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainError(f"non-finite gradient in layer {name!r}")
    t = state.t + 1
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    new_m, new_v, new_layers = {}, {}, {}
    for name, theta in params.layers.items():
        g = grads[name]
        m = beta1 * state.m.get(name, 0.0) + (1.0 - beta1) * g
        v = beta2 * state.v.get(name, 0.0) + (1.0 - beta2) * (g * g)
        new_m[name], new_v[name] = m, v
        step = lr * (lr_scale.get(name, 1.0) if lr_scale else 1.0)
        new_layers[name] = theta - step * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return ModelParams(params.config, new_layers, params.specs), AdamState(new_m, new_v, t)


@dataclass
class ActivationStore:
    """Mean-pooled per-layer activations of each datapoint (final epoch)."""

    vectors: Dict[str, Dict[str, np.ndarray]] = field(default_factory=dict)

    def record(self, dp_id: str, activations: Dict[str, np.ndarray]):
        self.vectors[dp_id] = {k: a.mean(axis=0) for k, a in activations.items()}

    def get(self, dp_id: str, layer: str) -> np.ndarray:
        return self.vectors[dp_id][layer]

    def to_json(self) -> str:
        payload = {dp: {k: [float(x) for x in v] for k, v in layers.items()}
                   for dp, layers in self.vectors.items()}
        return json.dumps(payload, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "ActivationStore":
        raw = json.loads(text)
        return cls({dp: {k: np.array(v, dtype=np.float64) for k, v in layers.items()}
                    for dp, layers in raw.items()})

    def save(self, path):
        atomic_write(path, self.to_json().encode("utf-8"))

    @classmethod
    def load(cls, path) -> "ActivationStore":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


@dataclass
class TrainResult:
    params: ModelParams
    stores: Dict[str, GradientStore]
    activations: ActivationStore
    loss_curve: List[float]


def train(params: ModelParams, dataset: Dataset, config: TrainConfig) -> TrainResult:
    """Fine-tune on ``dataset`` in file order, one datapoint per step.

    Raw loss gradients are summed per (datapoint, layer) into an
    ``all_epochs`` store every epoch and into a ``first_epoch`` store during
    epoch 1 only; the latter is sealed once epoch 1 ends.
    """
    if len(dataset) == 0:
        raise TrainError("dataset is empty")
    ctx = params.config.context_len
    for item in dataset:
        if len(item.token_ids) - 1 > ctx:
            raise TrainError(
                f"{item.dp_id}: {len(item.token_ids) - 1} input tokens exceed context_len={ctx}"
            )
    stores = {scope: GradientStore.for_params(params, scope)
              for scope in ("first_epoch", "all_epochs") if scope in config.record_scopes}
    activations = ActivationStore()
    state = None
    curve = []
    for epoch in range(1, config.epochs + 1):
        losses = []
        for item in dataset:
            try:
                L, grads = sequence_grad(params, item.token_ids)
            except ModelError as exc:
                raise TrainError(f"{item.dp_id}: {exc}") from exc
            losses.append(L)
            for store in stores.values():
                if store.scope == "all_epochs" or epoch == 1:
                    store.accumulate_set(item.dp_id, grads)
            if epoch == config.epochs:
                trace = forward(params, item.token_ids[:-1])
                activations.record(item.dp_id, trace.activations)
            params, state = adam_step(params, grads, state, config.learning_rate,
                                      config.adam_beta1, config.adam_beta2, config.adam_eps,
                                      config.layer_lr_scale)
        if epoch == 1 and "first_epoch" in stores:
            stores["first_epoch"].seal()
        curve.append(float(np.mean(losses)))
        logger.info("epoch %d mean loss %.6f", epoch, curve[-1])
    return TrainResult(params, stores, activations, curve)


def loss_curve_csv(curve: List[float]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "mean_loss"])
    for i, value in enumerate(curve, start=1):
        w.writerow([i, repr(float(value))])
    return buf.getvalue()
