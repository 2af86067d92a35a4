"""Gradient-ascent unlearning from stored per-datapoint gradients.

Two drivers share one loop shape:

* :func:`unlearn_iterative` resolves the target by exact text lookup and
  keeps applying its stored gradient.
* :func:`unlearn_fuzzy` generates from a prompt, maps the output back to the
  closest training sentence and applies that sentence's gradient.

Both record influence every iteration and perplexity/ROUGE every
``eval_every`` iterations.
"""

from __future__ import annotations

import csv
import difflib
import io
import json
import logging
from dataclasses import dataclass, field
from typing import List, Mapping, Optional, Sequence

import numpy as np

from .data import Dataset, DataPoint
from .evaluation import complete, dataset_rouge, perplexity, prompt_ids
from .gradstore import GradientStore, LayerScope
from .influence import datapoint_cosine
from .model import ModelParams

logger = logging.getLogger(__name__)


class UnlearnError(ValueError):
    pass


@dataclass(frozen=True)
class UnlearnConfig:
    eta: float = 2e-5
    max_iters: int = 200
    layer_scope: LayerScope = LayerScope.whole_model()
    epoch_scope: str = "all_epochs"
    eval_every: int = 10
    match_cutoff: float = 0.6
    smoothing_window: int = 5
    max_new_tokens: int = 24
    prompt_words: int = 2
    influence_layer: str = "embedding"
    # end the run at the first iteration where verify_unlearned holds
    stop_on_verify: bool = False

    def __post_init__(self):
        if not self.eta >= 0:
            raise UnlearnError("eta must be >= 0")
        if not isinstance(self.max_iters, int) or self.max_iters < 1:
            raise UnlearnError("max_iters must be a positive integer")
        if not isinstance(self.eval_every, int) or self.eval_every < 1:
            raise UnlearnError("eval_every must be a positive integer")
        if not 0.0 <= self.match_cutoff <= 1.0:
            raise UnlearnError(f"match_cutoff must lie in [0, 1], got {self.match_cutoff}")
        if self.epoch_scope not in ("first_epoch", "all_epochs"):
            raise UnlearnError(f"unknown epoch scope {self.epoch_scope!r}")
        if self.smoothing_window < 1:
            raise UnlearnError("smoothing_window must be >= 1")
        if isinstance(self.layer_scope, str):
            object.__setattr__(self, "layer_scope", LayerScope.parse(self.layer_scope))


@dataclass
class SeriesRow:
    iteration: int
    influence: float
    perplexity: float
    rouge1: float
    rouge2: float
    rougeL: float


SERIES_COLUMNS = ["iteration", "influence", "perplexity", "rouge1", "rouge2", "rougeL"]


@dataclass
class UnlearnRun:
    target: str
    mode: str
    config: UnlearnConfig
    series: List[SeriesRow] = field(default_factory=list)
    influence_trace: List[float] = field(default_factory=list)
    smoothed: List[float] = field(default_factory=list)
    stop_iteration: int = 0
    inflection_iteration: Optional[int] = None
    verified: bool = False
    first_verified_iteration: Optional[int] = None
    status: str = "completed"
    matches: List[Optional[str]] = field(default_factory=list)

    def series_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SERIES_COLUMNS)
        for row in self.series:
            w.writerow([row.iteration] + [repr(float(getattr(row, c))) for c in SERIES_COLUMNS[1:]])
        return buf.getvalue()

    def trace_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "influence", "smoothed"])
        smoothed = self.smoothed or [""] * len(self.influence_trace)
        for i, (v, s) in enumerate(zip(self.influence_trace, smoothed)):
            w.writerow([i, repr(float(v)), s if s == "" else repr(float(s))])
        return buf.getvalue()

    def metadata(self) -> dict:
        cfg = self.config
        return {
            "target": self.target,
            "mode": self.mode,
            "layer_scope": str(cfg.layer_scope),
            "epoch_scope": cfg.epoch_scope,
            "eta": cfg.eta,
            "max_iters": cfg.max_iters,
            "eval_every": cfg.eval_every,
            "match_cutoff": cfg.match_cutoff,
            "stop_iteration": self.stop_iteration,
            "inflection_iteration": self.inflection_iteration,
            "verified": self.verified,
            "first_verified_iteration": self.first_verified_iteration,
            "status": self.status,
        }

    def metadata_json(self, extra: Optional[Mapping] = None) -> str:
        meta = self.metadata()
        if extra:
            meta.update(extra)
        return json.dumps(meta, indent=2, sort_keys=True) + "\n"


# --------------------------------------------------------------------------
# primitives


def apply_ascent(params: ModelParams, grads: Mapping[str, np.ndarray], eta: float,
                 layer_scope: LayerScope) -> ModelParams:
    """``theta + eta * g`` on the scope's layers; every other layer is shared as is."""
    selected = [n for n in layer_scope.select(params.layer_names) if n in grads]
    if not selected:
        raise UnlearnError(f"layer scope {layer_scope} has no stored gradients to apply")
    updated = {}
    for name in selected:
        g = np.asarray(grads[name])
        if g.shape != params.layers[name].shape:
            raise UnlearnError(
                f"gradient for {name!r} has shape {g.shape}, expected {params.layers[name].shape}"
            )
        updated[name] = params.layers[name] + eta * g
    return params.replace(updated)


def similarity(a: str, b: str) -> float:
    """Gestalt (Ratcliff/Obershelp) ratio 2M/T over raw characters."""
    return difflib.SequenceMatcher(None, a, b, autojunk=False).ratio()


def find_closest_match(dataset: Dataset, generated_text: str, cutoff: float = 0.6):
    """Best ``(dp_id, text, ratio)`` at or above ``cutoff``, or None.

    Ties go to the earlier datapoint.
    """
    if not 0.0 <= cutoff <= 1.0:
        raise UnlearnError(f"cutoff must lie in [0, 1], got {cutoff}")
    best = None
    for item in dataset:
        r = similarity(generated_text, item.text)
        if r >= cutoff and (best is None or r > best[2]):
            best = (item.dp_id, item.text, r)
    return best


def detect_inflection(series: Sequence[float], window: int = 5) -> int:
    """Index of the minimum of the centred moving average of ``series``.

    The window is truncated at both ends. Ties resolve to the earliest index.
    """
    x = np.asarray(series, dtype=np.float64)
    if window < 1:
        raise UnlearnError("window must be >= 1")
    if x.size < 2 * window:
        raise UnlearnError(f"series of length {x.size} is shorter than 2 * window = {2 * window}")
    return int(_first_min(smooth(x, window)))


def smooth(series: Sequence[float], window: int) -> np.ndarray:
    x = np.asarray(series, dtype=np.float64)
    half = (window - 1) // 2
    out = np.empty_like(x)
    for i in range(x.size):
        lo = i - half
        out[i] = x[max(0, lo):min(x.size, lo + window)].mean()
    return out


def _first_min(values: np.ndarray) -> int:
    m = values.min()
    return int(np.flatnonzero(values <= m + 1e-12 * max(1.0, abs(m)))[0])


def verify_unlearned(params: ModelParams, dataset: Dataset, target_dp: str, cutoff: float = 0.6,
                     prompt_words: int = 2, max_new: int = 24) -> bool:
    """True when a greedy completion of the target's opening words no longer
    resembles the target sentence (ratio below ``cutoff``)."""
    text = complete(params, dataset, prompt_ids(dataset, target_dp, prompt_words), max_new)
    return similarity(text, dataset.get(target_dp).text) < cutoff


# --------------------------------------------------------------------------
# drivers


class _Recorder:
    def __init__(self, run: UnlearnRun, dataset: Dataset, store: GradientStore):
        self.run = run
        self.dataset = dataset
        self.store = store
        self.cfg = run.config

    def influence(self, params, dp: DataPoint) -> float:
        return datapoint_cosine(params, dp.token_ids, self.store, dp.dp_id, self.cfg.influence_layer)

    def row(self, params, iteration: int, dp: DataPoint, influence: float):
        retained = self.dataset.without(dp.dp_id) if len(self.dataset) > 1 else self.dataset
        rouge = dataset_rouge(params, self.dataset, self.cfg.prompt_words, self.cfg.max_new_tokens)
        self.run.series.append(SeriesRow(iteration, influence, perplexity(params, retained),
                                         rouge["rouge1"], rouge["rouge2"], rouge["rougeL"]))
        if self.run.first_verified_iteration is None and verify_unlearned(
                params, self.dataset, dp.dp_id, self.cfg.match_cutoff, self.cfg.prompt_words,
                self.cfg.max_new_tokens):
            self.run.first_verified_iteration = iteration
        logger.info("iter %d influence %.5f ppl %.4f rougeL %.4f", iteration, influence,
                    self.run.series[-1].perplexity, rouge["rougeL"])

    def finish(self, params, dp: DataPoint, iteration: int):
        run, cfg = self.run, self.cfg
        if not run.series or run.series[-1].iteration != iteration:
            self.row(params, iteration, dp, run.influence_trace[-1])
        run.stop_iteration = iteration
        run.verified = verify_unlearned(params, self.dataset, dp.dp_id, cfg.match_cutoff,
                                        cfg.prompt_words, cfg.max_new_tokens)
        if run.verified and run.first_verified_iteration is None:
            run.first_verified_iteration = iteration
        if len(run.influence_trace) >= 2 * cfg.smoothing_window:
            run.smoothed = smooth(run.influence_trace, cfg.smoothing_window).tolist()
            run.inflection_iteration = detect_inflection(run.influence_trace, cfg.smoothing_window)


def _store_for(stores, cfg: UnlearnConfig) -> GradientStore:
    if isinstance(stores, GradientStore):
        if stores.scope != cfg.epoch_scope:
            raise UnlearnError(f"store scope {stores.scope} does not match {cfg.epoch_scope}")
        return stores
    try:
        return stores[cfg.epoch_scope]
    except KeyError:
        raise UnlearnError(f"no {cfg.epoch_scope} gradient store available") from None


def unlearn_iterative(params: ModelParams, stores, dataset: Dataset, target_text: str,
                      config: UnlearnConfig = UnlearnConfig()):
    """Repeatedly ascend along the stored gradient of the datapoint whose text
    is exactly ``target_text``. Returns ``(params, run)``."""
    try:
        dp = dataset.find_exact(target_text)
    except KeyError:
        raise UnlearnError(f"target text not found verbatim in dataset: {target_text!r}") from None
    store = _store_for(stores, config)
    try:
        grads = store.get_scoped(dp.dp_id, config.layer_scope)
    except KeyError as exc:
        raise UnlearnError(str(exc)) from None

    run = UnlearnRun(dp.dp_id, "iterative", config)
    rec = _Recorder(run, dataset, store)
    run.influence_trace.append(rec.influence(params, dp))
    rec.row(params, 0, dp, run.influence_trace[0])
    it = 0
    for it in range(1, config.max_iters + 1):
        params = apply_ascent(params, grads, config.eta, config.layer_scope)
        run.influence_trace.append(rec.influence(params, dp))
        if it % config.eval_every == 0:
            rec.row(params, it, dp, run.influence_trace[-1])
        if config.stop_on_verify and verify_unlearned(
                params, dataset, dp.dp_id, config.match_cutoff, config.prompt_words,
                config.max_new_tokens):
            run.first_verified_iteration = it
            run.status = "verified"
            break
    rec.finish(params, dp, it)
    return params, run


def unlearn_fuzzy(params: ModelParams, stores, dataset: Dataset, prompt: str,
                  config: UnlearnConfig = UnlearnConfig()):
    """Generate from ``prompt``, unlearn whichever training sentence the output
    resembles most, and repeat until nothing clears the cutoff or
    ``max_iters`` is reached. Returns ``(params, run)``."""
    store = _store_for(stores, config)
    tok = dataset.tokenizer
    prompt_tokens = tok.encode(prompt, frame=False)
    prompt_tokens = [tok.bos_id] + prompt_tokens

    def generate(p):
        return complete(p, dataset, prompt_tokens, config.max_new_tokens)

    match = find_closest_match(dataset, generate(params), config.match_cutoff)
    if match is None:
        run = UnlearnRun("", "fuzzy", config, status="no-match", matches=[None])
        return params, run
    dp = dataset.get(match[0])
    if dp.dp_id not in store.dp_ids:
        raise UnlearnError(f"no stored gradients for {dp.dp_id!r}")
    run = UnlearnRun(dp.dp_id, "fuzzy", config)
    run.matches.append(match[0])
    rec = _Recorder(run, dataset, store)
    run.influence_trace.append(rec.influence(params, dp))
    rec.row(params, 0, dp, run.influence_trace[0])

    it = 0
    while it < config.max_iters:
        try:
            grads = store.get_scoped(match[0], config.layer_scope)
        except KeyError as exc:
            raise UnlearnError(str(exc)) from None
        params = apply_ascent(params, grads, config.eta, config.layer_scope)
        it += 1
        run.influence_trace.append(rec.influence(params, dp))
        if it % config.eval_every == 0:
            rec.row(params, it, dp, run.influence_trace[-1])
        text = generate(params)
        if config.stop_on_verify and similarity(text, dp.text) < config.match_cutoff:
            run.first_verified_iteration = it
            run.status = "verified"
            break
        match = find_closest_match(dataset, text, config.match_cutoff)
        run.matches.append(match[0] if match else None)
        if match is None:
            run.status = "no-match"
            break
    rec.finish(params, dp, it)
    return params, run
