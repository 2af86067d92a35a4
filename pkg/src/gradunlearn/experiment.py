"""Declarative experiments: TOML configuration, on-disk artifacts and pipeline steps.

Output directory layout::

    manifest.json                dataset hash, resolved config, artifact digests
    model.init.bin / model.bin   snapshots before and after fine-tuning
    grads.first.grst / grads.all.grst
    activations.json  loss.csv
    influence.init.csv  influence.trained.csv
    runs/<cell>/                 model.bin run.csv trace.csv meta.json influence.csv influence.svg
    report/                      perplexity.csv rouge.csv ttests.csv rouge.svg
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import re
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

try:  # Python 3.11+
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

from . import gradstore
from .data import Dataset, Tokenizer, fixture_path, load_dataset, FIXTURES
from .evaluation import complete, perplexity, prompt_ids, rouge_all
from .gradstore import GradientStore, LayerScope, atomic_write
from .influence import (IhvpConfig, InfluenceReport, cosine_report, eval_gradient,
                        hvp_influence, lissa_ihvp)
from .model import ModelConfig, ModelParams, init_model, layer_specs
from .plots import line_plot
from .stats import ttest_table
from .train import TrainConfig, loss_curve_csv, train
from .unlearn import UnlearnConfig, UnlearnRun, similarity, unlearn_fuzzy, unlearn_iterative

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Invalid experiment configuration; ``field`` is the dotted key at fault."""

    def __init__(self, field: str, message: str, source: Optional[str] = None,
                 line: Optional[int] = None):
        self.field, self.message, self.source, self.line = field, message, source, line
        where = ""
        if source:
            where = f"{source}:{line}: " if line else f"{source}: "
        super().__init__(f"{where}{field}: {message}")


class ArtifactError(OSError):
    """A required artifact is missing or unreadable."""


class IncompatibleRunsError(ValueError):
    pass


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class MatrixCell:
    name: str
    layer_scope: LayerScope
    epoch_scope: str = "all_epochs"
    eta: Optional[float] = None  # falls back to the [unlearn] eta


DESK_MODEL = {"context_len": 64, "embed_dim": 64, "num_blocks": 4, "num_heads": 2,
              "seed": 7, "tied_head": False}
DESK_TRAIN = TrainConfig(learning_rate=5e-4, epochs=15, adam_beta2=0.95,
                         layer_lr_scale={"embedding": 15.0, "head": 15.0})
DESK_UNLEARN = UnlearnConfig(eta=5e-4)
DESK_INFLUENCE = IhvpConfig(iterations=20)
DEFAULT_MATRIX = (
    MatrixCell("embedding", LayerScope.embedding_only(), "all_epochs", 4.5e-3),
    MatrixCell("whole-model", LayerScope.whole_model(), "all_epochs"),
    MatrixCell("first-epoch", LayerScope.whole_model(), "first_epoch"),
)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one experiment needs. The defaults are the desk-scale preset."""

    dataset: str = "fixture:dave"
    output_dir: Path = Path("out")
    model: Mapping[str, Any] = field(default_factory=lambda: dict(DESK_MODEL))
    train: TrainConfig = DESK_TRAIN
    unlearn: UnlearnConfig = DESK_UNLEARN
    influence: IhvpConfig = DESK_INFLUENCE
    influence_method: str = "hvp"
    matrix: Tuple[MatrixCell, ...] = DEFAULT_MATRIX
    mode: str = "iterative"
    target: Optional[str] = None
    target_id: Optional[str] = "dp-15"
    prompt: str = "Dave is"

    @property
    def dataset_path(self) -> Path:
        if self.dataset.startswith("fixture:"):
            return fixture_path(self.dataset.split(":", 1)[1])
        return Path(self.dataset)

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, **self.model)

    def cell_config(self, cell: MatrixCell) -> UnlearnConfig:
        eta = self.unlearn.eta if cell.eta is None else cell.eta
        return dataclasses.replace(self.unlearn, layer_scope=cell.layer_scope,
                                   epoch_scope=cell.epoch_scope, eta=eta)

    def to_dict(self) -> dict:
        """JSON-ready form. Paths are left out so that the record is location-independent."""
        unlearn = dataclasses.asdict(self.unlearn)
        unlearn["layer_scope"] = str(self.unlearn.layer_scope)
        train_cfg = dataclasses.asdict(self.train)
        train_cfg["record_scopes"] = sorted(self.train.record_scopes)
        return {
            "dataset": self.dataset if self.dataset.startswith("fixture:") else Path(self.dataset).name,
            "model": dict(self.model),
            "train": train_cfg,
            "unlearn": unlearn,
            "influence": dict(dataclasses.asdict(self.influence), method=self.influence_method),
            "matrix": [{"name": c.name, "layer_scope": str(c.layer_scope),
                        "epoch_scope": c.epoch_scope, "eta": c.eta} for c in self.matrix],
            "mode": self.mode,
            "target": self.target,
            "target_id": self.target_id,
            "prompt": self.prompt,
        }


_NUM = (int, float)
SCHEMA: Dict[str, Dict[str, tuple]] = {
    "": {"dataset": (str,), "output_dir": (str,), "mode": (str,), "target": (str,),
         "target_id": (str,), "prompt": (str,)},
    "model": {"context_len": (int,), "embed_dim": (int,), "num_blocks": (int,),
              "num_heads": (int,), "seed": (int,), "tied_head": (bool,)},
    "train": {"learning_rate": _NUM, "epochs": (int,), "batch_size": (int,),
              "adam_beta1": _NUM, "adam_beta2": _NUM, "adam_eps": _NUM,
              "record_scopes": (list,), "layer_lr_scale": (dict,)},
    "unlearn": {"eta": _NUM, "max_iters": (int,), "eval_every": (int,), "match_cutoff": _NUM,
                "smoothing_window": (int,), "max_new_tokens": (int,), "prompt_words": (int,),
                "influence_layer": (str,), "stop_on_verify": (bool,)},
    "influence": {"method": (str,), "damping": _NUM, "scale": _NUM, "iterations": (int,),
                  "epsilon": _NUM, "recurrence": (str,), "hvp_eps": _NUM},
    "matrix": {"name": (str,), "layer_scope": (str,), "epoch_scope": (str,), "eta": _NUM},
}
_FLOATS = {k for sec in SCHEMA.values() for k, t in sec.items() if t == _NUM}


def _locate(text: Optional[str], dotted: str) -> Optional[int]:
    """1-based line of ``key = ...`` inside the right table of a TOML document."""
    if not text:
        return None
    section, _, key = dotted.rpartition(".")
    section = re.sub(r"\[\d+\]$", "", section)
    current = ""
    for lineno, line in enumerate(text.splitlines(), start=1):
        header = re.match(r"\s*\[\[?\s*([^\]\s]+)\s*\]\]?", line)
        if header:
            current = header.group(1)
            if not key and current == section:
                return lineno
            continue
        if current == section and re.match(rf"\s*{re.escape(key)}\s*=", line):
            return lineno
    return None


class _Validator:
    def __init__(self, source: Optional[str], text: Optional[str]):
        self.source, self.text = source, text

    def error(self, dotted: str, message: str) -> ConfigError:
        return ConfigError(dotted, message, self.source, _locate(self.text, dotted))

    def section(self, raw: Mapping, name: str, prefix: str) -> dict:
        schema = SCHEMA[name]
        out = {}
        for key, value in raw.items():
            dotted = f"{prefix}{key}"
            if key not in schema:
                if name == "" and key in SCHEMA:
                    continue
                raise self.error(dotted, f"unknown key (expected one of {sorted(schema)})")
            types = schema[key]
            if isinstance(value, bool) and bool not in types:
                raise self.error(dotted, f"expected {types[0].__name__}, got a boolean")
            if not isinstance(value, types):
                raise self.error(dotted, f"expected {types[0].__name__}, got {type(value).__name__}")
            out[key] = float(value) if key in _FLOATS else value
        return out

    def build(self, cls, kwargs: dict, prefix: str):
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            msg = str(exc)
            key = next((k for k in kwargs if re.search(rf"\b{re.escape(k)}\b", msg)), None)
            raise self.error(f"{prefix}{key}" if key else prefix.rstrip("."), msg) from None


def config_from_dict(raw: Mapping, base_dir: Optional[Path] = None, source: Optional[str] = None,
                     text: Optional[str] = None) -> ExperimentConfig:
    """Validate a parsed TOML mapping into an :class:`ExperimentConfig`.

    Relative paths resolve against ``base_dir``. Errors name the offending key
    and, when ``text`` is given, its line.
    """
    v = _Validator(source, text)
    top = v.section(raw, "", "")
    kwargs: Dict[str, Any] = {}
    base = Path(base_dir) if base_dir is not None else Path.cwd()

    if "dataset" in top:
        ds = top["dataset"]
        if ds.startswith("fixture:"):
            if ds.split(":", 1)[1] not in FIXTURES:
                raise v.error("dataset", f"unknown fixture {ds!r}; choose from {sorted(FIXTURES)}")
            kwargs["dataset"] = ds
        else:
            kwargs["dataset"] = str(base / ds) if not Path(ds).is_absolute() else ds
    if "output_dir" in top:
        out = Path(top["output_dir"])
        kwargs["output_dir"] = out if out.is_absolute() else base / out
    for key in ("target", "target_id", "prompt"):
        if key in top:
            kwargs[key] = top[key]
    if "mode" in top:
        if top["mode"] not in ("iterative", "fuzzy"):
            raise v.error("mode", f"must be 'iterative' or 'fuzzy', got {top['mode']!r}")
        kwargs["mode"] = top["mode"]

    for name in ("model", "train", "unlearn", "influence"):
        if name in raw and not isinstance(raw[name], dict):
            raise v.error(name, "expected a table")
    model = dict(DESK_MODEL)
    model.update(v.section(raw.get("model", {}), "model", "model."))
    v.build(ModelConfig, dict(model, vocab_size=2), "model.")
    kwargs["model"] = model

    if "train" in raw:
        t = v.section(raw["train"], "train", "train.")
        if "layer_lr_scale" in t:
            scales = t["layer_lr_scale"]
            for layer, s in scales.items():
                if isinstance(s, bool) or not isinstance(s, _NUM):
                    raise v.error("train.layer_lr_scale", f"scale for {layer!r} must be a number")
            t["layer_lr_scale"] = {k: float(s) for k, s in scales.items()}
        base_train = dataclasses.asdict(DESK_TRAIN)
        base_train.update(t)
        kwargs["train"] = v.build(TrainConfig, base_train, "train.")
        unknown = set(kwargs["train"].layer_lr_scale) - set(ModelConfig(2, **model).layer_names)
        if unknown:
            raise v.error("train.layer_lr_scale", f"unknown layers {sorted(unknown)}")

    if "unlearn" in raw:
        u = v.section(raw["unlearn"], "unlearn", "unlearn.")
        base_unlearn = dataclasses.asdict(DESK_UNLEARN)
        base_unlearn["layer_scope"] = DESK_UNLEARN.layer_scope
        base_unlearn.update(u)
        kwargs["unlearn"] = v.build(UnlearnConfig, base_unlearn, "unlearn.")

    if "influence" in raw:
        inf = v.section(raw["influence"], "influence", "influence.")
        method = inf.pop("method", "hvp")
        if method not in ("hvp", "cosine"):
            raise v.error("influence.method", f"must be 'hvp' or 'cosine', got {method!r}")
        kwargs["influence_method"] = method
        base_inf = dataclasses.asdict(DESK_INFLUENCE)
        base_inf.update(inf)
        kwargs["influence"] = v.build(IhvpConfig, base_inf, "influence.")

    if "matrix" in raw:
        cells = raw["matrix"]
        if not isinstance(cells, list) or not cells:
            raise v.error("matrix", "must be a non-empty array of tables")
        built, names = [], set()
        for i, cell in enumerate(cells):
            prefix = f"matrix[{i}]."
            if not isinstance(cell, dict):
                raise v.error(f"matrix[{i}]", "expected a table")
            c = v.section(cell, "matrix", prefix)
            for required in ("name", "layer_scope"):
                if required not in c:
                    raise v.error(f"{prefix}{required}", "missing required key")
            if not re.fullmatch(r"[A-Za-z0-9_.-]+", c["name"]) or c["name"] in names:
                raise v.error(f"{prefix}name", f"must be a unique, path-safe name, got {c['name']!r}")
            names.add(c["name"])
            try:
                scope = LayerScope.parse(c["layer_scope"])
                scope.select(ModelConfig(2, **model).layer_names)
            except ValueError as exc:
                raise v.error(f"{prefix}layer_scope", str(exc)) from None
            epoch_scope = c.get("epoch_scope", "all_epochs")
            if epoch_scope not in gradstore.SCOPES:
                raise v.error(f"{prefix}epoch_scope", f"must be one of {list(gradstore.SCOPES)}")
            eta = c.get("eta")
            if eta is not None and not eta >= 0:
                raise v.error(f"{prefix}eta", "must be >= 0")
            built.append(MatrixCell(c["name"], scope, epoch_scope, eta))
        kwargs["matrix"] = tuple(built)

    return ExperimentConfig(**kwargs)


def load_config(path, overrides: Sequence[str] = ()) -> ExperimentConfig:
    """Read a TOML experiment file and apply ``section.key=value`` overrides."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError("config", f"file not found: {path}") from None
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigError("syntax", str(exc), str(path), int(m.group(1)) if m else None) from None
    apply_overrides(raw, overrides)
    return config_from_dict(raw, path.parent, str(path), text)


def parse_override(item: str) -> Tuple[List[str], Any]:
    key, sep, value = item.partition("=")
    if not sep or not key.strip():
        raise ConfigError("override", f"expected section.key=value, got {item!r}")
    try:
        parsed = tomllib.loads(f"v = {value}")["v"]
    except tomllib.TOMLDecodeError:
        parsed = value
    return key.strip().split("."), parsed


def apply_overrides(raw: dict, overrides: Sequence[str]) -> dict:
    for item in overrides:
        path, value = parse_override(item)
        node = raw
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(".".join(path), "cannot override inside a non-table value")
        node[path[-1]] = value
    return raw


def check_paths(cfg: ExperimentConfig):
    if not cfg.dataset_path.is_file():
        raise ConfigError("dataset", f"dataset file not found: {cfg.dataset_path}")


# --------------------------------------------------------------------------
# model snapshots

SNAPSHOT_MAGIC = b"GUMB"
SNAPSHOT_VERSION = 1


def snapshot_bytes(params: ModelParams, tokenizer: Tokenizer) -> bytes:
    """``GUMB``, u16 version, u32 header length, JSON header, float64 layers, CRC32."""
    header = json.dumps({
        "config": dataclasses.asdict(params.config),
        "vocab": tokenizer.inverse,
        "layers": [[name, int(arr.size)] for name, arr in params.layers.items()],
    }, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = SNAPSHOT_MAGIC + struct.pack("<HI", SNAPSHOT_VERSION, len(header)) + header
    body += b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in params.layers.values())
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def snapshot_from_bytes(data: bytes) -> Tuple[ModelParams, Tokenizer]:
    if data[:4] != SNAPSHOT_MAGIC:
        raise ArtifactError("not a model snapshot (bad magic)")
    if len(data) < 14:
        raise ArtifactError("model snapshot truncated")
    version, hlen = struct.unpack("<HI", data[4:10])
    if version != SNAPSHOT_VERSION:
        raise ArtifactError(f"snapshot version {version}, expected {SNAPSHOT_VERSION}")
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != crc:
        raise ArtifactError("model snapshot checksum mismatch")
    header = json.loads(data[10:10 + hlen].decode("utf-8"))
    config = ModelConfig(**header["config"])
    offset = 10 + hlen
    layers = {}
    for name, size in header["layers"]:
        layers[name] = np.frombuffer(data[offset:offset + 8 * size], dtype="<f8").astype(np.float64)
        offset += 8 * size
    if offset != len(data) - 4:
        raise ArtifactError("model snapshot has an inconsistent payload length")
    tokenizer = Tokenizer({tok: i for i, tok in enumerate(header["vocab"])})
    return ModelParams(config, layers, layer_specs(config)), tokenizer


def save_snapshot(path, params: ModelParams, tokenizer: Tokenizer):
    atomic_write(path, snapshot_bytes(params, tokenizer))


def load_snapshot(path) -> Tuple[ModelParams, Tokenizer]:
    try:
        return snapshot_from_bytes(Path(path).read_bytes())
    except FileNotFoundError:
        raise ArtifactError(f"missing model snapshot {path}; run `train` first") from None


# --------------------------------------------------------------------------
# helpers


def _write_text(path: Path, text: str):
    atomic_write(path, text.encode("utf-8"))


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _read_manifest(out: Path) -> dict:
    try:
        return json.loads((out / "manifest.json").read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ArtifactError(f"no manifest.json in {out}; run `train` first") from None


def _load_store(path: Path) -> GradientStore:
    try:
        return gradstore.load(path)
    except FileNotFoundError:
        raise ArtifactError(f"missing gradient store {path}") from None
    except gradstore.StoreFormatError as exc:
        raise ArtifactError(f"{path}: {exc}") from None


STORE_FILES = {"first_epoch": "grads.first.grst", "all_epochs": "grads.all.grst"}


def stage_influence(cfg: ExperimentConfig, params: ModelParams, dataset: Dataset,
                    store: Optional[GradientStore] = None, iteration: int = 0) -> InfluenceReport:
    """Per-datapoint influence under ``params`` using the configured method.

    For ``hvp`` the test gradient and its inverse-HVP are recomputed at
    ``params``; ``cosine`` needs the gradient store.
    """
    if cfg.influence_method == "cosine":
        if store is None:
            raise ArtifactError("cosine influence needs a gradient store")
        return cosine_report(params, dataset, store, cfg.unlearn.influence_layer, iteration)
    seqs = [it.token_ids for it in dataset]
    v = eval_gradient(params, seqs)
    ihvp = lissa_ihvp(params, seqs, v, cfg.influence)
    return hvp_influence(params, dataset, ihvp, iteration)


def _load_experiment(cfg: ExperimentConfig):
    """Trained snapshot, stores and the dataset re-encoded with the snapshot's vocabulary."""
    out = Path(cfg.output_dir)
    manifest = _read_manifest(out)
    params, tok = load_snapshot(out / "model.bin")
    check_paths(cfg)
    dataset = load_dataset(cfg.dataset_path, tok)
    if dataset.sha256 != manifest["dataset_sha256"]:
        raise IncompatibleRunsError(
            f"dataset {cfg.dataset_path} (sha256 {dataset.sha256[:12]}) differs from the one "
            f"used for training ({manifest['dataset_sha256'][:12]})")
    return manifest, params, tok, dataset


# --------------------------------------------------------------------------
# pipeline steps


def run_train(cfg: ExperimentConfig) -> dict:
    """Fine-tune from the seed and write every training artifact. Returns the manifest."""
    check_paths(cfg)
    dataset = load_dataset(cfg.dataset_path)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    p0 = init_model(cfg.model_config(dataset.tokenizer.vocab_size))
    logger.info("training %d params on %d sentences", p0.num_params, len(dataset))
    result = train(p0, dataset, cfg.train)

    tok = dataset.tokenizer
    save_snapshot(out / "model.init.bin", p0, tok)
    save_snapshot(out / "model.bin", result.params, tok)
    for scope, store in result.stores.items():
        gradstore.save(store, out / STORE_FILES[scope])
    result.activations.save(out / "activations.json")
    _write_text(out / "loss.csv", loss_curve_csv(result.loss_curve))

    store = result.stores.get("all_epochs")
    logger.info("scoring influence before and after fine-tuning")
    _write_text(out / "influence.init.csv", stage_influence(cfg, p0, dataset, store).to_csv())
    _write_text(out / "influence.trained.csv",
                stage_influence(cfg, result.params, dataset, store).to_csv())

    files = ["model.init.bin", "model.bin", *(STORE_FILES[s] for s in result.stores),
             "activations.json", "loss.csv", "influence.init.csv", "influence.trained.csv"]
    manifest = {
        "dataset_sha256": dataset.sha256,
        "config": cfg.to_dict(),
        "final_loss": result.loss_curve[-1],
        "artifacts": {f: _sha256(out / f) for f in files},
    }
    _write_text(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _target_text(cfg: ExperimentConfig, dataset: Dataset) -> str:
    if cfg.target is not None:
        return cfg.target
    if cfg.target_id is None:
        raise ConfigError("target", "iterative mode needs a target or target_id")
    try:
        return dataset.get(cfg.target_id).text
    except KeyError:
        raise ConfigError("target_id", f"no datapoint {cfg.target_id!r} in the dataset") from None


def influence_svg(run: UnlearnRun, title: str) -> str:
    xs = list(range(len(run.influence_trace)))
    series = {"influence": (xs, run.influence_trace)}
    if run.smoothed:
        series["smoothed"] = (xs, run.smoothed)
    return line_plot(series, title, "iteration", "influence")


def run_unlearn(cfg: ExperimentConfig, cells: Optional[Sequence[str]] = None) -> List[dict]:
    """Unlearn under every matrix cell (or the named subset). Returns each cell's metadata."""
    manifest, params, tok, dataset = _load_experiment(cfg)
    out = Path(cfg.output_dir)
    stores = {}
    for scope, fname in STORE_FILES.items():
        if (out / fname).exists():
            stores[scope] = _load_store(out / fname)
    chosen = list(cfg.matrix)
    if cells:
        known = {c.name for c in chosen}
        missing = [c for c in cells if c not in known]
        if missing:
            raise ConfigError("matrix", f"unknown cells {missing}")
        chosen = [c for c in chosen if c.name in cells]
    target = _target_text(cfg, dataset) if cfg.mode == "iterative" else None

    metas = []
    for cell in chosen:
        ucfg = cfg.cell_config(cell)
        if ucfg.epoch_scope not in stores:
            raise ArtifactError(f"cell {cell.name!r} needs the {ucfg.epoch_scope} store, "
                                f"which was not recorded")
        logger.info("cell %s: %s / %s, eta=%g", cell.name, ucfg.layer_scope, ucfg.epoch_scope,
                    ucfg.eta)
        if cfg.mode == "iterative":
            new_params, run = unlearn_iterative(params, stores, dataset, target, ucfg)
        else:
            new_params, run = unlearn_fuzzy(params, stores, dataset, cfg.prompt, ucfg)
        store = stores[ucfg.epoch_scope]
        report = stage_influence(cfg, new_params, dataset, store, run.stop_iteration)
        retained = dataset.without(run.target) if run.target else dataset
        cell_dir = out / "runs" / cell.name
        cell_dir.mkdir(parents=True, exist_ok=True)
        save_snapshot(cell_dir / "model.bin", new_params, tok)
        _write_text(cell_dir / "run.csv", run.series_csv())
        _write_text(cell_dir / "trace.csv", run.trace_csv())
        _write_text(cell_dir / "influence.csv", report.to_csv())
        _write_text(cell_dir / "influence.svg",
                    influence_svg(run, f"{cell.name}: influence of {run.target or 'no match'}"))
        meta = json.loads(run.metadata_json({
            "cell": cell.name,
            "cell_index": cfg.matrix.index(cell),
            "dataset_sha256": dataset.sha256,
            "target_text": dataset.get(run.target).text if run.target else None,
            "perplexity": perplexity(new_params, dataset),
            "retained_perplexity": perplexity(new_params, retained),
            "influence_method": cfg.influence_method,
        }))
        _write_text(cell_dir / "meta.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")
        metas.append(meta)
    return metas


def run_influence(cfg: ExperimentConfig, model_path=None, scope: str = "all_epochs") -> InfluenceReport:
    """Influence report of a snapshot (the trained model by default)."""
    _, _, tok, dataset = _load_experiment(cfg)
    out = Path(cfg.output_dir)
    params, snap_tok = load_snapshot(model_path or out / "model.bin")
    if snap_tok.inverse != tok.inverse:
        raise IncompatibleRunsError("snapshot vocabulary differs from the trained model's")
    store = _load_store(out / STORE_FILES[scope]) if cfg.influence_method == "cosine" else None
    return stage_influence(cfg, params, dataset, store)


EVAL_COLUMNS = ["dp_id", "metric", "value"]


def evaluate_dataset(params: ModelParams, dataset: Dataset, prompt_words: int = 2,
                     max_new: int = 24) -> str:
    """CSV ``dp_id,metric,value``: per-sentence perplexity, ROUGE and completion ratio,
    plus ``ALL`` rows with corpus perplexity and mean scores."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EVAL_COLUMNS)
    sums = {"rouge1": 0.0, "rouge2": 0.0, "rougeL": 0.0, "match_ratio": 0.0}
    for item in dataset:
        text = complete(params, dataset, prompt_ids(dataset, item.dp_id, prompt_words), max_new)
        scores = rouge_all(text, item.text)
        scores["match_ratio"] = similarity(text, item.text)
        w.writerow([item.dp_id, "perplexity", repr(perplexity(params, [item.token_ids]))])
        for k, val in scores.items():
            sums[k] += val
            w.writerow([item.dp_id, k, repr(float(val))])
    w.writerow(["ALL", "perplexity", repr(perplexity(params, dataset))])
    for k, total in sums.items():
        w.writerow(["ALL", k, repr(total / len(dataset))])
    return buf.getvalue()


def run_eval(cfg: ExperimentConfig, model_path=None, dataset_path=None) -> str:
    out = Path(cfg.output_dir)
    params, tok = load_snapshot(model_path or out / "model.bin")
    path = Path(dataset_path) if dataset_path else cfg.dataset_path
    if not path.is_file():
        raise ConfigError("dataset", f"dataset file not found: {path}")
    return evaluate_dataset(params, load_dataset(path, tok), cfg.unlearn.prompt_words,
                            cfg.unlearn.max_new_tokens)


def inspect_grads(path) -> str:
    """CSV listing a store's layer table followed by the norm of every entry."""
    store = _load_store(Path(path))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["kind", "scope", "dp_id", "layer", "shape", "norm"])
    for layer, shape in store.layer_table.items():
        w.writerow(["layer", store.scope, "", layer, "x".join(map(str, shape)), ""])
    for dp_id, layer, norm in store.norms():
        w.writerow(["entry", store.scope, dp_id, layer, "", repr(norm)])
    return buf.getvalue()


# --------------------------------------------------------------------------
# report


@dataclass
class ReportResult:
    files: Dict[str, Path]
    degenerate: List[str]


def _read_csv(path: Path) -> List[dict]:
    try:
        return list(csv.DictReader(io.StringIO(path.read_text(encoding="utf-8"))))
    except FileNotFoundError:
        raise ArtifactError(f"missing {path}") from None


def _influence(path: Path, order: Sequence[str]) -> np.ndarray:
    try:
        report = InfluenceReport.from_csv(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ArtifactError(f"missing {path}") from None
    missing = [dp for dp in order if dp not in report.scores]
    if missing:
        raise IncompatibleRunsError(f"{path} lacks scores for {missing}")
    return report.values(order)


def load_runs(out: Path) -> List[dict]:
    metas = []
    for meta_path in sorted((out / "runs").glob("*/meta.json")):
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        meta["_dir"] = meta_path.parent
        metas.append(meta)
    metas.sort(key=lambda m: (m.get("cell_index", 0), m["cell"]))
    return metas


def run_report(cfg: ExperimentConfig) -> ReportResult:
    """Perplexity stages, ROUGE-by-iteration and paired t-tests over saved runs."""
    out = Path(cfg.output_dir)
    manifest = _read_manifest(out)
    metas = load_runs(out)
    if len(metas) < 2:
        raise IncompatibleRunsError(f"a report needs at least 2 runs, found {len(metas)} in {out / 'runs'}")
    bad = [m["cell"] for m in metas if m["dataset_sha256"] != manifest["dataset_sha256"]]
    if bad:
        raise IncompatibleRunsError(f"runs {bad} were made on a different dataset than the model")
    init, tok = load_snapshot(out / "model.init.bin")
    trained, _ = load_snapshot(out / "model.bin")
    check_paths(cfg)
    dataset = load_dataset(cfg.dataset_path, tok)
    if dataset.sha256 != manifest["dataset_sha256"]:
        raise IncompatibleRunsError(f"dataset {cfg.dataset_path} differs from the training dataset")
    rep = out / "report"
    rep.mkdir(parents=True, exist_ok=True)
    files = {}

    # perplexity stages
    first_target = next((m["target"] for m in metas if m["target"]), None)
    base_retained = dataset.without(first_target) if first_target else dataset
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["stage", "perplexity", "retained_perplexity"])
    w.writerow(["before fine-tuning", repr(perplexity(init, dataset)), repr(perplexity(init, base_retained))])
    w.writerow(["after fine-tuning", repr(perplexity(trained, dataset)),
                repr(perplexity(trained, base_retained))])
    for m in metas:
        w.writerow([f"after unlearning ({m['cell']})", repr(m["perplexity"]),
                    repr(m["retained_perplexity"])])
    files["perplexity"] = rep / "perplexity.csv"
    _write_text(files["perplexity"], buf.getvalue())

    # ROUGE by iteration
    series = {m["cell"]: _read_csv(m["_dir"] / "run.csv") for m in metas}
    grid = sorted({int(r["iteration"]) for rows in series.values() for r in rows})
    by_iter = {cell: {int(r["iteration"]): r for r in rows} for cell, rows in series.items()}
    kinds = ("rouge1", "rouge2", "rougeL")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iteration"] + [f"{cell}.{k}" for cell in series for k in kinds])
    for it in grid:
        row = [it]
        for cell in series:
            r = by_iter[cell].get(it)
            row += [r[k] if r else "" for k in kinds]
        w.writerow(row)
    files["rouge"] = rep / "rouge.csv"
    _write_text(files["rouge"], buf.getvalue())
    plot = {}
    for cell, rows in series.items():
        for k in kinds:
            plot[f"{cell} {k}"] = ([int(r["iteration"]) for r in rows], [float(r[k]) for r in rows])
    files["rouge_svg"] = rep / "rouge.svg"
    _write_text(files["rouge_svg"], line_plot(plot, "ROUGE over unlearning iterations",
                                              "iteration", "F1"))

    # paired t-tests over per-datapoint influence
    order = dataset.ids
    before = _influence(out / "influence.init.csv", order)
    tuned = _influence(out / "influence.trained.csv", order)
    after = {m["cell"]: _influence(m["_dir"] / "influence.csv", order) for m in metas}
    comparisons = [("before-fine-tuning vs fine-tuning", before, tuned)]
    comparisons += [(f"before-fine-tuning vs {c}", before, s) for c, s in after.items()]
    comparisons += [(f"fine-tuning vs {c}", tuned, s) for c, s in after.items()]
    names = list(after)
    for j in range(len(names)):
        for i in range(j):
            comparisons.append((f"{names[j]} vs {names[i]}", after[names[j]], after[names[i]]))
    text, degenerate = ttest_table(comparisons)
    files["ttests"] = rep / "ttests.csv"
    _write_text(files["ttests"], text)
    return ReportResult(files, degenerate)
