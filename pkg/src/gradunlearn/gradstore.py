"""Per-datapoint, per-layer accumulated gradients and their on-disk format.

File layout (all integers little-endian)::

    b"GRST"  u16 version  u8 scope
    u32 n_layers, then per layer: u16 name_len, name (utf-8), u8 ndim, u32 dims...
    u32 n_entries, then per entry: u16 id_len, dp_id (utf-8), u32 layer_index,
                                   float64 values (count fixed by the layer shape)
    u32 crc32 of everything above
"""

from __future__ import annotations

import io
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

MAGIC = b"GRST"
VERSION = 1
SCOPES = ("first_epoch", "all_epochs")


class GradientStoreError(Exception):
    pass


class SealedStoreError(GradientStoreError):
    pass


class StoreFormatError(GradientStoreError):
    pass


class BadMagicError(StoreFormatError):
    pass


class VersionMismatchError(StoreFormatError):
    pass


class TruncatedStoreError(StoreFormatError):
    pass


class ChecksumError(StoreFormatError):
    pass


@dataclass(frozen=True)
class LayerScope:
    """Which layers an unlearning step touches.

    ``kind`` is one of ``embedding_only``, ``last_blocks``, ``whole_model``,
    ``custom``. ``n`` applies to ``last_blocks``; ``layers`` to ``custom``.
    """

    kind: str = "whole_model"
    n: int = 0
    layers: Tuple[str, ...] = ()

    @classmethod
    def embedding_only(cls):
        return cls("embedding_only")

    @classmethod
    def whole_model(cls):
        return cls("whole_model")

    @classmethod
    def last_blocks(cls, n: int):
        return cls("last_blocks", n=n)

    @classmethod
    def custom(cls, layers: Iterable[str]):
        return cls("custom", layers=tuple(layers))

    @classmethod
    def parse(cls, text: str) -> "LayerScope":
        """Parse ``embedding_only``, ``whole_model``, ``last_blocks:2`` or ``custom:a,b``."""
        kind, _, arg = text.strip().partition(":")
        if kind == "last_blocks":
            return cls.last_blocks(int(arg or 1))
        if kind == "custom":
            return cls.custom(a.strip() for a in arg.split(",") if a.strip())
        if kind in ("embedding_only", "whole_model") and not arg:
            return cls(kind)
        raise ValueError(f"unknown layer scope {text!r}")

    def __str__(self):
        if self.kind == "last_blocks":
            return f"last_blocks:{self.n}"
        if self.kind == "custom":
            return "custom:" + ",".join(self.layers)
        return self.kind

    def select(self, layer_names: Sequence[str]) -> List[str]:
        """Selected layer names, in model order."""
        names = list(layer_names)
        if self.kind == "embedding_only":
            chosen = ["embedding"]
        elif self.kind == "whole_model":
            chosen = names
        elif self.kind == "last_blocks":
            blocks = [n for n in names if n.startswith("block.")]
            if not 1 <= self.n <= len(blocks):
                raise ValueError(f"last_blocks({self.n}) on a model with {len(blocks)} blocks")
            chosen = blocks[-self.n:]
        elif self.kind == "custom":
            chosen = list(self.layers)
        else:
            raise ValueError(f"unknown layer scope kind {self.kind!r}")
        unknown = [c for c in chosen if c not in names]
        if unknown:
            raise ValueError(f"layer scope selects unknown layers {unknown}")
        if not chosen:
            raise ValueError("layer scope selects no layers")
        return [n for n in names if n in chosen]


@dataclass
class GradientStore:
    scope: str
    layer_table: Dict[str, Tuple[int, ...]]
    entries: Dict[Tuple[str, str], np.ndarray] = field(default_factory=dict)
    sealed: bool = False

    def __post_init__(self):
        if self.scope not in SCOPES:
            raise GradientStoreError(f"unknown store scope {self.scope!r}")
        self.layer_table = {k: tuple(int(d) for d in v) for k, v in self.layer_table.items()}

    @classmethod
    def for_params(cls, params, scope: str) -> "GradientStore":
        return cls(scope, {name: arr.shape for name, arr in params.layers.items()})

    @property
    def layer_names(self) -> List[str]:
        return list(self.layer_table)

    @property
    def dp_ids(self) -> List[str]:
        seen = {}
        for dp_id, _ in self.entries:
            seen.setdefault(dp_id)
        return list(seen)

    def seal(self):
        self.sealed = True

    def accumulate(self, dp_id: str, layer: str, grad: np.ndarray):
        if self.sealed:
            raise SealedStoreError(f"{self.scope} store is sealed; no further writes")
        if layer not in self.layer_table:
            raise GradientStoreError(f"unknown layer {layer!r}")
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.layer_table[layer]:
            raise GradientStoreError(
                f"gradient for {layer!r} has shape {grad.shape}, expected {self.layer_table[layer]}"
            )
        if not np.all(np.isfinite(grad)):
            raise GradientStoreError(f"non-finite gradient for ({dp_id!r}, {layer!r})")
        key = (dp_id, layer)
        if key in self.entries:
            self.entries[key] = self.entries[key] + grad
        else:
            self.entries[key] = grad.copy()

    def accumulate_set(self, dp_id: str, grads: Dict[str, np.ndarray]):
        for layer, g in grads.items():
            self.accumulate(dp_id, layer, g)

    def get_scoped(self, dp_id: str, layer_scope: LayerScope) -> Dict[str, np.ndarray]:
        """Stored gradients of ``dp_id`` for the scope's layers.

        Layers without an entry are left out rather than zero-filled.
        """
        if not any(k[0] == dp_id for k in self.entries):
            raise KeyError(f"datapoint {dp_id!r} not in {self.scope} store")
        out = {}
        for layer in layer_scope.select(self.layer_names):
            if (dp_id, layer) in self.entries:
                out[layer] = self.entries[(dp_id, layer)]
        return out

    def project(self, layer_scope: LayerScope) -> "GradientStore":
        """Copy of the store holding only the scope's layers."""
        keep = layer_scope.select(self.layer_names)
        return GradientStore(
            self.scope,
            {k: v for k, v in self.layer_table.items() if k in keep},
            {k: v.copy() for k, v in self.entries.items() if k[1] in keep},
            self.sealed,
        )

    def __eq__(self, other):
        if not isinstance(other, GradientStore):
            return NotImplemented
        return (
            self.scope == other.scope
            and self.layer_table == other.layer_table
            and list(self.entries) == list(other.entries)
            and all(np.array_equal(self.entries[k], other.entries[k]) for k in self.entries)
        )

    def norms(self) -> List[Tuple[str, str, float]]:
        return [(dp, layer, float(np.linalg.norm(g))) for (dp, layer), g in self.entries.items()]

    # -- serialisation -----------------------------------------------------

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<HB", VERSION, SCOPES.index(self.scope)))
        names = self.layer_names
        buf.write(struct.pack("<I", len(names)))
        for name in names:
            raw = name.encode("utf-8")
            shape = self.layer_table[name]
            buf.write(struct.pack("<H", len(raw)) + raw)
            buf.write(struct.pack(f"<B{len(shape)}I", len(shape), *shape))
        buf.write(struct.pack("<I", len(self.entries)))
        for (dp_id, layer), grad in self.entries.items():
            raw = dp_id.encode("utf-8")
            buf.write(struct.pack("<H", len(raw)) + raw)
            buf.write(struct.pack("<I", names.index(layer)))
            buf.write(np.ascontiguousarray(grad, dtype="<f8").tobytes())
        body = buf.getvalue()
        return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)

    @classmethod
    def from_bytes(cls, data: bytes) -> "GradientStore":
        reader = _Reader(data)
        if reader.take(4) != MAGIC:
            raise BadMagicError("not a gradient store (bad magic)")
        version, scope_byte = reader.unpack("<HB")
        if version != VERSION:
            raise VersionMismatchError(f"store version {version}, expected {VERSION}")
        if scope_byte >= len(SCOPES):
            raise StoreFormatError(f"bad scope byte {scope_byte}")
        (n_layers,) = reader.unpack("<I")
        table: Dict[str, Tuple[int, ...]] = {}
        for _ in range(n_layers):
            (name_len,) = reader.unpack("<H")
            name = reader.take(name_len).decode("utf-8")
            (ndim,) = reader.unpack("<B")
            table[name] = reader.unpack(f"<{ndim}I")
        names = list(table)
        (n_entries,) = reader.unpack("<I")
        entries = {}
        for _ in range(n_entries):
            (id_len,) = reader.unpack("<H")
            dp_id = reader.take(id_len).decode("utf-8")
            (idx,) = reader.unpack("<I")
            if idx >= len(names):
                raise StoreFormatError(f"entry references layer index {idx}")
            shape = table[names[idx]]
            count = int(np.prod(shape))
            values = np.frombuffer(reader.take(8 * count), dtype="<f8").astype(np.float64)
            entries[(dp_id, names[idx])] = values.reshape(shape)
        body_end = reader.pos
        (crc,) = reader.unpack("<I")
        if reader.pos != len(data):
            raise StoreFormatError(f"{len(data) - reader.pos} trailing bytes after checksum")
        if zlib.crc32(data[:body_end]) & 0xFFFFFFFF != crc:
            raise ChecksumError("checksum mismatch; store is corrupted")
        return cls(SCOPES[scope_byte], table, entries, sealed=True)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedStoreError(
                f"store truncated: wanted {n} bytes at offset {self.pos}, file has {len(self.data)}"
            )
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def atomic_write(path, data: bytes):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(store: GradientStore, path):
    atomic_write(path, store.to_bytes())


def load(path) -> GradientStore:
    return GradientStore.from_bytes(Path(path).read_bytes())


def serialized_size(store: GradientStore) -> int:
    return len(store.to_bytes())
