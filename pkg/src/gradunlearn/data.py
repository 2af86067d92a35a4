"""Word-level tokenizer, sentence datasets and the bundled fixture corpora."""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

UNK, BOS, EOS = "<unk>", "<bos>", "<eos>"
SPECIALS = (UNK, BOS, EOS)

# a token is a run of word characters or a single punctuation character
_SPLIT = re.compile(r"\w+|[^\w\s]")
# marks a piece glued to the previous one (no whitespace in between)
GLUE = "##"

FIXTURES = {"dave": "dave.txt", "additional_prompts": "additional_prompts.txt"}


class DataError(ValueError):
    pass


def split_words(text: str) -> List[str]:
    """Split on whitespace and punctuation, keeping punctuation as tokens.

    >>> split_words("Dave is a freelance writer.")
    ['Dave', 'is', 'a', 'freelance', 'writer', '.']
    """
    return _SPLIT.findall(text)


def pieces(text: str) -> List[str]:
    """Like :func:`split_words` but tags tokens not preceded by whitespace.

    The tag makes decoding lossless for single-space separated text.
    """
    out = []
    for chunk in text.split():
        for i, tok in enumerate(_SPLIT.findall(chunk)):
            out.append(tok if i == 0 else GLUE + tok)
    return out


@dataclass
class Tokenizer:
    vocab: Dict[str, int]
    inverse: List[str] = field(init=False, repr=False)

    def __post_init__(self):
        self.inverse = [None] * len(self.vocab)
        for tok, idx in self.vocab.items():
            self.inverse[idx] = tok
        if any(t is None for t in self.inverse):
            raise DataError("token ids must be dense in [0, vocab_size)")
        for special in SPECIALS:
            if special not in self.vocab:
                raise DataError(f"missing special token {special}")

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    @property
    def unk_id(self) -> int:
        return self.vocab[UNK]

    @property
    def bos_id(self) -> int:
        return self.vocab[BOS]

    @property
    def eos_id(self) -> int:
        return self.vocab[EOS]

    def encode(self, text: str, frame: bool = True) -> List[int]:
        ids = [self.vocab.get(p, self.unk_id) for p in pieces(text)]
        return [self.bos_id] + ids + [self.eos_id] if frame else ids

    def decode(self, ids: Iterable[int]) -> str:
        parts: List[str] = []
        for i in ids:
            i = int(i)
            if not 0 <= i < len(self.inverse):
                raise DataError(f"token id {i} out of range [0, {len(self.inverse)})")
            tok = self.inverse[i]
            if tok in (BOS, EOS):
                continue
            if tok.startswith(GLUE) and parts:
                parts[-1] += tok[len(GLUE):]
            else:
                parts.append(tok[len(GLUE):] if tok.startswith(GLUE) else tok)
        return " ".join(parts)


def build_vocab(corpus: Sequence[str], specials: Sequence[str] = SPECIALS) -> Tokenizer:
    """Vocabulary of every piece in ``corpus`` in first-seen order, specials first."""
    if not corpus:
        raise DataError("cannot build a vocabulary from an empty corpus")
    vocab: Dict[str, int] = {}
    for tok in list(specials) + [p for text in corpus for p in pieces(text)]:
        vocab.setdefault(tok, len(vocab))
    return Tokenizer(vocab)


@dataclass(frozen=True)
class DataPoint:
    dp_id: str
    text: str
    token_ids: Tuple[int, ...]


@dataclass
class Dataset:
    items: List[DataPoint]
    tokenizer: Tokenizer
    sha256: str = ""

    def __post_init__(self):
        seen = set()
        for item in self.items:
            if item.dp_id in seen:
                raise DataError(f"duplicate datapoint id {item.dp_id!r}")
            seen.add(item.dp_id)

    def __len__(self):
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    @property
    def ids(self) -> List[str]:
        return [it.dp_id for it in self.items]

    def get(self, dp_id: str) -> DataPoint:
        for item in self.items:
            if item.dp_id == dp_id:
                return item
        raise KeyError(dp_id)

    def index(self, dp_id: str) -> int:
        return self.ids.index(dp_id)

    def find_exact(self, text: str) -> DataPoint:
        """Datapoint whose text equals ``text`` exactly."""
        for item in self.items:
            if item.text == text:
                return item
        raise KeyError(f"no datapoint with text {text!r}")

    def without(self, dp_id: str) -> "Dataset":
        return Dataset([it for it in self.items if it.dp_id != dp_id], self.tokenizer, self.sha256)


def parse_lines(lines: Iterable[str]) -> List[Tuple[str, str]]:
    rows = []
    for lineno, line in enumerate(lines, start=1):
        line = line.rstrip("\r\n")
        if not line.strip():
            continue
        if "\t" in line:
            dp_id, text = line.split("\t", 1)
        else:
            dp_id, text = f"dp-{lineno}", line
        rows.append((dp_id.strip(), text))
    return rows


def load_dataset(path, tokenizer: Optional[Tokenizer] = None) -> Dataset:
    """Load one sentence per line (``id<TAB>text`` or bare text).

    Without a tokenizer, one is built from the file itself.
    """
    raw = Path(path).read_bytes()
    rows = parse_lines(raw.decode("utf-8").split("\n"))
    if not rows:
        raise DataError(f"{path}: dataset is empty")
    ids = [r[0] for r in rows]
    dupes = sorted({i for i in ids if ids.count(i) > 1})
    if dupes:
        raise DataError(f"{path}: duplicate datapoint ids {dupes}")
    if tokenizer is None:
        tokenizer = build_vocab([t for _, t in rows])
    items = [DataPoint(i, t, tuple(tokenizer.encode(t))) for i, t in rows]
    return Dataset(items, tokenizer, hashlib.sha256(raw).hexdigest())


def fixture_path(name: str) -> Path:
    """Path of a bundled fixture: ``"dave"`` or ``"additional_prompts"``."""
    try:
        fname = FIXTURES[name]
    except KeyError:
        raise DataError(f"unknown fixture {name!r}; choose from {sorted(FIXTURES)}") from None
    return Path(str(resources.files("gradunlearn") / "data" / fname))


def load_fixture(name: str, tokenizer: Optional[Tokenizer] = None) -> Dataset:
    return load_dataset(fixture_path(name), tokenizer)
