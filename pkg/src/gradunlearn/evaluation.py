"""Perplexity, ROUGE-1/2/L and greedy decoding."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence

import numpy as np

from .data import Dataset, split_words
from .model import ModelParams, forward, sequence_nll


class EvalError(ValueError):
    pass


def generate_greedy(params: ModelParams, prompt_tokens: Sequence[int], max_new: int = 24,
                    eos_id: Optional[int] = None) -> List[int]:
    """Append the arg-max token until ``eos_id`` or ``max_new`` tokens.

    Ties go to the lowest id. The window is cropped to the last
    ``context_len`` tokens once the sequence outgrows it.
    """
    tokens = [int(t) for t in prompt_tokens]
    if not tokens:
        raise EvalError("prompt must contain at least one token")
    ctx = params.config.context_len
    for _ in range(max_new):
        logits = forward(params, tokens[-ctx:]).logits[-1]
        nxt = int(np.argmax(logits))
        tokens.append(nxt)
        if eos_id is not None and nxt == eos_id:
            break
    return tokens


def prompt_ids(dataset: Dataset, dp_id: str, n_words: int = 2) -> List[int]:
    """BOS plus the first ``n_words`` tokens of a datapoint's sentence."""
    return list(dataset.get(dp_id).token_ids[: 1 + n_words])


def complete(params: ModelParams, dataset: Dataset, prompt: Sequence[int], max_new: int = 24) -> str:
    tok = dataset.tokenizer
    return tok.decode(generate_greedy(params, prompt, max_new, eos_id=tok.eos_id))


def total_nll(params: ModelParams, sequences: Iterable[Sequence[int]]):
    nll, count = 0.0, 0
    for seq in sequences:
        per_token = sequence_nll(params, seq)
        nll += float(per_token.sum())
        count += per_token.size
    return nll, count


def perplexity(params: ModelParams, dataset) -> float:
    """exp of the mean NLL over every predicted position of every sentence.

    ``dataset`` may be a Dataset or an iterable of framed token sequences.
    """
    seqs = [it.token_ids for it in dataset] if isinstance(dataset, Dataset) else list(dataset)
    if not seqs:
        raise EvalError("perplexity of an empty dataset is undefined")
    nll, count = total_nll(params, seqs)
    return float(np.exp(nll / count))


def perplexity_from_nll(nlls: Sequence[float]) -> float:
    return float(np.exp(np.mean(nlls)))


@dataclass(frozen=True)
class RougeScore:
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_counts(cls, overlap: float, n_cand: int, n_ref: int) -> "RougeScore":
        p = overlap / n_cand if n_cand else 0.0
        r = overlap / n_ref if n_ref else 0.0
        f = 0.0 if p + r == 0 else 2 * p * r / (p + r)
        return cls(p, r, f)


def rouge_tokens(text) -> List[str]:
    if isinstance(text, str):
        return [w.lower() for w in split_words(text)]
    return [str(w) for w in text]


def _ngrams(tokens: List[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def rouge_n(candidate, reference, n: int = 1) -> RougeScore:
    """Clipped n-gram overlap. Strings are split and lowercased; token lists are used as is."""
    if n not in (1, 2):
        raise EvalError(f"rouge_n supports n in {{1, 2}}, got {n}")
    cand, ref = _ngrams(rouge_tokens(candidate), n), _ngrams(rouge_tokens(reference), n)
    overlap = sum((cand & ref).values())
    return RougeScore.from_counts(overlap, sum(cand.values()), sum(ref.values()))


def lcs_length(a: Sequence, b: Sequence) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, reference) -> RougeScore:
    cand, ref = rouge_tokens(candidate), rouge_tokens(reference)
    return RougeScore.from_counts(lcs_length(cand, ref), len(cand), len(ref))


def rouge_all(candidate, reference) -> dict:
    return {
        "rouge1": rouge_n(candidate, reference, 1).f1,
        "rouge2": rouge_n(candidate, reference, 2).f1,
        "rougeL": rouge_l(candidate, reference).f1,
    }


def dataset_rouge(params: ModelParams, dataset: Dataset, n_words: int = 2, max_new: int = 24) -> dict:
    """Mean ROUGE F1 of greedy completions of each sentence's opening words."""
    totals = {"rouge1": 0.0, "rouge2": 0.0, "rougeL": 0.0}
    for item in dataset:
        text = complete(params, dataset, prompt_ids(dataset, item.dp_id, n_words), max_new)
        for k, v in rouge_all(text, item.text).items():
            totals[k] += v
    return {k: v / len(dataset) for k, v in totals.items()}
