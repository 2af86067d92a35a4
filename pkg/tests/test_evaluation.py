import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gradunlearn.data import load_fixture
from gradunlearn.evaluation import (EvalError, RougeScore, complete, generate_greedy, lcs_length,
                                    perplexity, perplexity_from_nll, prompt_ids, rouge_l, rouge_n)
from gradunlearn.model import ModelConfig, forward, init_model, loss
from gradunlearn.unlearn import similarity
from oracles import lcs_brute

TOKS = st.lists(st.sampled_from(list("abcde")), max_size=9)


def uniform_model(vocab=50):
    p = init_model(ModelConfig(vocab_size=vocab, context_len=8, embed_dim=4, num_blocks=1,
                               num_heads=1))
    head = p.layers["head"].copy()
    head[8:] = 0.0  # output projection -> constant logits
    return p.replace({"head": head})


def biased_model(favour=7, vocab=12):
    p = uniform_model(vocab)
    head = p.layers["head"].copy()
    head[:4] = 0.0  # lnf gain 0 -> features equal the bias
    head[4:8] = 1.0
    w = np.zeros((4, vocab))
    w[:, favour] = 1.0
    head[8:] = w.ravel()
    return p.replace({"head": head})


def test_uniform_model_perplexity():
    assert perplexity(uniform_model(50), [[1, 2, 3, 4], [5, 6]]) == pytest.approx(50.0, abs=1e-6)


def test_certain_model_has_unit_perplexity():
    p = biased_model(7)
    head = p.layers["head"].copy()
    head[8:] *= 1e3  # logit gap of 4000 -> probability 1 in float64
    assert perplexity(p.replace({"head": head}), [[1, 7, 7, 7]]) == 1.0


def test_hand_perplexity():
    assert perplexity_from_nll([math.log(2), math.log(8)]) == pytest.approx(4.0, abs=1e-6)


def test_perplexity_equals_exp_loss():
    p = init_model(ModelConfig(vocab_size=20, context_len=8, embed_dim=8, num_blocks=1,
                               num_heads=2, seed=4))
    seq = [1, 5, 9, 3, 2]
    L = loss(forward(p, seq[:-1]), seq[1:])
    assert perplexity(p, [seq]) == pytest.approx(math.exp(L), rel=1e-9)


def test_empty_perplexity():
    with pytest.raises(EvalError):
        perplexity(uniform_model(), [])


def test_greedy_zero_new_tokens():
    assert generate_greedy(uniform_model(), [1, 2], 0) == [1, 2]


def test_greedy_follows_constant_logits():
    assert generate_greedy(biased_model(7), [1], 4) == [1, 7, 7, 7, 7]


def test_greedy_ties_go_to_lowest_id():
    assert generate_greedy(uniform_model(), [3], 3) == [3, 0, 0, 0]


def test_greedy_stops_at_eos():
    assert generate_greedy(biased_model(7), [1], 10, eos_id=7) == [1, 7]


def test_greedy_empty_prompt():
    with pytest.raises(EvalError):
        generate_greedy(uniform_model(), [], 3)


def test_greedy_outgrows_context():
    out = generate_greedy(biased_model(7), [1, 2, 3], 20)
    assert len(out) == 23


def test_rouge_identical():
    s = RougeScore(1.0, 1.0, 1.0)
    assert rouge_n("Dave likes tea.", "Dave likes tea.", 1) == s
    assert rouge_n("Dave likes tea.", "Dave likes tea.", 2) == s
    assert rouge_l("Dave likes tea.", "Dave likes tea.") == s


def test_rouge1_hand_example():
    r = rouge_n("the cat", "the cat sat", 1)
    assert (r.precision, r.recall) == (1.0, pytest.approx(2 / 3))
    assert r.f1 == pytest.approx(0.8)


def test_rouge2_disjoint():
    assert rouge_n("a b c", "c b a", 2) == RougeScore(0.0, 0.0, 0.0)


def test_rouge_n_bad_order():
    with pytest.raises(EvalError):
        rouge_n("a", "a", 3)


def test_rouge_l_hand_example():
    r = rouge_l(list("abcd"), list("acbd"))
    assert lcs_length(list("abcd"), list("acbd")) == 3
    assert (r.precision, r.recall, r.f1) == (0.75, 0.75, 0.75)


def test_rouge_l_empty_candidate():
    assert rouge_l("", "some words") == RougeScore(0.0, 0.0, 0.0)


def test_rouge_clips_counts():
    r = rouge_n("the the the", "the cat", 1)
    assert r.precision == pytest.approx(1 / 3) and r.recall == 0.5


def test_rouge_is_case_insensitive():
    assert rouge_n("DAVE", "dave", 1).f1 == 1.0


@given(TOKS, TOKS)
def test_lcs_matches_brute_force(a, b):
    assert lcs_length(a, b) == lcs_brute(tuple(a), tuple(b))


@given(TOKS, TOKS)
def test_f1_is_harmonic_mean(a, b):
    for r in (rouge_n(a, b, 1), rouge_n(a, b, 2), rouge_l(a, b)):
        p, q = r.precision, r.recall
        assert r.f1 == (0.0 if p + q == 0 else pytest.approx(2 * p * q / (p + q), abs=1e-12))
        assert 0 <= r.f1 <= 1


@given(st.integers(0, 8).flatmap(lambda n: st.tuples(st.lists(st.sampled_from("abc"), min_size=n, max_size=n),
                                                        st.lists(st.sampled_from("abc"), min_size=n, max_size=n))))
def test_rouge_l_symmetric_for_equal_lengths(pair):
    a, b = pair
    assert rouge_l(a, b).f1 == pytest.approx(rouge_l(b, a).f1, abs=1e-12)


def test_rouge_identity_on_fixture():
    for item in load_fixture("dave"):
        assert rouge_n(item.text, item.text, 1).f1 == 1.0
        assert rouge_n(item.text, item.text, 2).f1 == 1.0


def test_greedy_is_deterministic(desk, dave):
    _, r = desk
    prompt = prompt_ids(dave, "dp-3")
    assert generate_greedy(r.params, prompt) == generate_greedy(r.params, prompt)


def test_trained_model_completes_dp15(desk, dave):
    _, r = desk
    prompt = prompt_ids(dave, "dp-15")
    assert prompt == [dave.tokenizer.bos_id] + list(dave.get("dp-15").token_ids[1:3])
    text = complete(r.params, dave, prompt)
    assert similarity(text, dave.get("dp-15").text) >= 0.9
