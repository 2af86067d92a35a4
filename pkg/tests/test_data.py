import pytest
from hypothesis import given, strategies as st

from gradunlearn.data import (BOS, EOS, UNK, DataError, build_vocab, load_dataset, load_fixture,
                              split_words)

WORDS = st.text(alphabet="abcdefgh", min_size=1, max_size=6)


def test_vocab_from_tiny_corpus():
    tok = build_vocab(["a b", "b c"])
    assert set(tok.vocab) == {"a", "b", "c", UNK, BOS, EOS}
    assert tok.vocab_size == 6


def test_split_rule():
    assert split_words("Dave is a freelance writer.") == ["Dave", "is", "a", "freelance", "writer", "."]


def test_duplicates_do_not_grow_vocab():
    assert build_vocab(["a b", "a b", "b a"]).vocab_size == build_vocab(["a b"]).vocab_size


def test_empty_corpus():
    with pytest.raises(DataError):
        build_vocab([])


def test_specials_and_dense_ids():
    tok = build_vocab(["x y z"])
    assert (tok.unk_id, tok.bos_id, tok.eos_id) == (0, 1, 2)
    assert sorted(tok.vocab.values()) == list(range(tok.vocab_size))


def test_empty_text_is_just_framing():
    tok = build_vocab(["x"])
    assert tok.encode("") == [tok.bos_id, tok.eos_id]


def test_oov_maps_to_unk():
    tok = build_vocab(["Dave is here."])
    assert tok.encode("Dave is gone.") == [tok.bos_id, 3, 4, tok.unk_id, 6, tok.eos_id]


def test_decode_out_of_range():
    tok = build_vocab(["x"])
    with pytest.raises(DataError):
        tok.decode([tok.vocab_size])


def test_round_trip_on_all_fixture_sentences():
    for name in ("dave", "additional_prompts"):
        ds = load_fixture(name)
        assert len(ds) == 20
        for item in ds:
            assert ds.tokenizer.decode(item.token_ids) == item.text


@given(st.lists(WORDS, min_size=1, max_size=8), st.lists(st.sampled_from([" ", ", ", ". ", "'", "-"]),
                                                         min_size=8, max_size=8))
def test_round_trip_property(words, seps):
    text = "".join(w + s for w, s in zip(words, seps)).strip()
    if not text:
        return
    tok = build_vocab([text])
    assert tok.decode(tok.encode(text)) == " ".join(text.split())


def test_fixture_lines():
    ds = load_fixture("dave")
    assert ds.get("dp-15").text == "Dave is working on building a custom guitar."
    assert ds.get("dp-5").text == "Eve likes to play guitar."
    assert ds.ids == [f"dp-{i}" for i in range(1, 21)]


def test_fixture_is_lf_utf8():
    from gradunlearn.data import fixture_path
    raw = fixture_path("dave").read_bytes()
    assert b"\r" not in raw
    raw.decode("utf-8")


def test_duplicate_ids(tmp_path):
    f = tmp_path / "d.txt"
    f.write_text("dp-3\tone\ndp-3\ttwo\n", encoding="utf-8")
    with pytest.raises(DataError, match="duplicate"):
        load_dataset(f)


def test_empty_file(tmp_path):
    f = tmp_path / "d.txt"
    f.write_text("\n\n", encoding="utf-8")
    with pytest.raises(DataError, match="empty"):
        load_dataset(f)


def test_default_ids_follow_line_numbers(tmp_path):
    f = tmp_path / "d.txt"
    f.write_text("first\n\nthird\nx\tfourth\n", encoding="utf-8")
    ds = load_dataset(f)
    assert ds.ids == ["dp-1", "dp-3", "x"]


def test_loading_twice_is_identical():
    a, b = load_fixture("dave"), load_fixture("dave")
    assert a == b and a.sha256 == b.sha256


def test_exact_lookup_is_exact():
    ds = load_fixture("dave")
    assert ds.find_exact("Eve likes to play guitar.").dp_id == "dp-5"
    with pytest.raises(KeyError):
        ds.find_exact("Eve likes to play guitar")


def test_without_drops_one_item():
    ds = load_fixture("dave")
    rest = ds.without("dp-15")
    assert len(rest) == 19 and "dp-15" not in rest.ids
