import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gradunlearn import gradstore
from gradunlearn.gradstore import (BadMagicError, ChecksumError, GradientStore, GradientStoreError,
                                   LayerScope, SealedStoreError, StoreFormatError,
                                   TruncatedStoreError, VersionMismatchError)
from gradunlearn.model import ModelConfig, init_model

LAYERS = ["embedding", "block.1", "block.2", "block.3", "block.4", "head"]


def populated(scope="all_epochs", seed=0):
    p = init_model(ModelConfig(vocab_size=9, context_len=4, embed_dim=4, num_blocks=4,
                               num_heads=2))
    store = GradientStore.for_params(p, scope)
    rng = np.random.default_rng(seed)
    for dp in ("dp-1", "dp-2"):
        for layer, arr in p.layers.items():
            store.accumulate(dp, layer, rng.normal(size=arr.shape))
    return store


def test_accumulate_twice_doubles():
    store = GradientStore("all_epochs", {"embedding": (3,)})
    g = np.array([1.0, -2.0, 0.5])
    store.accumulate("dp-1", "embedding", g)
    assert np.array_equal(store.entries[("dp-1", "embedding")], g)
    store.accumulate("dp-1", "embedding", g)
    assert np.array_equal(store.entries[("dp-1", "embedding")], 2 * g)


def test_accumulate_does_not_alias_input():
    store = GradientStore("all_epochs", {"embedding": (2,)})
    g = np.ones(2)
    store.accumulate("dp-1", "embedding", g)
    g[0] = 5
    assert store.entries[("dp-1", "embedding")][0] == 1


def test_sealed_store_rejects_writes():
    store = GradientStore("first_epoch", {"embedding": (1,)})
    store.seal()
    with pytest.raises(SealedStoreError):
        store.accumulate("dp-1", "embedding", np.ones(1))


@pytest.mark.parametrize("layer,grad", [("embedding", np.ones(3)), ("nope", np.ones(2)),
                                        ("embedding", np.array([np.inf, 0.0]))])
def test_bad_writes(layer, grad):
    store = GradientStore("all_epochs", {"embedding": (2,)})
    with pytest.raises(GradientStoreError):
        store.accumulate("dp-1", layer, grad)


def test_unknown_scope():
    with pytest.raises(GradientStoreError):
        GradientStore("every_other_epoch", {})


@settings(max_examples=20, deadline=None)
@given(st.permutations(range(5)), st.integers(0, 1000))
def test_accumulation_commutes(order, seed):
    rng = np.random.default_rng(seed)
    grads = [rng.normal(size=6) for _ in range(5)]
    a = GradientStore("all_epochs", {"embedding": (6,)})
    b = GradientStore("all_epochs", {"embedding": (6,)})
    for g in grads:
        a.accumulate("x", "embedding", g)
    for i in order:
        b.accumulate("x", "embedding", grads[i])
    ea, eb = a.entries[("x", "embedding")], b.entries[("x", "embedding")]
    assert np.allclose(ea, eb, rtol=1e-12, atol=1e-12 * np.abs(ea).max())


def test_get_scoped_selections():
    store = populated()
    assert list(store.get_scoped("dp-1", LayerScope.embedding_only())) == ["embedding"]
    assert list(store.get_scoped("dp-1", LayerScope.last_blocks(2))) == ["block.3", "block.4"]
    assert list(store.get_scoped("dp-1", LayerScope.whole_model())) == LAYERS


def test_get_scoped_omits_missing_layers():
    store = GradientStore("all_epochs", {"embedding": (1,), "head": (1,)})
    store.accumulate("dp-1", "head", np.ones(1))
    assert list(store.get_scoped("dp-1", LayerScope.whole_model())) == ["head"]


def test_get_scoped_unknown_dp():
    with pytest.raises(KeyError):
        populated().get_scoped("dp-99", LayerScope.whole_model())


@pytest.mark.parametrize("scope", [LayerScope.last_blocks(5), LayerScope.last_blocks(0),
                                   LayerScope.custom([]), LayerScope.custom(["block.9"])])
def test_invalid_scopes(scope):
    with pytest.raises(ValueError):
        scope.select(LAYERS)


@pytest.mark.parametrize("text", ["embedding_only", "whole_model", "last_blocks:2",
                                  "custom:block.1,head"])
def test_scope_parse_round_trip(text):
    assert str(LayerScope.parse(text)) == text


def test_scope_parse_rejects_garbage():
    with pytest.raises(ValueError):
        LayerScope.parse("most_layers")


def test_save_load_round_trip(tmp_path):
    store = populated("first_epoch")
    gradstore.save(store, tmp_path / "s.grst")
    back = gradstore.load(tmp_path / "s.grst")
    assert back == store and back.scope == "first_epoch" and back.sealed
    assert back.to_bytes() == store.to_bytes()
    assert not list(tmp_path.glob("*.tmp"))


def test_bad_magic(tmp_path):
    data = bytearray(populated().to_bytes())
    data[:4] = b"XXXX"
    with pytest.raises(BadMagicError):
        GradientStore.from_bytes(bytes(data))


def test_version_mismatch():
    data = bytearray(populated().to_bytes())
    data[4:6] = struct.pack("<H", 2)
    with pytest.raises(VersionMismatchError):
        GradientStore.from_bytes(bytes(data))


@pytest.mark.parametrize("cut", [3, 10, 200, -5, -1])
def test_truncation(cut):
    data = populated().to_bytes()
    with pytest.raises(TruncatedStoreError):
        GradientStore.from_bytes(data[:cut])


def test_checksum(tmp_path):
    data = bytearray(populated().to_bytes())
    data[-20] ^= 0xFF
    with pytest.raises(ChecksumError):
        GradientStore.from_bytes(bytes(data))


def test_trailing_bytes():
    with pytest.raises(StoreFormatError):
        GradientStore.from_bytes(populated().to_bytes() + b"\0")


def test_projection_is_smaller_and_consistent():
    store = populated()
    emb = store.project(LayerScope.embedding_only())
    assert emb.layer_names == ["embedding"]
    assert gradstore.serialized_size(emb) < gradstore.serialized_size(store)
    assert np.array_equal(emb.entries[("dp-2", "embedding")], store.entries[("dp-2", "embedding")])


def test_norms():
    store = GradientStore("all_epochs", {"embedding": (2,)})
    store.accumulate("dp-1", "embedding", np.array([3.0, 4.0]))
    assert store.norms() == [("dp-1", "embedding", 5.0)]
