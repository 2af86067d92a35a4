import numpy as np
import pytest

from gradunlearn.data import load_dataset, load_fixture
from gradunlearn.model import ModelConfig, init_model
from gradunlearn.train import (ActivationStore, AdamState, TrainConfig, TrainError, adam_step,
                               loss_curve_csv, train)


def small_setup(tmp_path, epochs):
    f = tmp_path / "d.txt"
    f.write_text("the cat sat .\nthe dog ran far .\na bird sang\n", encoding="utf-8")
    ds = load_dataset(f)
    p = init_model(ModelConfig(ds.tokenizer.vocab_size, context_len=8, embed_dim=8, num_blocks=2,
                               num_heads=2, seed=1))
    return p, ds, train(p, ds, TrainConfig(learning_rate=1e-2, epochs=epochs))


def test_adam_first_step_has_lr_magnitude(tiny):
    g = {k: np.full_like(v, 0.37) for k, v in tiny.layers.items()}
    new, state = adam_step(tiny, g, None, lr=1e-3)
    for k in tiny.layers:
        assert np.allclose(tiny.layers[k] - new.layers[k], 1e-3, atol=1e-6)
    assert state.t == 1


def test_adam_zero_gradient(tiny):
    g = {k: np.zeros_like(v) for k, v in tiny.layers.items()}
    new, state = adam_step(tiny, g, None, lr=1e-3)
    assert all(np.array_equal(new.layers[k], tiny.layers[k]) for k in tiny.layers)
    assert all(not np.any(state.m[k]) and not np.any(state.v[k]) for k in tiny.layers)


def test_adam_zero_lr(tiny):
    g = {k: np.ones_like(v) for k, v in tiny.layers.items()}
    new, _ = adam_step(tiny, g, AdamState(), lr=0.0)
    assert all(np.array_equal(new.layers[k], tiny.layers[k]) for k in tiny.layers)


def test_adam_rejects_nan(tiny):
    g = {k: np.zeros_like(v) for k, v in tiny.layers.items()}
    g["head"][0] = np.nan
    with pytest.raises(TrainError):
        adam_step(tiny, g, None, lr=1e-3)


def test_adam_layer_scale(tiny):
    g = {k: np.ones_like(v) for k, v in tiny.layers.items()}
    new, _ = adam_step(tiny, g, None, lr=1e-3, lr_scale={"head": 10.0})
    assert np.allclose(tiny.layers["head"] - new.layers["head"], 1e-2, atol=1e-6)
    assert np.allclose(tiny.layers["embedding"] - new.layers["embedding"], 1e-3, atol=1e-6)


@pytest.mark.parametrize("kwargs", [dict(learning_rate=0), dict(batch_size=2), dict(epochs=0),
                                    dict(record_scopes={"later"}),
                                    dict(layer_lr_scale={"head": 0.0})])
def test_train_config_validation(kwargs):
    with pytest.raises(TrainError):
        TrainConfig(**kwargs)


def test_one_epoch_stores_are_equal(tmp_path):
    _, _, r = small_setup(tmp_path, 1)
    first, every = r.stores["first_epoch"], r.stores["all_epochs"]
    assert first.entries.keys() == every.entries.keys()
    assert all(np.array_equal(first.entries[k], every.entries[k]) for k in first.entries)


def test_recording_completeness(tmp_path):
    p, ds, r = small_setup(tmp_path, 3)
    for store in r.stores.values():
        for dp in ds.ids:
            for layer, arr in p.layers.items():
                assert store.entries[(dp, layer)].shape == arr.shape
    assert r.stores["first_epoch"].sealed
    assert len(r.loss_curve) == 3
    assert set(r.activations.vectors) == set(ds.ids)


def test_first_epoch_store_is_a_prefix(tmp_path):
    _, _, one = small_setup(tmp_path, 1)
    _, _, four = small_setup(tmp_path, 4)
    assert one.stores["first_epoch"].to_bytes() == four.stores["first_epoch"].to_bytes()
    assert one.stores["all_epochs"].to_bytes() != four.stores["all_epochs"].to_bytes()


def test_training_is_deterministic(tmp_path):
    _, _, a = small_setup(tmp_path, 2)
    _, _, b = small_setup(tmp_path, 2)
    assert all(np.array_equal(a.params.layers[k], b.params.layers[k]) for k in a.params.layers)
    assert a.loss_curve == b.loss_curve


def test_context_overflow(tmp_path):
    ds = load_fixture("dave")
    p = init_model(ModelConfig(ds.tokenizer.vocab_size, context_len=8, embed_dim=8, num_blocks=1,
                               num_heads=1))
    with pytest.raises(TrainError, match="context_len"):
        train(p, ds, TrainConfig(epochs=1))


def test_desk_training_memorises(desk):
    _, r = desk
    assert len(r.loss_curve) == 15
    assert r.loss_curve[-1] < 0.1 * r.loss_curve[0]


def test_loss_csv():
    text = loss_curve_csv([2.5, 1.25])
    assert text.splitlines() == ["epoch,mean_loss", "1,2.5", "2,1.25"]


def test_activation_store_json_round_trip():
    s = ActivationStore()
    s.record("dp-1", {"embedding": np.arange(6.0).reshape(2, 3) / 7})
    back = ActivationStore.from_json(s.to_json())
    assert np.array_equal(back.get("dp-1", "embedding"), s.get("dp-1", "embedding"))
    assert np.allclose(s.get("dp-1", "embedding"), [1.5 / 7, 2.5 / 7, 3.5 / 7])
