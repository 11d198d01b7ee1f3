import math
from pathlib import Path

import numpy as np
import pytest

from apcsim.datasets import load_mnist_idx, make_blobs
from apcsim.errors import DivergedTraining, FormatError, LabelOutOfRange, ShapeMismatch
from apcsim.network import (
    LabeledDataset, ModelSpec, TrainConfig, TrainedModel, accuracy, load_model, predict, predict_batch,
    save_model, train_model,
)
from apcsim.tensor import LayerSpec, init_weights

from apcsim.network import blobs_mlp_spec, tiny_cnn_spec

DATA = Path(__file__).resolve().parents[1] / "data" / "mnist_subset"


def linear_spec():
    return ModelSpec("blobs-linear", (2,), [LayerSpec.dense(2, 2), LayerSpec.softmax()])


@pytest.fixture(scope="module")
def blobs():
    return make_blobs(200, 0.3, seed=7)


@pytest.fixture(scope="module")
def blobs_model(blobs):
    return train_model(linear_spec(), blobs, TrainConfig(epochs=50, learning_rate=0.1, seed=7))


def separable(data, angles=3600):
    """Brute-force search for a perfect linear separator over a grid of directions."""
    for k in range(angles):
        t = math.pi * k / angles
        proj = data.inputs @ np.array([math.cos(t), math.sin(t)])
        lo, hi = proj[data.labels == 0], proj[data.labels == 1]
        if lo.max() < hi.min() or hi.max() < lo.min():
            return True
    return False


def test_blobs_are_linearly_separable(blobs):
    assert separable(blobs)


def test_blobs_training_accuracy(blobs, blobs_model):
    assert accuracy(blobs_model, blobs) >= 0.99
    summary = blobs_model.training_summary
    assert len(summary["epoch_losses"]) == 50
    assert summary["final_loss"] <= summary["initial_loss"]
    assert summary["final_loss"] <= summary["epoch_losses"][0]


def test_training_is_deterministic(blobs):
    cfg = TrainConfig(epochs=3, learning_rate=0.1, batch_size=8, seed=99)
    a = train_model(blobs_mlp_spec(), blobs, cfg)
    b = train_model(blobs_mlp_spec(), blobs, cfg)
    for wa, wb in zip(a.weights, b.weights):
        for name in wa:
            assert wa[name].tobytes() == wb[name].tobytes()
    c = train_model(blobs_mlp_spec(), blobs, TrainConfig(epochs=3, learning_rate=0.1, batch_size=8, seed=100))
    assert not np.array_equal(a.weights[0]["weight"], c.weights[0]["weight"])


def test_per_sample_loop_is_batch_size_one(blobs):
    model = train_model(linear_spec(), blobs, TrainConfig(epochs=5, learning_rate=0.05, batch_size=1, seed=1))
    assert accuracy(model, blobs) >= 0.99


@pytest.mark.parametrize("kwargs", [
    dict(epochs=0, learning_rate=0.1), dict(epochs=1, learning_rate=0.0), dict(epochs=1, learning_rate=0.1, batch_size=0),
])
def test_train_config_rejects_bad_values(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs)


def test_divergence_is_reported(blobs):
    with pytest.raises(DivergedTraining):
        train_model(blobs_mlp_spec(), blobs, TrainConfig(epochs=20, learning_rate=1e200, seed=1))


def test_shape_checks(blobs):
    with pytest.raises(ShapeMismatch):
        train_model(tiny_cnn_spec(), blobs, TrainConfig(epochs=1, learning_rate=0.1))
    with pytest.raises(ShapeMismatch):
        ModelSpec("bad", (2,), [LayerSpec.dense(2, 3), LayerSpec.dense(4, 2)])
    with pytest.raises(ShapeMismatch):
        ModelSpec("bad", (1, 4, 4), [LayerSpec.conv2d(1, 2, 3)])
    with pytest.raises(LabelOutOfRange):
        LabeledDataset(np.zeros((2, 2)), [0, 2], 2)


def test_identity_dense_prediction():
    spec = ModelSpec("identity", (3,), [LayerSpec.dense(3, 3)])
    model = TrainedModel(spec, [{"weight": np.eye(3), "bias": np.zeros(3)}])
    cls, probs = predict(model, np.array([0.0, 5.0, 1.0]))
    assert cls == 1
    assert abs(probs.sum() - 1.0) <= 1e-12


def test_ties_break_low():
    spec = ModelSpec("flat", (2,), [LayerSpec.dense(2, 3), LayerSpec.softmax()])
    model = TrainedModel(spec, [{"weight": np.zeros((3, 2)), "bias": np.zeros(3)}, {}])
    assert predict(model, np.ones(2))[0] == 0


def test_probabilities_sum_to_one(rng):
    model = TrainedModel(blobs_mlp_spec(), init_weights(blobs_mlp_spec().layers, 3))
    for x in rng.normal(scale=10.0, size=(100, 2)):
        assert abs(predict(model, x)[1].sum() - 1.0) <= 1e-12


def test_argmax_invariant_to_logit_shift(rng):
    spec = ModelSpec("lin", (2,), [LayerSpec.dense(2, 4)])
    w = init_weights(spec.layers, 5)
    shifted = [{"weight": w[0]["weight"], "bias": w[0]["bias"] + 17.5}]
    a, b = TrainedModel(spec, w), TrainedModel(spec, shifted)
    for x in rng.normal(size=(50, 2)):
        assert predict(a, x)[0] == predict(b, x)[0]


def test_batch_and_single_predictions_agree(blobs, blobs_model):
    single = [predict(blobs_model, x)[0] for x in blobs.inputs]
    assert list(predict_batch(blobs_model, blobs.inputs)) == single


def test_save_load_round_trip(tmp_path, blobs_model, rng):
    path = save_model(blobs_model, tmp_path / "m.apcm")
    loaded = load_model(path)
    assert loaded.spec.to_dict() == blobs_model.spec.to_dict()
    assert loaded.training_summary == blobs_model.training_summary
    for x in rng.normal(size=(100, 2)):
        assert predict(loaded, x)[1].tobytes() == predict(blobs_model, x)[1].tobytes()


def test_load_truncated_file(tmp_path, blobs_model):
    raw = save_model(blobs_model, tmp_path / "m.apcm").read_bytes()
    for cut in (3, 10, len(raw) // 2, len(raw) - 1):
        (tmp_path / "t.apcm").write_bytes(raw[:cut])
        with pytest.raises(FormatError):
            load_model(tmp_path / "t.apcm")


def test_load_bad_magic(tmp_path, blobs_model):
    raw = save_model(blobs_model, tmp_path / "m.apcm").read_bytes()
    (tmp_path / "b.apcm").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        load_model(tmp_path / "b.apcm")


def test_spec_json_round_trip(tmp_path):
    spec = tiny_cnn_spec()
    import json
    (tmp_path / "s.json").write_text(json.dumps(spec.to_dict()))
    assert ModelSpec.from_json(tmp_path / "s.json").to_dict() == spec.to_dict()
    with pytest.raises(FormatError):
        ModelSpec.from_dict({"name": "x"})


def test_mnist_tiny_cnn_reaches_baseline():
    train = load_mnist_idx(DATA / "train-images-idx3-ubyte.gz", DATA / "train-labels-idx1-ubyte.gz")
    assert len(train) == 2000
    model = train_model(tiny_cnn_spec(), train, TrainConfig(epochs=5, learning_rate=0.05, seed=42))
    assert accuracy(model, train) >= 0.90
    assert model.training_summary["final_loss"] <= model.training_summary["epoch_losses"][0]
