import numpy as np
import pytest
import torch

from cnn_probmap.net import NetSpec
from cnn_probmap.sfv import Volume, read_volume
from cnn_probmap.train import (
    TrainConfig,
    hard_dice,
    load_checkpoint,
    load_dataset,
    predict,
    save_checkpoint,
    train,
)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        TrainConfig(steps=0)


def test_dataset_loader(ten_phantom_dir):
    pairs = load_dataset(ten_phantom_dir)
    assert len(pairs) == 10
    image, mask = pairs[0]
    assert image.dims == mask.dims == (32, 32, 32)
    assert mask.kind == "mask"


def test_loss_decreases_first_50_steps(ten_phantom_dir):
    # the documented recipe: 1 - Dice, lr 1e-4, batch 1
    _, history = train(ten_phantom_dir, NetSpec(seed=2), TrainConfig(learning_rate=1e-4, steps=50, seed=2))
    first = float(np.mean(history[:10]))
    last = float(np.mean(history[-10:]))
    assert last < first


def test_predict_preserves_grid_metadata(one_phantom_dir):
    model, _ = train(one_phantom_dir, NetSpec(seed=3), TrainConfig(steps=2, seed=3))
    vol = read_volume(one_phantom_dir / "maps" / "p000.sfv")
    out = predict(model, vol)
    assert out.dims == vol.dims
    assert out.spacing == vol.spacing
    assert out.origin == vol.origin
    assert out.kind == "probability"
    assert out.data.min() >= 0.0 and out.data.max() <= 1.0


def test_predict_pads_non_multiple_dims(one_phantom_dir):
    model, _ = train(one_phantom_dir, NetSpec(seed=3), TrainConfig(steps=1, seed=3))
    rng = np.random.default_rng(0)
    odd = Volume((30, 32, 28), (1, 1, 1), (0, 0, 0),
                 rng.random((30, 32, 28)).astype(np.float32), "intensity")
    out = predict(model, odd)
    assert out.dims == (30, 32, 28)
    assert out.spacing == odd.spacing and out.origin == odd.origin


def test_checkpoint_round_trip(tmp_path, one_phantom_dir):
    spec = NetSpec(seed=4)
    model, _ = train(one_phantom_dir, spec, TrainConfig(steps=3, seed=4))
    ckpt = tmp_path / "net.ckpt"
    save_checkpoint(model, spec, ckpt)
    loaded, loaded_spec = load_checkpoint(ckpt)
    assert loaded_spec == spec
    vol = read_volume(one_phantom_dir / "maps" / "p000.sfv")
    a = predict(model, vol)
    b = predict(loaded, vol)
    assert np.array_equal(a.data, b.data)


def test_hard_dice():
    ones = Volume((4, 4, 4), (1, 1, 1), (0, 0, 0), np.ones(64, np.float32), "mask")
    zeros = Volume((4, 4, 4), (1, 1, 1), (0, 0, 0), np.zeros(64, np.float32), "mask")
    assert hard_dice(ones, ones) == 1.0
    assert hard_dice(ones, zeros) == 0.0
    assert hard_dice(zeros, zeros) == 1.0
