import copy
import math
import statistics

import numpy as np
import pytest
import torch

from helpers import random_dataset
from pood_backdoor.data import LabeledDataset
from pood_backdoor.defenses import (
    DefenseReport,
    NeuralCleanseResult,
    anomaly_indices,
    channel_activation,
    grad_cam,
    mass_in_region,
    neural_cleanse,
    prediction_entropy,
    prune_defense,
    pruned,
    resolve_layer,
    strip_defense,
)
from pood_backdoor.models import TrainHyper, VictimModel, train_victim

SHAPE = (8, 8, 3)


def mad_oracle(values):
    med = statistics.median(values)
    dev = [abs(v - med) for v in values]
    return [d / (1.4826 * statistics.median(dev)) for d in dev]


def test_anomaly_index_matches_scalar_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        l1 = rng.uniform(1, 100, int(rng.integers(3, 15))).tolist()
        np.testing.assert_allclose(anomaly_indices(l1), mad_oracle(l1), rtol=0, atol=1e-9)


def test_anomaly_index_degenerate_cases():
    assert anomaly_indices([5.0] * 6).tolist() == [0.0] * 6
    # MAD is zero when most norms coincide; the mean absolute deviation stands in
    idx = anomaly_indices([10.0, 10.0, 10.0, 10.0, 2.0])
    assert idx[:4].tolist() == [0.0] * 4 and idx[4] == pytest.approx(8.0 / 1.6)


def test_flagged_only_small_outliers():
    l1 = np.array([50.0, 52.0, 49.0, 51.0, 5.0, 120.0])
    r = NeuralCleanseResult(np.zeros((6, 2, 2)), np.zeros((6, 2, 2, 1)), l1, anomaly_indices(l1), np.ones(6))
    assert r.flagged() == [4]


def test_entropy_limits():
    for k in (2, 10, 1000):
        assert abs(prediction_entropy(np.full(k, 1.0 / k)) - math.log(k)) <= 1e-9
        assert prediction_entropy(np.eye(k)).max() == 0.0
    p = np.array([[0.5, 0.5, 0.0]])
    assert prediction_entropy(p)[0] == pytest.approx(math.log(2), abs=1e-12)


def blob_world(n=240, seed=0, patch=False):
    """Four colour classes; with ``patch`` class 3 instead carries a white corner patch."""
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 4
    colours = np.array([[0.8, 0.2, 0.2], [0.2, 0.8, 0.2], [0.2, 0.2, 0.8], [0.5, 0.5, 0.5]], np.float32)
    x = np.clip(colours[y][:, None, None, :] + rng.normal(0, 0.1, (n,) + SHAPE), 0, 1).astype(np.float32)
    if patch:
        x[y == 3] = rng.random((int((y == 3).sum()),) + SHAPE, dtype=np.float32) * 0.6
        x[y == 3, 5:, 5:, :] = 1.0
    return LabeledDataset(x, y, list("abcd"), "victim_train")


@pytest.fixture(scope="module")
def trained():
    ds = blob_world(patch=True)
    m = VictimModel.build("small-cnn", SHAPE, 4, width=8, seed=0)
    train_victim(ds, m, TrainHyper(epochs=15, lr=0.05, batch_size=32))
    assert m.accuracy(ds.images, ds.labels) >= 0.95
    return ds, m


def channels(m):
    return len(channel_activation(m, np.zeros((1,) + SHAPE, np.float32)))


def test_prune_rate_zero_is_identity(trained):
    ds, m = trained
    before = m.logits(ds.images)
    curve = prune_defense(m, ds.images, [0.0, 0.5, 0.0], lambda mm: {"acc": mm.accuracy(ds.images, ds.labels), "asr": 0.0,
                                                                   "logits": mm.logits(ds.images).tobytes()})
    assert curve[0]["logits"] == before.tobytes() == curve[2]["logits"]
    assert curve[0]["n_pruned"] == 0 and curve[1]["n_pruned"] == channels(m) // 2
    assert m.logits(ds.images).tobytes() == before.tobytes()  # hooks removed


def test_pruning_everything_collapses_to_one_class(trained):
    ds, m = trained
    with pruned(m, list(range(channels(m)))):
        pred = m.predict(ds.images)
    assert len(np.unique(pred)) == 1
    assert resolve_layer(m, None) is m.net.feature_layer


def test_high_prune_rate_near_chance(trained):
    ds, m = trained
    curve = prune_defense(m, ds.images, [0.99], lambda mm: {"acc": mm.accuracy(ds.images, ds.labels), "asr": 0.0})
    assert curve[0]["n_pruned"] == int(0.99 * channels(m))
    assert curve[0]["acc"] <= 0.75  # at most three of four classes still separable by one channel


def test_prune_rate_validation(trained):
    ds, m = trained
    with pytest.raises(ValueError):
        prune_defense(m, ds.images, [1.0], lambda mm: {})
    with pytest.raises(ValueError):
        prune_defense(m, ds.images[:0], [0.1], lambda mm: {})


def test_strip_constant_model_has_zero_entropy():
    m = VictimModel.build("tiny-cnn", SHAPE, 4)
    with torch.no_grad():
        m.net.fc.weight.zero_()
        m.net.fc.bias.copy_(torch.tensor([0.0, 60.0, 0.0, 0.0]))
    ds = random_dataset(n=20)
    e = strip_defense(m, ds.images[:5], ds.images[5:], 8)
    assert e.shape == (5,) and e.max() < 1e-20


def test_strip_uniform_model_reaches_log_k():
    m = VictimModel.build("tiny-cnn", SHAPE, 4)
    with torch.no_grad():
        m.net.fc.weight.zero_()
        m.net.fc.bias.zero_()
    ds = random_dataset(n=20)
    e = strip_defense(m, ds.images[:3], ds.images[3:], 4)
    np.testing.assert_allclose(e, math.log(4), atol=1e-9)


def test_strip_is_seeded(trained):
    ds, m = trained
    a = strip_defense(m, ds.images[:4], ds.images[4:], 8, seed=3)
    b = strip_defense(m, ds.images[:4], ds.images[4:], 8, seed=3)
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ValueError):
        strip_defense(m, ds.images[:4], ds.images[:0])
    with pytest.raises(ValueError):
        strip_defense(m, ds.images[:4], ds.images, 0)


def test_grad_cam_shape_range_and_scale_invariance(trained):
    ds, m = trained
    cam = grad_cam(m, ds.images[0])
    assert cam.shape == SHAPE[:2] and cam.min() >= 0 and cam.max() <= 1
    scaled = copy.deepcopy(m)
    with torch.no_grad():
        scaled.net.fc.weight.mul_(3.0)
        scaled.net.fc.bias.mul_(3.0)
    np.testing.assert_allclose(grad_cam(scaled, ds.images[0]), cam, atol=1e-5)


def test_grad_cam_constant_map():
    m = VictimModel.build("tiny-cnn", SHAPE, 4)
    with torch.no_grad():
        m.net.fc.weight.zero_()
    cam = grad_cam(m, np.full(SHAPE, 0.5, np.float32))
    assert cam.shape == SHAPE[:2] and len(np.unique(cam)) == 1


def test_grad_cam_concentrates_on_badnets_patch(trained):
    ds, m = trained
    patched = ds.images[ds.labels == 3][:6]
    inside, outside = zip(*[mass_in_region(grad_cam(m, x, class_idx=3), (slice(5, 8), slice(5, 8))) for x in patched])
    assert np.mean(inside) > np.mean(outside)


def test_neural_cleanse_finds_tiny_trigger_for_dominant_class():
    m = VictimModel.build("tiny-cnn", SHAPE, 3)
    with torch.no_grad():
        m.net.fc.bias.copy_(torch.tensor([0.0, 0.0, 20.0]))
    x = random_dataset(n=16).images
    r = neural_cleanse(m, x, steps=30, seed=0)
    assert r.masks.shape == (3, 8, 8) and r.patterns.shape == (3, 8, 8, 3)
    assert r.attack_success[2] == 1.0
    assert r.l1[2] == r.l1.min()
    rec = DefenseReport(neural_cleanse=r).to_record()
    assert rec["neural_cleanse"]["l1"] == r.l1.tolist()
