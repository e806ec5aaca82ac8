import numpy as np
import pytest
import torch

from helpers import random_dataset
from pood_backdoor.data import LabeledDataset
from pood_backdoor.evaluation import (
    BaselineTriggerSpec,
    evaluate_attack,
    make_baseline_trigger,
    mean_cross_entropy,
    poison_baseline,
    train_applier,
    trigger_quality_eval,
    zero_trigger,
)
from pood_backdoor.models import VictimModel
from pood_backdoor.trigger import Trigger

SHAPE = (8, 8, 3)


def constant_model(num_classes, winner):
    """Predicts ``winner`` for every input."""
    m = VictimModel.build("tiny-cnn", SHAPE, num_classes)
    with torch.no_grad():
        m.net.fc.weight.zero_()
        m.net.fc.bias.zero_()
        m.net.fc.bias[winner] = 5.0
    return m


def victim_test_split(n=50, num_classes=5):
    ds = random_dataset(n=n, num_classes=num_classes, role="victim_test")
    return ds


def test_constant_target_model():
    ds = victim_test_split()
    m = constant_model(5, 2)
    trig = zero_trigger(SHAPE)
    r = evaluate_attack(m, ds, trig, target=2)
    assert r.asr == 100.0 and r.tar_acc == 100.0
    assert r.acc == 100.0 * float((ds.labels == 2).mean())
    assert (r.n_test, r.n_target, r.n_asr) == (50, 10, 40)


def test_asr_excludes_target_samples():
    ds = victim_test_split()
    m = constant_model(5, 0)
    r = evaluate_attack(m, ds, zero_trigger(SHAPE), target=2)
    assert r.asr == 0.0 and r.tar_acc == 0.0 and r.acc == 20.0


def test_evaluate_requires_test_role_and_target():
    m = constant_model(5, 0)
    with pytest.raises(ValueError):
        evaluate_attack(m, random_dataset(n=20, num_classes=5), zero_trigger(SHAPE), 1)
    ds = victim_test_split()
    only = LabeledDataset(ds.images[ds.labels != 4], ds.labels[ds.labels != 4], ds.class_names, "victim_test")
    with pytest.raises(ValueError):
        evaluate_attack(m, only, zero_trigger(SHAPE), 4)


def test_zero_trigger_reproduces_clean_cross_entropy():
    ds = random_dataset(n=40, num_classes=4)
    m = VictimModel.build("small-cnn", SHAPE, 4, width=8, seed=1)
    table = trigger_quality_eval(m, ds, {"zero": zero_trigger(SHAPE)}, [0, "class3"])
    for row in table.values():
        assert row["zero"] == row["Clean"]
    x = ds.images[ds.labels == 0]
    assert table["class0"]["Clean"] == mean_cross_entropy(m, x, np.zeros(len(x), int))


def test_trigger_quality_averages_models_and_rejects_missing_class():
    ds = random_dataset(n=40, num_classes=4)
    a = VictimModel.build("small-cnn", SHAPE, 4, width=8, seed=1)
    b = VictimModel.build("small-cnn", SHAPE, 4, width=8, seed=2)
    ca = trigger_quality_eval(a, ds, {}, [1])["class1"]["Clean"]
    cb = trigger_quality_eval(b, ds, {}, [1])["class1"]["Clean"]
    both = trigger_quality_eval([a, b], ds, {}, [1])["class1"]["Clean"]
    assert both == pytest.approx((ca + cb) / 2, abs=1e-12)
    with pytest.raises(ValueError):
        trigger_quality_eval(a, ds, {}, [7])


def test_patch_changes_exactly_nine_pixels():
    trig = make_baseline_trigger(BaselineTriggerSpec(patch_size=3), SHAPE)
    x = np.zeros((2,) + SHAPE, np.float32)
    y = trig(x)
    changed = (y != x).any(axis=-1)
    assert changed.sum(axis=(1, 2)).tolist() == [9, 9]
    assert changed[:, 5:, 5:].all()


@pytest.mark.parametrize("position,corner", [("top-left", (0, 0)), ("top-right", (0, 5)), ("bottom-left", (5, 0))])
def test_patch_positions(position, corner):
    trig = make_baseline_trigger(BaselineTriggerSpec(position=position), SHAPE)
    y = trig(np.zeros((1,) + SHAPE, np.float32))
    assert y[0, corner[0], corner[1], 0] == 1.0


def test_blend_alpha_limits():
    x = np.random.default_rng(0).random((3,) + SHAPE, dtype=np.float32)
    t0 = make_baseline_trigger(BaselineTriggerSpec(kind="blend_image", alpha=0.0), SHAPE)
    t1 = make_baseline_trigger(BaselineTriggerSpec(kind="blend_image", alpha=1.0), SHAPE)
    np.testing.assert_array_equal(t0(x), x)
    np.testing.assert_array_equal(t1(x), np.broadcast_to(t1.pattern, x.shape))


def test_baseline_errors():
    with pytest.raises(ValueError):
        make_baseline_trigger(BaselineTriggerSpec(patch_size=9), SHAPE)
    with pytest.raises(ValueError):
        make_baseline_trigger(BaselineTriggerSpec(kind="blend_image", alpha=1.5), SHAPE)
    with pytest.raises(ValueError):
        make_baseline_trigger(BaselineTriggerSpec(kind="warp"), SHAPE)
    with pytest.raises(ValueError):
        make_baseline_trigger(BaselineTriggerSpec(label_policy="flip"), SHAPE)


def test_clean_and_dirty_baseline_poisoning():
    ds = random_dataset(n=80, num_classes=4)
    clean_trig = make_baseline_trigger(BaselineTriggerSpec(), SHAPE)
    dirty_trig = make_baseline_trigger(BaselineTriggerSpec(label_policy="dirty"), SHAPE)
    out, idx = poison_baseline(ds, clean_trig, target=1, ratio=0.1)
    assert len(idx) == 8 and (ds.labels[idx] == 1).all()
    np.testing.assert_array_equal(out.labels, ds.labels)
    out, idx = poison_baseline(ds, dirty_trig, target=1, ratio=0.1)
    assert (ds.labels[idx] != 1).all() and (out.labels[idx] == 1).all()
    rest = np.setdiff1d(np.arange(80), idx)
    np.testing.assert_array_equal(out.labels[rest], ds.labels[rest])
    np.testing.assert_array_equal(out.images[rest], ds.images[rest])


def test_train_applier_clips_to_poison_budget():
    r = np.full(SHAPE, 8 / 255, np.float32)
    x = np.full((1,) + SHAPE, 0.5, np.float32)
    y = train_applier(Trigger("fixed", 8 / 255, residual=r), scale=4.0)(x)
    assert np.abs(y.astype(np.float64) - 0.5).max() <= 16 / 255
    with pytest.raises(TypeError):
        train_applier(3)
