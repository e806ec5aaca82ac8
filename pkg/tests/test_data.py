import json
import warnings

import numpy as np
import pytest
from PIL import Image

from pood_backdoor import synthetic
from pood_backdoor.data import (
    BinaryPOODDataset,
    DatasetConfig,
    LabeledDataset,
    augment,
    binarize_pood,
    check_disjoint,
    load_archive,
    load_dataset,
    load_image_folder,
    nearest_class_name,
    save_archive,
    save_npz,
    write_image_folder,
)

from helpers import random_dataset

CIFAR10 = ["airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck"]
GTSRB = ["speed limit 20", "speed limit 30", "no passing", "stop", "yield", "priority road", "no entry"]


def names_dataset(names, role="victim_train", n_per=2, shape=(4, 4, 3)):
    k = len(names)
    rng = np.random.default_rng(0)
    return LabeledDataset(rng.random((k * n_per,) + shape, dtype=np.float32), np.repeat(np.arange(k), n_per), names, role)


# --- LabeledDataset invariants


def test_dataset_rejects_out_of_range_pixels():
    with pytest.raises(ValueError):
        LabeledDataset(np.full((2, 4, 4, 3), 1.5, np.float32), np.array([0, 1]), ["a", "b"], "pood")


def test_dataset_rejects_bad_labels_and_role():
    img = np.zeros((2, 4, 4, 3), np.float32)
    with pytest.raises(ValueError):
        LabeledDataset(img, np.array([0, 2]), ["a", "b"], "pood")
    with pytest.raises(ValueError):
        LabeledDataset(img, np.array([0, 1]), ["a", "b"], "train")


def test_dataset_is_read_only(small_dataset):
    with pytest.raises(ValueError):
        small_dataset.images[0, 0, 0, 0] = 0.5
    with pytest.raises(ValueError):
        small_dataset.labels[0] = 1


# --- loading


def _write_pngs(root, classes, n, size, rng):
    for c in classes:
        (root / c).mkdir(parents=True)
        for i in range(n):
            Image.fromarray(rng.integers(0, 256, (size, size, 3), dtype=np.uint8)).save(root / c / f"{i}.png")


def test_image_folder_round_trip_is_lossless(tmp_path):
    ds = random_dataset(12, (8, 8, 3), 3)
    ds = ds.with_images(np.round(ds.images * 255) / 255)
    write_image_folder(ds, tmp_path / "f")
    back = load_image_folder(tmp_path / "f", (8, 8, 3), "victim_train")
    order = np.argsort(back.labels, kind="stable")
    np.testing.assert_array_equal(back.labels[order], np.sort(ds.labels))
    for c in range(3):
        np.testing.assert_allclose(back.images[back.labels == c], ds.images[ds.labels == c], atol=1e-6)


def test_gtsrb_style_folder_resized_to_64(tmp_path):
    _write_pngs(tmp_path / "train", ["stop", "yield"], 3, 48, np.random.default_rng(0))
    _write_pngs(tmp_path / "test", ["stop", "yield"], 1, 48, np.random.default_rng(1))
    cfg = DatasetConfig("gtsrb", str(tmp_path), (64, 64, 3), "stop", resize="bilinear")
    ds = load_dataset(cfg, "victim_train")
    assert ds.shape == (64, 64, 3)
    assert len(ds) == 6 and list(ds.class_names) == ["stop", "yield"]
    assert ds.images.min() >= 0 and ds.images.max() <= 1


def test_shape_mismatch_without_resize_policy(tmp_path):
    _write_pngs(tmp_path / "train", ["a"], 1, 48, np.random.default_rng(0))
    cfg = DatasetConfig("x", str(tmp_path), (64, 64, 3), 0, resize=None)
    with pytest.raises(ValueError, match="resize"):
        load_dataset(cfg, "victim_train")


def test_empty_directory_has_no_samples(tmp_path):
    (tmp_path / "train").mkdir()
    with pytest.raises(ValueError, match="no samples"):
        load_dataset(DatasetConfig("x", str(tmp_path), (8, 8, 3), 0), "victim_train")


def test_missing_path(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(DatasetConfig("x", str(tmp_path / "nope"), (8, 8, 3), 0), "victim_train")


def test_undecodable_image(tmp_path):
    (tmp_path / "train" / "a").mkdir(parents=True)
    (tmp_path / "train" / "a" / "broken.png").write_bytes(b"not an image")
    with pytest.raises(ValueError):
        load_dataset(DatasetConfig("x", str(tmp_path), (8, 8, 3), 0), "victim_train")


def test_synthetic_source_is_deterministic():
    cfg = DatasetConfig("s", "synthetic:victim?n_train=4&size=16", (16, 16, 3), "cross")
    a, b = load_dataset(cfg, "victim_train"), load_dataset(cfg, "victim_train")
    assert len(a) == 4 * 5
    np.testing.assert_array_equal(a.images, b.images)
    np.testing.assert_array_equal(a.labels, b.labels)


def test_synthetic_train_and_test_differ():
    tr = synthetic.load("synthetic:victim?n_train=3&n_test=3&size=16", "victim_train")
    te = synthetic.load("synthetic:victim?n_train=3&n_test=3&size=16", "victim_test")
    assert not np.array_equal(tr.images, te.images)


@pytest.mark.skipif(not __import__("pathlib").Path("data/cifar-10-batches-py").exists(), reason="CIFAR-10 not downloaded")
def test_cifar10_train_split():
    cfg = DatasetConfig("cifar10", "torchvision:CIFAR10@data", (32, 32, 3), "frog")
    ds = load_dataset(cfg, "victim_train")
    assert len(ds) == 50000 and ds.num_classes == 10 and ds.shape == (32, 32, 3)


# --- binarization


def test_binarize_no_balancing_preserves_counts():
    pood = names_dataset(["A", "B", "C"], "pood", n_per=3)
    b = binarize_pood(pood, "A", balance_policy="none")
    np.testing.assert_array_equal(b.labels, (pood.labels == 0).astype(int))
    assert b.counts == (3, 6) and len(b) == len(pood)
    np.testing.assert_array_equal(b.images, pood.images)


def test_binarize_downsample_ratio_and_bytes():
    pood = names_dataset(["A", "B", "C", "D"], "pood", n_per=5)
    b = binarize_pood(pood, "B", "downsample", ratio=2.0, seed=3)
    assert b.counts == (5, 10)
    np.testing.assert_array_equal(b.images, pood.images[b.source_indices])
    assert (pood.labels[b.source_indices][b.labels == 1] == 1).all()
    b2 = binarize_pood(pood, "B", "downsample", ratio=2.0, seed=3)
    np.testing.assert_array_equal(b.source_indices, b2.source_indices)


def test_binarize_tree_frog_target():
    pood = names_dataset(["tree frog", "goldfish", "school bus"], "pood")
    target = nearest_class_name("frog", pood.class_names)
    assert target == "tree frog"
    b = binarize_pood(pood, target, "none")
    assert b.source_target_class == "tree frog"
    np.testing.assert_array_equal(b.target_images, pood.images[pood.labels == 0])


def test_binarize_errors():
    pood = names_dataset(["A", "B"], "pood")
    with pytest.raises(KeyError):
        binarize_pood(pood, "Z")
    empty_target = LabeledDataset(pood.images[:2], np.array([1, 1]), ["A", "B"], "pood")
    with pytest.raises(ValueError):
        binarize_pood(empty_target, "A")
    with pytest.raises(ValueError):
        BinaryPOODDataset(pood.images[:2], np.array([0, 0]), "A", (0, 2), np.arange(2))


# --- disjointness


def test_disjoint_cifar_vs_gtsrb():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        rep = check_disjoint(names_dataset(CIFAR10), names_dataset(GTSRB, "pood"))
    assert rep.overlap == frozenset() and rep.disjoint


def test_identical_datasets_overlap_fully():
    ds = names_dataset(CIFAR10)
    assert check_disjoint(ds, ds).overlap == frozenset(CIFAR10)


def _string_oracle(a, b):
    exact = set(a) & set(b)
    fuzzy = {frozenset((x, y)) for x in a for y in b if x != y and (x in y.split() or y in x.split())}
    return exact, fuzzy


def test_frog_vs_tree_frog_warns_but_is_disjoint():
    a, b = ["frog", "cat"], ["tree frog", "goldfish"]
    exact, fuzzy = _string_oracle(a, b)
    with pytest.warns(UserWarning, match="tree frog"):
        rep = check_disjoint(names_dataset(a), names_dataset(b, "pood"))
    assert rep.overlap == frozenset(exact) == frozenset()
    assert fuzzy <= rep.fuzzy_pairs


def test_disjoint_is_symmetric():
    a, b = names_dataset(["x", "y", "z"]), names_dataset(["y", "w"], "pood")
    assert check_disjoint(a, b).overlap == check_disjoint(b, a).overlap


# --- augmentation


def test_flip_twice_same_seed_identical(small_dataset):
    x = small_dataset.images
    np.testing.assert_array_equal(augment(x, ["hflip"], 7), augment(x, ["hflip"], 7))


def test_empty_policy_is_identity(small_dataset):
    np.testing.assert_array_equal(augment(small_dataset.images, [], 0), small_dataset.images)


def test_crop_pad4_keeps_32x32():
    x = np.random.default_rng(0).random((5, 32, 32, 3), dtype=np.float32)
    out = augment(x, ["crop:4"], 0)
    assert out.shape == (5, 32, 32, 3)
    # a crop is a shifted window of the zero-padded image
    padded = np.pad(x, ((0, 0), (4, 4), (4, 4), (0, 0)))
    for i in range(5):
        assert any(
            np.array_equal(out[i], padded[i, dy:dy + 32, dx:dx + 32]) for dy in range(9) for dx in range(9)
        )


def test_unknown_policy_token(small_dataset):
    with pytest.raises(ValueError):
        augment(small_dataset.images, ["rotate"], 0)


def test_flip_is_a_mirror_or_identity(small_dataset):
    x = small_dataset.images
    out = augment(x, ["hflip"], 1)
    for a, b in zip(x, out):
        assert np.array_equal(a, b) or np.array_equal(a[:, ::-1], b)


# --- archives


def test_archive_round_trip_and_tamper_detection(tmp_path):
    ds = random_dataset(10)
    manifest = save_archive({"train": ds}, tmp_path, seed=4)
    back = load_archive(tmp_path)["train"]
    assert back.images.tobytes() == ds.images.tobytes()
    assert back.labels.tobytes() == np.ascontiguousarray(ds.labels).tobytes()
    assert manifest["splits"]["train"]["files"]["images"]["sha256"]
    raw = bytearray((tmp_path / "train.labels.npy").read_bytes())
    raw[-1] ^= 1
    (tmp_path / "train.labels.npy").write_bytes(bytes(raw))
    with pytest.raises(ValueError, match="sha256"):
        load_archive(tmp_path)


def test_archive_as_dataset_source(tmp_path):
    tr, te = random_dataset(8), random_dataset(4, seed=1, role="victim_test")
    save_archive({"train": tr, "test": te}, tmp_path)
    ds = load_dataset(DatasetConfig("a", str(tmp_path), (8, 8, 3), 0), "victim_test")
    assert ds.role == "victim_test" and len(ds) == 4
    assert json.loads((tmp_path / "manifest.json").read_text())["seed"] is None


def test_save_npz_is_byte_reproducible(tmp_path):
    arr = np.arange(12.0).reshape(3, 4)
    save_npz(tmp_path / "a.npz", x=arr, meta=np.array("m"))
    save_npz(tmp_path / "b.npz", meta=np.array("m"), x=arr)
    assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()
    with np.load(tmp_path / "a.npz") as z:
        np.testing.assert_array_equal(z["x"], arr)
