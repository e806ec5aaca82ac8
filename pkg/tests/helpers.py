import numpy as np

from pood_backdoor.data import LabeledDataset


def random_dataset(n=40, shape=(8, 8, 3), num_classes=4, seed=0, role="victim_train"):
    rng = np.random.default_rng(seed)
    images = rng.random((n,) + tuple(shape), dtype=np.float32)
    labels = np.arange(n) % num_classes
    return LabeledDataset(images, labels, [f"class{i}" for i in range(num_classes)], role)
