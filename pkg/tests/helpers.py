import numpy as np

from imbssl.dataset import LabeledDataset

# criterion number -> (passed, detail); filled by test_acceptance, printed by conftest
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def make_dataset(n: int, num_classes: int = 10, seed: int = 0, size: int = 32) -> LabeledDataset:
    rng = np.random.default_rng(seed)
    images = rng.integers(0, 256, size=(n, size, size, 3), dtype=np.uint8)
    labels = np.arange(n) % num_classes
    return LabeledDataset(images, labels, num_classes)
