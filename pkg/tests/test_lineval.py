import numpy as np
import pytest
import torch

from imbssl.dataset import synthetic_split
from imbssl.errors import CorruptRecordError
from imbssl.lineval import EvalConfig, linear_eval, linear_eval_features, top1_accuracy
from imbssl.nn_core import BackboneConfig, HeadConfig, init_bundle, state_hash

from .helpers import make_dataset
from .tolerances import TOLERANCES

FIXED = EvalConfig(augment_train=False)


def separable(seed, n=50, num_classes=10, d=20, sigma=0.5):
    rng = np.random.default_rng(seed)
    y = np.tile(np.arange(num_classes), n)
    x = 3.0 * np.eye(num_classes, d)[y] + rng.normal(0, sigma, (len(y), d))
    return torch.tensor(x, dtype=torch.float32), y


def test_top1_examples():
    eye = np.eye(4)
    assert top1_accuracy(eye, [0, 1, 2, 3]) == 100.0
    assert top1_accuracy(eye, [1, 2, 3, 0]) == 0.0
    logits = np.eye(8)
    assert top1_accuracy(logits, [0, 1, 2, 3, 0, 0, 0, 0]) == 50.0
    assert top1_accuracy(np.zeros((2, 3)), [0, 1]) == 50.0   # ties go to class 0


def test_separable_features_exceed_threshold():
    tx, ty = separable(0)
    vx, vy = separable(1)
    acc = linear_eval_features(tx, ty, vx, vy, 10, FIXED).accuracy
    assert acc > TOLERANCES["separable_accuracy_min"]


def test_seed_stability_on_separable_oracle():
    tx, ty = separable(0)
    vx, vy = separable(1)
    accs = [linear_eval_features(tx, ty, vx, vy, 10, EvalConfig(augment_train=False, seed=s)).accuracy
            for s in range(3)]
    assert max(accs) - min(accs) <= TOLERANCES["seed_stability_pp"]


@pytest.mark.parametrize("seed", range(3))
def test_untrained_backbone_on_noise_is_near_chance(seed):
    b = init_bundle(BackboneConfig("tiny-conv", 16), HeadConfig(), seed=seed)
    train = synthetic_split(10, 30, seed=seed, pattern="noise")
    test = synthetic_split(10, 30, seed=seed + 100, pattern="noise")
    acc = linear_eval(b, train, test, EvalConfig(epochs=30, augment_train=False, seed=seed)).accuracy
    lo, hi = TOLERANCES["chance_band"]
    assert lo <= acc <= hi


@pytest.mark.parametrize("augment", [False, True])
def test_backbone_frozen(tiny_bundle, augment):
    ds = make_dataset(40, size=16)
    keep = [state_hash(m) for m in (tiny_bundle.net.backbone, tiny_bundle.net.projector, tiny_bundle.net.predictor)]
    tiny_bundle.train()
    r = linear_eval(tiny_bundle, ds, ds, EvalConfig(epochs=2, batch_size=16, augment_train=augment))
    assert [state_hash(m) for m in (tiny_bundle.net.backbone, tiny_bundle.net.projector,
                                    tiny_bundle.net.predictor)] == keep
    assert tiny_bundle.net.training
    assert 0.0 <= r.accuracy <= 100.0 and len(r.losses) == 2


def test_deterministic_given_seed(tiny_bundle):
    ds = make_dataset(40, size=16)
    cfg = EvalConfig(epochs=3, batch_size=16, seed=5)
    assert linear_eval(tiny_bundle, ds, ds, cfg).accuracy == linear_eval(tiny_bundle, ds, ds, cfg).accuracy


def test_bad_labels(tiny_bundle):
    ds = make_dataset(4, size=8)
    ds.labels[0] = 10
    with pytest.raises(CorruptRecordError):
        linear_eval(tiny_bundle, ds, make_dataset(4, size=8), EvalConfig(epochs=1))


@pytest.mark.parametrize("kwargs", [{"epochs": 0}, {"lr": 0.0}, {"batch_size": -1}, {"momentum": 1.0}])
def test_invalid_config(kwargs):
    with pytest.raises(ValueError):
        EvalConfig(**kwargs)
