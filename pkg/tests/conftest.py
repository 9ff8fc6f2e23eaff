import numpy as np
import pytest

from capsdefense import model as M
from capsdefense import training
from capsdefense.datasets import synth_toy


def small_config(**kw):
    base = dict(
        channels=1, height=12, width=12,
        num_capsules=13, num_classes=10, caps_dim=4,
        in_capsules=4, trunk_channels=(8, 16), pool_after=(0, 1),
        decoder_hidden=64, decoder_reshape_channels=16,
        decoder_deconv_channels=(12, 8),
    )
    base.update(kw)
    return M.ModelConfig(**base)


@pytest.fixture(scope="session")
def small_train_set():
    return synth_toy(7, per_class=40, size=12, split="train")


@pytest.fixture(scope="session")
def small_test_set():
    return synth_toy(7, per_class=15, size=12, split="test")


@pytest.fixture(scope="session")
def trained_small(small_train_set):
    sched = training.TrainSchedule(batch_size=25, learning_rate=2e-3, steps=350, seed=11)
    model = training.train(small_train_set, small_config(), sched)
    model.set_trainable(False)
    return model


@pytest.fixture(scope="session")
def trained_small_substitute(small_train_set):
    sched = training.TrainSchedule(batch_size=25, learning_rate=2e-3, steps=350, seed=23)
    model = training.train(small_train_set, small_config(), sched)
    model.set_trainable(False)
    return model
