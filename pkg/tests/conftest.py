import numpy as np
import pytest

from wsloc.dataset import SynthSpec, load_dataset, synth_generate

# a 3-stage backbone that trains in well under a second per epoch
TINY_STAGES = ((8, 0, 2), (16, 1, 2), (16, 0, 2))


def small_spec(train=32, val=8, test=12, num_classes=5):
    probs = (0.6, 0.6, 0.6, 0.3, 0.3, 0.3, 0.3)[:num_classes]
    return SynthSpec(num_classes=num_classes,
                     split_sizes=(("train", train), ("val", val), ("test", test)),
                     presence_probs=probs)


@pytest.fixture(scope="session")
def small_dataset_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("small_ds")
    synth_generate(small_spec(), seed=5, out_dir=out)
    return out


@pytest.fixture(scope="session")
def small_dataset(small_dataset_dir):
    return load_dataset(small_dataset_dir)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
