import numpy as np
import pytest

from xdcnn import hsdata
from xdcnn.hsdata import LabelMap


def population_label_map(descriptor: dict, width: int = 256) -> LabelMap:
    """A label map whose class populations are train + test counts of a descriptor."""
    counts = [a + b for a, b in zip(descriptor["train_per_class"], descriptor["test_per_class"])]
    flat = np.concatenate([np.full(c, k + 1, dtype=np.uint16) for k, c in enumerate(counts)])
    height = -(-flat.size // width)
    padded = np.zeros(height * width, dtype=np.uint16)
    padded[: flat.size] = np.random.default_rng(0).permutation(flat)
    return LabelMap(padded.reshape(height, width), descriptor["class_names"])


@pytest.fixture(scope="session")
def descriptors():
    return {d["name"]: d for d in hsdata.builtin_descriptors()}


@pytest.fixture(scope="session")
def small_domains():
    """Three small synthetic domains (cube, labels, spec)."""
    return hsdata.synth_generate(hsdata.SynthSpec(image_size=(24, 24), noise_sigma=0.1, blob_count=12, seed=4))
