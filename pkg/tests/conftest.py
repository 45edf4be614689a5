import numpy as np
import pytest

import sisa_unlearn as su


@pytest.fixture(scope="session")
def small_bundle():
    """6 classes x 60 samples, well separated; cheap enough for unit tests."""
    return su.synthetic_bundle(n_per_class=60, num_classes=6, shape=(16,),
                               separation=4.0, seed=1)


@pytest.fixture(scope="session")
def quick_cfg():
    return su.TrainConfig(max_epochs_per_slice=4, patience=None,
                          replay_ratio=0.3, batch_size=32, seed=7)


def make_labels(counts: dict[int, int]) -> np.ndarray:
    """Label array with the given per-class counts, grouped by class."""
    return np.concatenate([np.full(n, c, dtype=np.int64)
                           for c, n in sorted(counts.items())])
