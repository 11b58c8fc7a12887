import numpy as np
import pytest

from mfgtrack.config import Settings, build_settings
from mfgtrack.synth import easy_spec, generate_sequence

TINY = {
    "backbone": {"channels": 16, "input_size": 64},
    "cbam": {"reduction": 4},
    "datanet": {
        "input_size": 32,
        "epochs": 1,
        "clips_per_sequence": 2,
        "batch_size": 2,
        "num_peaks": 4,
        "peak_window": 5,
    },
    "tracker": {
        "n_local": 32,
        "n_global": 16,
        "hidden": 32,
        "n_init_pos": 32,
        "n_init_neg": 64,
        "init_iters": 5,
        "bbreg_samples": 50,
        "hard_pool": 64,
        "n_pos": 8,
        "n_neg": 16,
        "update_iters": 2,
        "n_store_pos": 8,
        "n_store_neg": 16,
    },
    "train": {"iterations": 4},
    "experiment": {"num_sequences": 1, "num_frames": 12, "canvas": 64},
}


@pytest.fixture
def tiny_settings() -> Settings:
    return build_settings(TINY)


@pytest.fixture
def easy_record():
    spec = easy_spec(num_frames=12, canvas=64, rng=np.random.default_rng(3))
    return generate_sequence(spec, seed=3)
