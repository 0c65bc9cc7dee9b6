import numpy as np
import torch

from switchcnn.dataset_io import Regime, SynthConfig, generate_synthetic
from switchcnn.neural import build_regressor
from switchcnn.training import ModelConfig, PatchSample, make_patch_samples
from switchcnn.neural import SwitchConfig

SMALL_REGIMES = (
    Regime("sparse", (2e-3, 4e-3), (3.0, 3.5), texture_amplitude=0.2, empty_prob=0.3),
    Regime("medium", (1.5e-2, 2.5e-2), (1.5, 2.0), texture_amplitude=0.1),
    Regime("dense", (6e-2, 8e-2), (0.8, 1.0), texture_amplitude=0.04),
)

SMALL_MODEL = ModelConfig(width=0.25, init_std=None,
                          switch=SwitchConfig(input_size=16, width=0.125, hidden=16))


def small_samples(n_scenes=4, seed=0, size=48):
    scenes = generate_synthetic(SynthConfig(num_scenes=n_scenes, height=size, width=size,
                                            regimes=SMALL_REGIMES, seed=seed))
    return make_patch_samples(scenes)


def constant_regressor(name, value, seed=0):
    """Regressor whose output map is ``value`` everywhere."""
    r = build_regressor(name, seed, init_std=None)
    with torch.no_grad():
        for p in r.parameters():
            p.zero_()
        r.head.bias.fill_(value)
    return r


def uniform_sample(pixels=0.5, size=16, density=0.25, key=("u", (0, 0))):
    target = np.full((size // 4, size // 4), density, dtype=np.float32)
    from switchcnn.ground_truth import PointSet
    return PatchSample(np.full((size, size), pixels, dtype=np.float32), target,
                       float(target.sum()), PointSet(np.zeros((0, 2)), size, size), key[0], key[1])
