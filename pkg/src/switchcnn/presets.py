"""The desk-scale experiment: bundled synthetic world plus training settings.

A full run on one CPU core takes a few minutes.  ``configs/desk.json`` holds
the same settings for the command line.
"""

from .dataset_io import THREE_REGIMES, SynthConfig
from .neural import SwitchConfig
from .training import ModelConfig, TrainConfig

SPLIT = (0.7, 0.15, 0.15)

DESK_TRAIN = TrainConfig(T_p=15, T_d=8, T_s=1, T_c=8, lr=3e-5, switch_lr=1e-3,
                         grad_clip=50.0, keep_best=True, seed=0)

DESK_MODEL = ModelConfig(init_std=None, switch=SwitchConfig(input_size=40, width=0.25))


def desk_synth(num_scenes: int = 90, seed: int = 0) -> SynthConfig:
    """90 scenes of 120x120, i.e. 810 patches of 40x40."""
    return SynthConfig(num_scenes=num_scenes, height=120, width=120, regimes=THREE_REGIMES, seed=seed)
