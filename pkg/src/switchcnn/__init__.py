"""Crowd counting with a switch that routes image patches to one of several density regressors.

Modules:

- ``ground_truth``: density maps from head annotations, fixed or geometry-adaptive kernels
- ``patch_grid``: the 3x3 patch grid, splitting scenes and re-assembling maps
- ``neural``: the regressors R1-R3, the switch classifier, SGD and checkpoints
- ``training``: pretraining, differential, switch and coupled training
- ``evaluation``: MAE/MSE, routed evaluation, clustering baselines, ablations
- ``dataset_io``: manifests on disk, splits and a seeded synthetic crowd generator
- ``cli``: the ``switchcnn`` command
"""

__version__ = "0.1.0"
