# %% [markdown]
# Switching between three regressors, end to end
#
# Train R1-R3 and the switch on the bundled synthetic crowds with the desk
# preset, then compare against single regressors, a switch trained without
# coupling, and the oracle switch.  Takes about ten minutes on one core.

# %%
import copy
import time

import numpy as np
import torch

from switchcnn import presets
from switchcnn.dataset_io import generate_synthetic, split_dataset
from switchcnn.evaluation import (evaluate_samples, multichotomy_histogram, plot_histogram,
                                  pretrained_baselines, switch_accuracy)
from switchcnn.training import OracleRouter, make_patch_samples, route_all, run_pipeline

torch.set_num_threads(1)
scenes = generate_synthetic(presets.desk_synth())
train, val, test = (make_patch_samples(s) for s in split_dataset(scenes, presets.SPLIT, seed=0))
cfg, mcfg = presets.DESK_TRAIN, presets.DESK_MODEL
print("patches: train", len(train), "val", len(val), "test", len(test))

# %% [markdown]
# Pretraining and differential training are shared; from there one copy gets
# coupled training and the other a stand-alone switch on fixed labels.

# %%
t0 = time.time()
pre = run_pipeline(train, val, cfg, mcfg, stop_after="pretrain")
diff = run_pipeline(train, val, cfg, mcfg, stop_after="differential")
standalone = run_pipeline(train, val, cfg, mcfg, start=copy.deepcopy(diff),
                          start_after="differential", coupled=False)
model = run_pipeline(train, val, cfg, mcfg, start=diff, start_after="differential")
print(f"trained in {time.time() - t0:.0f} s")

# %%
for name, rep in pretrained_baselines(pre, test).items():
    print(f"single {name}: scene MAE {rep.mae:.2f}")
rep = evaluate_samples(model.regressors, model.switch, test)
sa = evaluate_samples(standalone.regressors, standalone.switch, test)
oracle = evaluate_samples(model.regressors, OracleRouter(model.regressors), test)
print(f"switch (coupled):     MAE {rep.mae:.2f}  MSE {rep.mse:.2f}  "
      f"accuracy {switch_accuracy(model.switch, test, model.regressors):.2f}")
print(f"switch (stand-alone): MAE {sa.mae:.2f}")
print(f"ideal switch:         MAE {oracle.mae:.2f}")

# %% [markdown]
# Which patches does each regressor get?  The mean inter-head distance per
# regressor shows how the switch splits the patches by crowd density.

# %%
routes = route_all(model.switch, test)
hist = multichotomy_histogram(test, routes)
print("mean inter-head distance per regressor:", np.round(hist.means, 1))
empty = np.array([len(s.points) == 0 for s in test])
print("empty patches per regressor:", np.bincount(routes[empty], minlength=3))
plot_histogram(hist, "desk_histogram.png")
print("wrote desk_histogram.png")
