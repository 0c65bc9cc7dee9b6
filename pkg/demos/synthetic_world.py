# %% [markdown]
# The bundled synthetic crowds
#
# Each 120x120 scene is a 3x3 grid of cells, and each cell follows one of three
# regimes: sparse (large heads with torsos, clutter, often empty), medium and
# dense (tiny heads packed close).  Head positions are exact, so ground truth
# is free.

# %%
import numpy as np
from PIL import Image

from switchcnn import presets
from switchcnn.dataset_io import THREE_REGIMES, generate_synthetic
from switchcnn.ground_truth import patch_mean_interhead_distance
from switchcnn.training import make_patch_samples

scenes = generate_synthetic(presets.desk_synth(num_scenes=30, seed=0))
samples = make_patch_samples(scenes)

# %% [markdown]
# Per regime: heads per patch and the mean distance to the ten nearest
# neighbours (over patches with at least two heads).

# %%
for g, reg in enumerate(THREE_REGIMES):
    mine = [s for s in samples if s.regime == g]
    heads = np.array([len(s.points) for s in mine])
    d = [patch_mean_interhead_distance(s.points) for s in mine if len(s.points) >= 2]
    print(f"{reg.name:7s} patches {len(mine):3d}  heads/patch {heads.mean():6.1f}  "
          f"empty {np.mean(heads == 0):.0%}  inter-head {np.mean(d):5.1f} px")

# %%
strip = np.hstack([s.image for s in scenes[:4]])
Image.fromarray((strip * 255).astype(np.uint8)).resize((strip.shape[1] * 2, strip.shape[0] * 2),
                                                       Image.NEAREST).save("synthetic_world.png")
print("wrote synthetic_world.png")
