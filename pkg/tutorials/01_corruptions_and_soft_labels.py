# %% [markdown]
# # Corruptions and soft labels
#
# Each training image can be replaced, with probability gamma, by a corrupted
# copy whose target is softened according to how well a clean model copes
# with that corruption. This script walks through the pieces on a few
# synthetic images, printing numbers instead of plotting.

# %%
import numpy as np

from oodbridge import corruptions, data_io, softlabel
from oodbridge.corruptions import CorruptionSpec

data = data_io.synth_dataset(4, 2, seed=0)
image = data.images[0]
print("image", image.shape, image.dtype, "class", data.labels[0])

# %% [markdown]
# There are 15 families at 5 severities. A spec is addressed by name and
# severity, or by its flat index 0..74.

# %%
specs = corruptions.list_corruptions()
print(len(specs), "specs; first family:", specs[0].family, "last:", specs[-1].family)
print("index of fog/3:", CorruptionSpec("fog", 3).index)

# %% [markdown]
# Corruption is deterministic given a seed. Damage grows with severity; the
# mean absolute change is a quick way to see it.

# %%
for family in ("gaussian_noise", "defocus_blur", "contrast", "jpeg_compression"):
    deltas = [
        np.abs(corruptions.apply_corruption(image, CorruptionSpec(family, s), seed=1) - image).mean()
        for s in range(1, 6)
    ]
    print(f"{family:18s}", " ".join(f"{d:.3f}" for d in deltas))

again = corruptions.apply_corruption(image, CorruptionSpec("snow", 4), seed=1)
print("same seed, same output:", np.array_equal(again, corruptions.apply_corruption(image, CorruptionSpec("snow", 4), 1)))

# %% [markdown]
# A soft label puts the model's accuracy under a corruption on the true
# class and spreads the rest evenly. Accuracy 1 gives the one-hot target and
# chance accuracy gives the uniform one.

# %%
for acc in (1.0, 0.7, 0.25):
    print(acc, np.round(softlabel.make_soft_label(acc, 2, 4).probs, 3))

# %% [markdown]
# Sampling: with probability gamma draw alpha uniformly from [1/K, 1), pick
# the table entry whose accuracy is nearest to alpha, and corrupt with it.
# With a hand-made table the draw frequencies follow the Voronoi cells of the
# accuracies on that interval.

# %%
accs = np.ones(75)
accs[:5] = [0.3, 0.45, 0.6, 0.8, 0.95]
table = softlabel.AccuracyTable(accs, 4, active=np.arange(75) < 5)
counts = np.zeros(75, int)
for seed in range(4000):
    _, target = softlabel.draw_training_sample(image, 2, 1.0, table, seed)
    counts[target.spec_index] += 1
print("draw frequency of the 5 active entries:", np.round(counts[:5] / 4000, 3))
edges = np.concatenate([[0.25], (accs[:4] + accs[1:5]) / 2, [1.0]])
print("cell widths / 0.75:                    ", np.round(np.diff(edges) / 0.75, 3))

_, target = softlabel.draw_training_sample(image, 2, 0.0, table, 0)
print("gamma=0 always returns the clean image with a", target.kind, "label")
