# %% [markdown]
# # Relative losses
#
# Three of the five training losses compare images up to a nuisance
# transform, so the network is not forced to match the reference's
# absolute exposure pixel for pixel.
#
# * colour: per-pixel cosine between RGB vectors, blind to a global gain;
# * brightness: cosine between 5x5 blocks after subtracting each block's
#   minimum, blind to gain and offset;
# * structure: the same block cosine on forward-difference gradients,
#   blind to a constant shift.
#
# L1 and SSIM anchor the absolute level.

# %%
import numpy as np
import torch

from flwnet import losses

rng = np.random.default_rng(1)
ref = torch.as_tensor(0.2 + 0.6 * rng.random((1, 3, 32, 32)))
out = torch.as_tensor(0.2 + 0.6 * rng.random((1, 3, 32, 32)))

# %% [markdown]
# ## Invariances
#
# Each loss barely moves under the transform it is meant to ignore. L1
# changes a lot under the same transforms.

# %%
print("colour      ", float(losses.color_loss(out, ref)), float(losses.color_loss(0.5 * out, ref)))
print("brightness  ", float(losses.brightness_loss(out, ref)), float(losses.brightness_loss(0.7 * out + 0.1, ref)))
print("structure   ", float(losses.structure_loss(out, ref)), float(losses.structure_loss(out + 0.2, ref)))
print("l1          ", float(losses.l1_loss(out, ref)), float(losses.l1_loss(0.5 * out, ref)))

# %% [markdown]
# ## Block stride
#
# Blocks are centred on every pixel by default. A larger stride samples
# fewer centres, which is cheaper and gives a coarser estimate.

# %%
for stride in (1, 2, 4):
    cfg = losses.RelLossConfig(block_stride=stride)
    print(f"stride {stride}:", round(float(losses.brightness_loss(out, ref, cfg)), 5))

# %% [markdown]
# ## The full objective
#
# `total_loss` sums the enabled terms with unit weights and returns every
# term for logging.

# %%
bundle = losses.total_loss(out, ref)
print({k: round(v, 4) for k, v in bundle.as_dict().items()})
print(losses.total_loss(out, ref, enabled={"l1", "ssim"}).as_dict())
