# %% [markdown]
# # Brightness curves and the global proposal
#
# The global branch looks at nothing but the V-channel histogram of the
# input and a target brightness `mu`. From those it predicts eight curve
# coefficients, and the quadratic curve `v + a v (1 - v)` is applied eight
# times to the V channel. This script walks through each piece on a
# synthetic dark image.

# %%
import numpy as np
import torch

from flwnet import gfe, imaging, network

rng = np.random.default_rng(0)

# %% [markdown]
# ## The curve
#
# One step keeps 0 and 1 fixed and stays monotone for any coefficient in
# [-1, 1]. Positive coefficients brighten and negative ones darken.

# %%
v = torch.linspace(0, 1, 6, dtype=torch.float64)
for a in (-1.0, -0.5, 0.0, 0.5, 1.0):
    out = gfe.apply_curve(v, torch.tensor([a], dtype=torch.float64))
    print(f"a={a:+.1f}", np.round(out.numpy(), 3))

# %% [markdown]
# Composing steps gives a much steeper curve than a single step could.

# %%
dark = torch.tensor([0.05, 0.1, 0.2], dtype=torch.float64)
for t in (1, 2, 4, 8):
    print(t, "steps of a=1:", np.round(gfe.apply_curve(dark, torch.ones(t, dtype=torch.float64)).numpy(), 3))

# %% [markdown]
# ## Histogram features
#
# The network input is a 32-bin histogram of V plus `mu`, 33 numbers in
# all, whatever the image size. That is why feature extraction costs the
# same for a thumbnail and for a full-resolution photo.

# %%
img = np.clip(rng.gamma(2.0, 0.04, size=(120, 160, 3)), 0, 1)
hist = imaging.histogram(imaging.v_channel(img), 32)
print("mean V of the input:", round(imaging.mean_v(img), 3))
print("histogram mass in the lowest four bins:", hist[:4].sum().round(3))

# %% [markdown]
# ## A fresh model
#
# The head of the coefficient MLP starts at zero, so an untrained model
# proposes the identity curve: the proposal equals the V channel.

# %%
params = network.init_params(seed=0)
proposal = gfe.propose(img, 0.4, params)
print("identity at init:", np.allclose(proposal, imaging.v_channel(img)))
print("parameter counts:", network.total_param_count(params))

# %% [markdown]
# With hand-set head biases the proposal follows the coefficients. Here
# every coefficient is tanh(0.2), about 0.2, which lifts the shadows.

# %%
params["gfe.layer4.bias"] = torch.full((8,), 0.2)
lifted = gfe.propose(img, 0.4, params)
print("mean V before/after:", round(float(imaging.v_channel(img).mean()), 3), round(float(lifted.mean()), 3))
