# %% [markdown]
# # A toy run end to end
#
# Synthetic spheres, boxes and tori with known cameras, a small score model,
# sample-set metrics and inpainting-based upsampling.  Budgets are tiny so
# this runs in a couple of minutes; samples are correspondingly rough.

# %%
import numpy as np

from pcdiff.metrics import evaluate_sets
from pcdiff.model import decode, encode
from pcdiff.samplers import SamplerConfig, sample, upsample_cached, upsample_inpaint
from pcdiff.scorenet import NetConfig
from pcdiff.synthetic import make_dataset
from pcdiff.training import TrainConfig, train

data = make_dataset(80, 256, seed=0)
train_set, held = data.subset(range(64)), data.subset(range(64, 80))
print(train_set.families[:6], train_set.clouds.shape)

# %%
net = NetConfig(layers=2, d_nn=32, inducers=8, heads=2, groupnorm_groups=4, embed_dim=16)
trainer = train(TrainConfig(steps=300, batch=8, points=64, lr=1e-3), train_set, net)
h = trainer.history
print(f"loss first 50 {np.mean(h[:50]):.3f}  last 50 {np.mean(h[-50:]):.3f}")
model = trainer.inference_model()

# %% [markdown]
# Sample 16 clouds and score them against the held-out scenes.

# %%
gen = decode(model, sample(model, model.diffusion, SamplerConfig("sde", 32, seed=1), 64, 16))
ref = [c[:64] for c in held.clouds]
print(evaluate_sets(ref, list(gen), ("cd",)).to_text())

# %% [markdown]
# Upsampling: keep 40 points of a held-out cloud and let the model add 24.
# The context rows come back unchanged in the diffusion frame.

# %%
context = held.clouds[0][:40]
x, _ = encode(model, context)
scfg = SamplerConfig("sde", 32, seed=2)
full = upsample_inpaint(model, x, 64, model.diffusion, scfg, 2)
fast = upsample_cached(model, x, 24, 1, model.diffusion, scfg, 2)
print(full.shape, fast.shape, np.array_equal(full[:40], x), np.array_equal(fast[:40], x))
completed = decode(model, full)
