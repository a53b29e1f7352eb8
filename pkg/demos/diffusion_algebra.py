# coding: utf-8

# # Noise schedule and deterministic sampling
#
# A linear beta schedule, its cumulative signal fraction, the closed-form
# forward noising and the deterministic skip-step update.

# In[1]:

import numpy as np

from residiff import build_cosine_kappa, build_linear_beta
from residiff.diffusion import ddim_step, forward_diffuse, predict_r0

sched = build_linear_beta(1000)
for k in (1, 100, 500, 1000):
    print(f"k={k:4d}  abar={sched.abar(k):.6f}")


# In[2]:

# Subsequence of steps visited at inference: dense near k=0, sparse near K.

kappa = build_cosine_kappa(1000, 10).kappa
print(kappa)
print("gaps", np.diff(np.concatenate(([0], kappa))))


# In[3]:

# Noising then denoising with the true noise recovers the input exactly.

rng = np.random.default_rng(1)
r0 = rng.standard_normal((24, 2))
eps = rng.standard_normal((24, 2))
rk = forward_diffuse(r0, 700, eps, sched)
print("round-trip error", np.abs(predict_r0(rk, eps, 700, sched) - r0).max())


# In[4]:

# Correlation between the noisy state and its noise grows with k.

z0, z = rng.standard_normal((2, 100_000))
for k in (100, 500, 1000):
    c = np.corrcoef(forward_diffuse(z0, k, z, sched), z)[0, 1]
    print(f"k={k:4d}  corr={c:.4f}  sqrt(1-abar)={np.sqrt(1 - sched.abar(k)):.4f}")


# In[5]:

# Walking the subsequence with a perfect estimate of r0 lands on r0.

steps = [0] + list(kappa)
r = forward_diffuse(r0, steps[-1], eps, sched)
for i in range(len(steps) - 1, 0, -1):
    r = ddim_step(r, r0, steps[i], steps[i - 1], sched)
print("final error", np.abs(r - r0).max())
