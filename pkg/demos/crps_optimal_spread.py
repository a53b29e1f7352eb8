# coding: utf-8

# # How wide should a Gaussian forecast be?
#
# For a single observation y and a Gaussian forecast centred at mu, the CRPS
# as a function of the spread sigma has one minimum. Scan it and compare with
# the closed form |y - mu| / sqrt(ln 2).

# In[1]:

import numpy as np

from residiff import crps_ensemble, crps_gaussian, eae_expand, optimal_sigma

y, mu = 2.0, 0.5
sigmas = np.linspace(0.01, 5, 50_000)
scores = crps_gaussian(mu, sigmas, y)
print("grid argmin     ", sigmas[np.argmin(scores)])
print("closed form     ", optimal_sigma(y, mu))
print("ratio to |error|", sigmas[np.argmin(scores)] / abs(y - mu))


# In[2]:

# The curve is convex: first differences change sign exactly once.

d = np.diff(scores)
print("sign changes:", np.count_nonzero(np.diff(np.sign(d))))


# # Expanding an over-confident ensemble
#
# An ensemble whose spread is half its own mean absolute residual (scaled by
# 1/sqrt(ln 2)) is too narrow. Rescaling about the mean fixes the spread and
# lowers the score.

# In[3]:

rng = np.random.default_rng(0)
centre = rng.normal(size=(5000, 1, 1, 1))
ens = centre + 0.3 * rng.standard_normal((5000, 64, 1, 1))
truth = centre[:, 0] + 0.8 * rng.standard_normal((5000, 1, 1))

wide, lam = eae_expand(ens)
print("median expansion factor", np.median(lam))
print("CRPS before", crps_ensemble(ens, truth))
print("CRPS after ", crps_ensemble(wide, truth))
