"""
Scaling the loading score near collinearity
===========================================

When the factor vector lines up with the current loading direction the
sensitivity of the loading update becomes singular. The plain pseudo-inverse
then produces huge steps; a ridge penalty keeps them bounded.
"""

import numpy as np
from dfcm.blockcorr import BlockSpec
from dfcm.convt import ConvTSpec
from dfcm.loadings import rho_of_tau
from dfcm.scoredriven import joint_score, scaled_innovation

rng = np.random.default_rng(4)
tau = rng.normal(scale=0.5, size=(2, 3))
rho0 = rho_of_tau(tau[0])
z, w = rng.normal(size=2), rng.normal(size=3)
spec, dist = BlockSpec((1, 1), structure="dbc"), ConvTSpec.gauss(2)

print(" distance   pinv step   ridge step")
for eps in 10.0 ** -np.arange(1, 9):
    u = 1.3 * rho0 / np.linalg.norm(rho0) + eps * w
    js = joint_score(z, u, tau, np.zeros(0), spec, dist)
    a = np.linalg.norm(scaled_innovation(js, "mp")[:3])
    b = np.linalg.norm(scaled_innovation(js, "tikhonov", np.exp(3.0))[:3])
    print(f"{eps:9.0e} {a:11.3e} {b:11.3e}")

# Below about 1e-6 the pseudo-inverse cutoff declares the sensitivity
# rank deficient and drops that direction, so the pinv step falls back.
# The ridge step never moves.
