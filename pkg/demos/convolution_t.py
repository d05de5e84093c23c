"""
Convolution-t innovations
=========================

Groups of assets get their own tail thickness. One group is the ordinary
multivariate t, one asset per group gives independent t marginals, and
infinite degrees of freedom give the Gaussian.
"""

import numpy as np
from dfcm.convt import ConvTSpec, information_mu_xi, loglik, sample, upsilon, upsilon_monte_carlo
from dfcm.matcorr import sym_sqrt

C = np.array([[1, 0.5, 0.2, 0.2], [0.5, 1, 0.2, 0.2], [0.2, 0.2, 1, 0.4], [0.2, 0.2, 0.4, 1]])
Xi = sym_sqrt(C)
x = np.array([2.5, -0.3, 0.1, 1.8])

for d in (ConvTSpec.gauss(4), ConvTSpec.mt(4, 6.0), ConvTSpec.ct((2, 2), (4.0, 20.0)),
          ConvTSpec.ht((4.0, 6.0, 10.0, 20.0))):
    print(f"{d.kind:5s} log density {loglik(x, np.zeros(4), Xi, d):8.4f}")

###############################################################################
# Fourth moments
# --------------
# The information matrix needs E[vec(VV') vec(VV')'] of the standardized
# draws. The closed form agrees with simulation.
d = ConvTSpec.ct((2, 2), (6.0, 10.0))
exact, mc = upsilon(d), upsilon_monte_carlo(d, n_draws=200_000, seed=0)
print("relative gap", np.linalg.norm(exact - mc) / np.linalg.norm(exact))
I_mu, I_xi = information_mu_xi(d, Xi)
print("information for the location:", np.round(I_mu, 3), sep="\n")

X = sample(d, np.zeros(4), Xi, 100_000, seed=1)
print("sample correlation", np.round(np.corrcoef(X.T), 2), sep="\n")
