"""
Correlation matrices through their matrix logarithm
===================================================

Any vector of off-diagonal log entries maps to exactly one correlation
matrix. This is what lets the filters move freely in an unconstrained space.
"""

import numpy as np
from dfcm.matcorr import corr_of_gamma, gamma_of_corr, matrix_log

C = np.array([[1.0, 0.7, 0.4], [0.7, 1.0, 0.6], [0.4, 0.6, 1.0]])
g = gamma_of_corr(C)
print("log entries below the diagonal:", np.round(g, 4))

# the diagonal of log C is whatever makes exp(.) unit-diagonal
print(np.round(matrix_log(C), 4))

# any vector works, including large ones
rng = np.random.default_rng(1)
g = rng.normal(scale=2.0, size=6)
R = corr_of_gamma(g)
print("random vector ->", np.round(R, 3), sep="\n")
print("smallest eigenvalue", np.linalg.eigvalsh(R).min())
print("round trip error", np.abs(gamma_of_corr(R) - g).max())
