"""
Block correlation matrices
==========================

Assets come in groups; correlations are constant within each group and
between each pair of groups. Three restrictions are available: a full
block matrix, a sparse one where groups in different sectors are
uncorrelated, and a block-diagonal one.
"""

import numpy as np
from dfcm.blockcorr import BlockSpec, block_of_eta, canonical_of_block, eta_of_block

C = np.array([[1, 0.8, 0.4, 0.4],
              [0.8, 1, 0.4, 0.4],
              [0.4, 0.4, 1, 0.6],
              [0.4, 0.4, 0.6, 1]])
spec = BlockSpec((2, 2), (0, 0), "fbc")

# one log parameter per block cell instead of one per pair
eta = eta_of_block(C, spec)
print("block log parameters:", np.round(eta, 4))

cb = canonical_of_block(C, spec)
print("K x K core:", cb.A, "group eigenvalues:", cb.delta, sep="\n")

###############################################################################
# Restricted structures
# ---------------------
sizes, sectors = (3, 2, 4), (0, 0, 1)
for structure in ("fbc", "sbc", "dbc"):
    s = BlockSpec(sizes, sectors, structure)
    eta = np.full(s.n_eta, 0.15)
    R = block_of_eta(eta, s)
    print(structure, "parameters:", s.n_eta, "cross-sector corr:", round(R[0, -1], 4))
