"""Tour of the sparse-coding building blocks.

Soft thresholding, plain ISTA on a planted 1-sparse problem, the group
proximal operator, and the blockwise operators that the network is built
from.
"""

import numpy as np

from nrsfm import (block_ista_step, block_sparsity, block_threshold,
                   group_prox, ista, soft_threshold)

rng = np.random.default_rng(0)

# Soft thresholding shrinks toward zero and kills small entries.
x = np.array([-2.0, -0.3, 0.0, 0.4, 1.5])
print("soft_threshold(x, 0.5) =", soft_threshold(x, 0.5))

# ISTA recovers a planted sparse code from a well-conditioned dictionary.
D = rng.standard_normal((20, 8))
D /= np.linalg.norm(D, axis=0)
z_true = np.zeros(8)
z_true[3] = 1.2
x = D @ z_true
alpha = 1.0 / np.linalg.norm(D, 2) ** 2
z = ista(x, D, alpha=alpha, tau=0.01, iters=300)
print("planted support {3}, recovered support",
      set(np.flatnonzero(np.abs(z) > 1e-4)))

# The group proximal operator shrinks whole 3x2 blocks by their Frobenius
# norm: small blocks vanish, large ones keep their direction.
V = rng.standard_normal((4, 3, 2))
U = group_prox(V, tau=1.5)
print("block norms before:", np.round(np.linalg.norm(V, axis=(1, 2)), 3))
print("block norms after: ", np.round(np.linalg.norm(U, axis=(1, 2)), 3))

# One masked block-ISTA step is the encoder's basic move: correlate the
# visible measurements with every atom, then threshold blockwise.
X = rng.standard_normal((10, 2))
Db = rng.standard_normal((10, 15))        # 5 atoms of 3 rows each
mask = rng.random(10) > 0.3
Z = block_ista_step(X, Db, np.full(5, 0.8), mask=mask)
print("active blocks after one step:", block_sparsity(Z), "of 5")

# Raising thresholds can only deactivate blocks, never activate them.
for tau in (0.0, 2.0, 5.0, 9.0):
    Zt = block_threshold((Db.T @ np.where(mask[:, None], X, 0)).reshape(5, 3, 2),
                         np.full(5, tau))
    print(f"  threshold {tau}: {block_sparsity(Zt)} active blocks")
