"""
Attention masks for block-diffusion training
============================================

Training feeds the noised sequence and the clean sequence side by side, so
attention runs over 2L positions. This script builds that mask for a tiny
geometry and prints it.
"""

# %%
import numpy as np

from bdlm.masking import BlockGeometry, build_inference_mask, build_training_mask, render_grid

geom = BlockGeometry(L=8, D=2)
print(f"{geom.B} blocks of {geom.D} tokens")

# %%
# Top-left: each noised block sees itself. Top-right: it also sees the clean
# blocks strictly before it. Bottom-right: clean blocks are block-causal.
mask = build_training_mask(geom)
print(render_grid(mask, split=geom.L))

# %%
# How many keys each query may read.
counts = mask.row_counts()
print("noised rows:", counts[: geom.L])
print("clean rows: ", counts[geom.L:])

# %%
# At inference the prefix is clean and committed, so a window over the current
# block simply reads everything before it plus itself.
inf = build_inference_mask(prefix_len=4, window_len=2)
print(np.asarray(inf.dense(), dtype=int))
