"""
From text lines to complementary training views
===============================================
"""

# %%
import numpy as np

from bdlm.data import Vocabulary, build_batch, encode_samples, make_complementary_views, pack_samples, \
    sample_block_masks
from bdlm.masking import BlockGeometry

vocab = Vocabulary()
geom = BlockGeometry(L=16, D=4)
lines = ["hello", "block", "diffusion", "lm"]

# %%
# Each line gets an EOS and is padded to a whole number of blocks, then lines
# are packed into rows of L tokens.
samples = encode_samples(lines, vocab, geom.D)
rows, pads = pack_samples(samples, geom.L, geom.D)
for r, p in zip(rows, pads):
    print(vocab.decode([t for t, q in zip(r, p) if not q and t < 256]), "| pad:", int(p.sum()))

# %%
# One mask ratio per block. The second view masks exactly the complement, so
# every real token is a prediction target in one of the two views.
rng = np.random.default_rng(0)
sample = sample_block_masks(geom, pads[0], rng)
a, b = make_complementary_views(rows[0], sample, vocab.mask_id)
show = lambda v: "".join("_" if t == vocab.mask_id else (chr(t) if t < 256 else "$") for t in v.x_t)
print("ratios", np.round(sample.t, 2))
print("view A", show(a))
print("view B", show(b))

# %%
# Targets are shifted one slot left: the output at i-1 predicts token i.
print("A loss slots", np.flatnonzero(a.loss_active))
print("B loss slots", np.flatnonzero(b.loss_active))

# %%
batch = build_batch(rows, pads, geom, rng, vocab.mask_id)
print("views in batch:", len(batch.views), "active targets:", batch.n_active())
