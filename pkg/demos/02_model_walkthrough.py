"""Following one batch through a small CeiT: stem, tokens, LeFF, LCA.

Run:  python demos/02_model_walkthrough.py
"""

import numpy as np

from ceit import CeiT, preset
from ceit.model import ForwardRecord
from ceit.tensor import Tensor, no_grad

rng = np.random.default_rng(0)
cfg = preset("ceit-toy")
model = CeiT(cfg, init="random").eval()
images = rng.normal(size=(2, 3, cfg.image_size, cfg.image_size))

with no_grad():
    # The stem downsamples by 4 (stride-2 conv, then stride-2 max pool).
    feats = model.i2t_forward(Tensor(images))
    print("stem output", feats.shape, "stride", cfg.i2t.stride)

    # Non-overlapping patches of the feature map become tokens; one class token is prepended.
    seq = model.patch_embed(feats)
    print("tokens", seq.tokens.shape, "grid", seq.grid_side, "x", seq.grid_side)

    # LeFF: the class token passes through untouched, patch tokens are mixed spatially.
    out = model.leff_forward(seq.tokens, "blocks.0.ffn")
    print("class token unchanged:", np.array_equal(out.data[:, 0], seq.tokens.data[:, 0]))

    # The forward record keeps the class token after every block and the LCA score row.
    rec = ForwardRecord()
    logits = model.forward(images, record=rec)
    print("class-token trace", rec.class_tokens.shape)
    print("LCA scores per head", rec.lca_attention.shape[1:], "->", np.round(rec.lca_attention[0, 0, 0], 3))
    print("logits", logits.shape)

    # Shuffling patches (with their position embeddings) changes the output only because of LeFF.
    perm = rng.permutation(cfg.num_patches)
    moved = model.forward(images, patch_perm=perm)
    print("max logit change under patch shuffle:", float(np.abs(moved.data - logits.data).max()))
