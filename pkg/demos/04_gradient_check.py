"""Finite-difference verification of every gradient in a small model.

Run:  python demos/04_gradient_check.py        (about a minute)
"""

from ceit import ModelConfig, I2TConfig, preset
from ceit.gradcheck import model_gradcheck

# First just the class-token attention head, with the layer trace as an input.
print(model_gradcheck(preset("ceit-toy"), scope="lca").format_table())

# Then a whole (deliberately tiny) network: stem, LeFF blocks, LCA and head.
cfg = ModelConfig(
    image_size=8, i2t=I2TConfig(channels=2), patch_size=1, depth=2, embed_dim=4, heads=2, expand_ratio=2, num_classes=3
).validate()
print()
print(model_gradcheck(cfg).format_table())

# A deliberately wrong gradient must be caught and named.
bad = model_gradcheck(cfg, corrupt="blocks.0.ffn.dw.weight")
print("\ncorrupted run fails on:", bad.failures)
