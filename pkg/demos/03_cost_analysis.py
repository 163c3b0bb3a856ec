"""Parameter and FLOP accounting for the built-in presets.

One FLOP here is one multiply-accumulate of a convolution, a linear layer or
an attention product. Pass ``elementwise=True`` to also count norms,
activations, softmax and pooling.

Run:  python demos/03_cost_analysis.py
"""

from ceit import preset
from ceit.complexity import analyze, compare, lca_block_ratio, measure_macs

print(f"{'preset':8} {'params':>10} {'FLOPs@224':>11} {'FLOPs@384':>11}")
for name in ("deit-t", "ceit-t", "ceit-s", "ceit-b"):
    cfg = preset(name)
    a, b = analyze(cfg, 224), analyze(cfg, 384)
    print(f"{name:8} {a.params / 1e6:9.2f}M {a.flops / 1e9:10.3f}G {b.flops / 1e9:10.3f}G")

# The analytic count is checked against MACs counted while actually running the model.
cfg = preset("ceit-t")
print("\nanalyzer vs executed MACs at 32px:", analyze(cfg, 32).flops, measure_macs(cfg, 32))

# Where does CeiT-T spend compared with DeiT-T?
print("\nCeiT-T / DeiT-T ratios")
for part, row in compare(preset("ceit-t"), preset("deit-t")).items():
    print(f"  {part:13} params x{row['params_ratio']:.3f}  flops x{row['flops_ratio']:.3f}")

# The class-token attention head costs a small fraction of one encoder block.
r = lca_block_ratio(cfg)
print(f"\nLCA / block: query-side {r['query_side']:.4f}, all MACs {r['full']:.4f}, 1/N = {r['inverse_n']:.4f}")

# Per-layer breakdown for the first block.
rep = analyze(cfg)
for e in rep.select("blocks.0"):
    print(f"  {e.name:24} {e.params:>8,} {e.flops:>12,}")
