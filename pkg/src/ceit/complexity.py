"""Structural parameter and FLOP accounting.

Costs are enumerated layer by layer from a :class:`ModelConfig` without
running the network. FLOPs follow the multiply-accumulate convention
(1 MAC = 1 FLOP) over convolutions, linear layers and the two attention
products (scores and aggregation). Norms, activations, softmax and pooling
comparisons are excluded unless ``elementwise=True``.

For the defaults the totals equal, exactly, the MACs tallied by the tensor
core during one forward pass (see :func:`measure_macs`).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import ModelConfig
from .model import parameter_shapes


@dataclass(frozen=True)
class LayerCost:
    name: str
    params: int
    flops: int
    kind: str = "mac"  # "mac" for conv/linear/attention products, "elementwise" otherwise


@dataclass
class CostReport:
    resolution: int
    entries: list[LayerCost] = field(default_factory=list)

    @property
    def params(self) -> int:
        return sum(e.params for e in self.entries)

    @property
    def flops(self) -> int:
        return sum(e.flops for e in self.entries)

    def select(self, prefix: str) -> list[LayerCost]:
        return [e for e in self.entries if e.name == prefix or e.name.startswith(prefix + ".")]

    def flops_of(self, prefix: str) -> int:
        return sum(e.flops for e in self.select(prefix))

    def params_of(self, prefix: str) -> int:
        return sum(e.params for e in self.select(prefix))

    def to_dict(self) -> dict:
        return {
            "resolution": self.resolution,
            "total_params": self.params,
            "total_flops": self.flops,
            "layers": [{"name": e.name, "params": e.params, "flops": e.flops, "kind": e.kind} for e in self.entries],
        }

    def format_table(self) -> str:
        width = max([len(e.name) for e in self.entries] + [5])
        lines = [f"{'layer':<{width}}  {'params':>12}  {'flops':>15}"]
        lines.append("-" * len(lines[0]))
        for e in self.entries:
            lines.append(f"{e.name:<{width}}  {e.params:>12,}  {e.flops:>15,}")
        lines.append("-" * len(lines[0]))
        lines.append(f"{'total':<{width}}  {self.params:>12,}  {self.flops:>15,}")
        lines.append(f"params {self.params / 1e6:.2f}M   flops {self.flops / 1e9:.3f}G   @{self.resolution}x{self.resolution}")
        return "\n".join(lines)


def _numel(shape) -> int:
    return int(np.prod(shape))


def analyze(cfg: ModelConfig, resolution: int | None = None, elementwise: bool = False) -> CostReport:
    """Per-layer parameters and FLOPs of ``cfg`` evaluated at ``resolution`` (default: cfg.image_size)."""
    if resolution is not None and resolution != cfg.image_size:
        cfg = cfg.with_resolution(resolution)
    cfg.validate()
    shapes = parameter_shapes(cfg)
    report = CostReport(cfg.image_size)
    entries = report.entries

    def params(prefix: str) -> int:
        return sum(_numel(s) for n, s in shapes.items() if n == prefix or n.startswith(prefix + "."))

    def ew(name: str, n: int) -> None:
        if elementwise:
            entries.append(LayerCost(name, 0, n, "elementwise"))

    c, hid, h = cfg.embed_dim, cfg.hidden_dim, cfg.heads
    t = cfg.i2t
    size = cfg.image_size
    cin = cfg.in_channels
    if t.enabled:
        for i in range(t.num_convs):
            size = (size + 2 * (t.conv_kernel // 2) - t.conv_kernel) // t.conv_stride + 1
            flops = size * size * t.channels * cin * t.conv_kernel**2
            entries.append(LayerCost(f"stem.conv{i}", params(f"stem.conv{i}"), flops))
            cin = t.channels
            if t.use_bn:
                entries.append(LayerCost(f"stem.bn{i}", params(f"stem.bn{i}"), 0))
                ew(f"stem.bn{i}.elementwise", size * size * t.channels)
        if t.use_maxpool:
            size = (size + 2 * (t.pool_kernel // 2) - t.pool_kernel) // t.pool_stride + 1
            ew("stem.pool.compare", size * size * t.channels * t.pool_kernel**2)
    n = cfg.num_patches
    tokens = n + 1
    patch_dim = cfg.stem_channels * cfg.patch_size**2
    entries.append(LayerCost("embed.proj", params("embed.proj"), n * patch_dim * c))
    entries.append(LayerCost("embed.cls_token", params("cls_token"), 0))
    entries.append(LayerCost("embed.pos_embed", params("pos_embed"), 0))

    for i in range(cfg.depth):
        p = f"blocks.{i}"
        entries.append(LayerCost(f"{p}.norm1", params(f"{p}.norm1"), 0))
        ew(f"{p}.norm1.elementwise", tokens * c)
        entries.append(LayerCost(f"{p}.attn.qkv", params(f"{p}.attn.qkv"), tokens * c * 3 * c))
        entries.append(LayerCost(f"{p}.attn.scores", 0, tokens * tokens * c))
        ew(f"{p}.attn.softmax", h * tokens * tokens)
        entries.append(LayerCost(f"{p}.attn.aggregate", 0, tokens * tokens * c))
        entries.append(LayerCost(f"{p}.attn.proj", params(f"{p}.attn.proj"), tokens * c * c))
        entries.append(LayerCost(f"{p}.norm2", params(f"{p}.norm2"), 0))
        ew(f"{p}.norm2.elementwise", tokens * c)
        f = f"{p}.ffn"
        if cfg.ffn_kind == "leff":
            k = cfg.leff_kernel
            entries.append(LayerCost(f"{f}.fc1", params(f"{f}.fc1"), n * c * hid))
            if cfg.leff_use_bn:
                entries.append(LayerCost(f"{f}.bn1", params(f"{f}.bn1"), 0))
            ew(f"{f}.act1", n * hid * (2 if cfg.leff_use_bn else 1))
            entries.append(LayerCost(f"{f}.dw", params(f"{f}.dw"), n * hid * k * k))
            if cfg.leff_use_bn:
                entries.append(LayerCost(f"{f}.bn2", params(f"{f}.bn2"), 0))
            ew(f"{f}.act2", n * hid * (2 if cfg.leff_use_bn else 1))
            entries.append(LayerCost(f"{f}.fc2", params(f"{f}.fc2"), n * hid * c))
            if cfg.leff_use_bn:
                entries.append(LayerCost(f"{f}.bn3", params(f"{f}.bn3"), 0))
            ew(f"{f}.act3", n * c * (2 if cfg.leff_use_bn else 1))
        else:
            entries.append(LayerCost(f"{f}.fc1", params(f"{f}.fc1"), tokens * c * hid))
            ew(f"{f}.act", tokens * hid)
            entries.append(LayerCost(f"{f}.fc2", params(f"{f}.fc2"), tokens * hid * c))

    if cfg.use_lca:
        depth = cfg.depth
        entries.append(LayerCost("lca.norm1", params("lca.norm1"), 0))
        ew("lca.norm1.elementwise", depth * c)
        entries.append(LayerCost("lca.attn.q", params("lca.attn.q"), c * c))
        entries.append(LayerCost("lca.attn.kv", params("lca.attn.kv"), depth * c * 2 * c))
        entries.append(LayerCost("lca.attn.scores", 0, depth * c))
        ew("lca.attn.softmax", h * depth)
        entries.append(LayerCost("lca.attn.aggregate", 0, depth * c))
        entries.append(LayerCost("lca.attn.proj", params("lca.attn.proj"), c * c))
        entries.append(LayerCost("lca.norm2", params("lca.norm2"), 0))
        ew("lca.norm2.elementwise", c)
        entries.append(LayerCost("lca.ffn.fc1", params("lca.ffn.fc1"), c * hid))
        ew("lca.ffn.act", hid)
        entries.append(LayerCost("lca.ffn.fc2", params("lca.ffn.fc2"), hid * c))
    if cfg.norm_order == "pre":
        entries.append(LayerCost("norm", params("norm"), 0))
        ew("norm.elementwise", c)
    entries.append(LayerCost("head", params("head"), c * cfg.num_classes))

    assert report.params == sum(_numel(s) for s in shapes.values())
    return report


def closed_form(cfg: ModelConfig, resolution: int | None = None) -> dict[str, int]:
    """Direct-count closed forms for the tokenization and depth-wise terms.

    With H = W = resolution, D stem channels, C embed dim and e the expand
    ratio:

    * raw patch embedding: ``3 C H W`` (independent of the patch size)
    * stem conv (k x k, stride 2, 3 -> D): ``(k^2 * 3 / 4) D H W``
    * stem max-pool comparisons (k x k, two-fold): ``(k^2 / 16) D H W``
    * embedding of the stem output: ``(1 / S^2) D C H W`` for stride S
    * LeFF depth-wise conv per block: ``e k^2 N C``

    These agree with :func:`analyze` entry by entry (tested); they are kept
    separate as a readable cross-check of the enumeration.
    """
    if resolution is not None and resolution != cfg.image_size:
        cfg = cfg.with_resolution(resolution)
    hw = cfg.image_size**2
    c, t = cfg.embed_dim, cfg.i2t
    out = {"raw_embed": 3 * c * hw}
    if t.enabled and t.num_convs == 1:
        d = t.channels
        out["stem_conv"] = t.conv_kernel**2 * cfg.in_channels * d * hw // t.conv_stride**2
        if t.use_maxpool:
            out["stem_pool_compare"] = t.pool_kernel**2 * d * hw // t.stride**2
        out["stem_embed"] = d * c * hw // t.stride**2
    if cfg.ffn_kind == "leff":
        out["leff_depthwise"] = cfg.expand_ratio * cfg.leff_kernel**2 * cfg.num_patches * c
    return out


def count_params(cfg: ModelConfig) -> CostReport:
    return analyze(cfg)


def count_flops(cfg: ModelConfig, resolution: int | None = None, elementwise: bool = False) -> CostReport:
    return analyze(cfg, resolution, elementwise)


def _tokenization(report: CostReport) -> tuple[int, int]:
    parts = report.select("stem") + report.select("embed")
    return sum(e.params for e in parts), sum(e.flops for e in parts)


def _ratio(a: int, b: int) -> float:
    if a == b:
        return 1.0
    return float("inf") if b == 0 else a / b


def compare(cfg_a: ModelConfig, cfg_b: ModelConfig, resolution: int = 224) -> dict[str, dict[str, float]]:
    """Component-wise cost ratios ``a / b``.

    Components: tokenization (stem + patch embedding), the FFN slot of one
    encoder block (LeFF or FFN), the attention of one block, the LCA head
    and the whole model.
    """
    ra, rb = analyze(cfg_a, resolution), analyze(cfg_b, resolution)
    pa, fa = _tokenization(ra)
    pb, fb = _tokenization(rb)
    rows = {
        "tokenization": (pa, pb, fa, fb),
        "block_ffn": (ra.params_of("blocks.0.ffn"), rb.params_of("blocks.0.ffn"), ra.flops_of("blocks.0.ffn"), rb.flops_of("blocks.0.ffn")),
        "block_attn": (ra.params_of("blocks.0.attn"), rb.params_of("blocks.0.attn"), ra.flops_of("blocks.0.attn"), rb.flops_of("blocks.0.attn")),
        "lca": (ra.params_of("lca"), rb.params_of("lca"), ra.flops_of("lca"), rb.flops_of("lca")),
        "total": (ra.params, rb.params, ra.flops, rb.flops),
    }
    return {
        name: {"params_a": p1, "params_b": p2, "flops_a": f1, "flops_b": f2, "params_ratio": _ratio(p1, p2), "flops_ratio": _ratio(f1, f2)}
        for name, (p1, p2, f1, f2) in rows.items()
    }


_KEY_VALUE = (".attn.kv", ".attn.qkv")


def lca_block_ratio(cfg: ModelConfig, resolution: int | None = None) -> dict[str, float]:
    """LCA cost relative to one encoder block.

    ``query_side`` counts the work that scales with the number of queries
    (query and output projections, attention products, FFN); key/value
    projections are excluded since the LCA keys span L class tokens rather
    than N+1 patch tokens. In a block a third of the fused qkv projection is
    query-side. ``full`` compares every MAC of both.
    """
    if not cfg.use_lca:
        raise ValueError("config has no LCA module")
    r = analyze(cfg, resolution)
    block = r.select("blocks.0")
    lca = r.select("lca")
    block_full = sum(e.flops for e in block)
    lca_full = sum(e.flops for e in lca)
    block_query = sum(e.flops // 3 if e.name.endswith(".attn.qkv") else e.flops for e in block)
    lca_query = sum(0 if e.name.endswith(_KEY_VALUE) else e.flops for e in lca)
    n = cfg.with_resolution(r.resolution).num_patches
    return {
        "num_patches": n,
        "full": lca_full / block_full,
        "query_side": lca_query / block_query,
        "inverse_n": 1.0 / n,
    }


def measure_macs(cfg: ModelConfig, resolution: int | None = None, batch: int = 1) -> int:
    """Run one eval-mode forward pass and count the MACs the tensor core executes, per image."""
    import copy

    from .model import CeiT
    from .tensor import count_macs, no_grad

    cfg = copy.deepcopy(cfg)
    if resolution is not None:
        cfg.image_size = resolution
    cfg.dtype = "float32"
    model = CeiT(cfg, init="zeros").eval()
    images = np.zeros((batch, cfg.in_channels, cfg.image_size, cfg.image_size), dtype=np.float32)
    with no_grad(), count_macs() as counter:
        model.forward(images)
    assert counter.total % batch == 0
    return counter.total // batch
