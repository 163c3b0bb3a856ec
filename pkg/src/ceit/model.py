"""The CeiT network: I2T stem, patch embedding, MSA + LeFF encoder blocks, LCA head.

Parameters live in a flat ordered ``name -> Tensor`` mapping and batch-norm
running statistics in a parallel ``name -> RunningStats`` mapping, so the
same :class:`CeiT` object serves forward passes, gradient checks, the
optimizer and checkpointing.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .tensor import RunningStats, ShapeError, Tensor


@dataclass
class TokenSequence:
    """``tokens[B, N+1, C]`` with the class token at ``class_index`` and an N-patch square grid."""

    tokens: Tensor
    grid_side: int
    class_index: int = 0

    def __post_init__(self) -> None:
        if self.tokens.ndim != 3 or self.tokens.shape[1] != self.grid_side**2 + 1:
            raise ShapeError(f"token tensor {self.tokens.shape} does not hold {self.grid_side}**2 + 1 tokens")

    @property
    def num_patches(self) -> int:
        return self.grid_side**2

    def replace(self, tokens: Tensor) -> "TokenSequence":
        return TokenSequence(tokens, self.grid_side, self.class_index)


@dataclass
class ForwardRecord:
    """Per-pass state captured by :meth:`CeiT.forward`; never shared across passes."""

    class_tokens: Tensor | None = None  # [B, L, C], entry l taken after block l
    lca_attention: np.ndarray | None = None  # [B, heads, 1, L]
    block_attention: list[np.ndarray] = field(default_factory=list)
    token_counts: list[int] = field(default_factory=list)


def _trunc_normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(dtype)


def parameter_shapes(cfg: ModelConfig) -> "OrderedDict[str, tuple[int, ...]]":
    """Every learnable tensor the model allocates, in a fixed order."""
    c, hid = cfg.embed_dim, cfg.hidden_dim
    shapes: OrderedDict[str, tuple[int, ...]] = OrderedDict()
    t = cfg.i2t
    if t.enabled:
        cin = cfg.in_channels
        for i in range(t.num_convs):
            shapes[f"stem.conv{i}.weight"] = (t.channels, cin, t.conv_kernel, t.conv_kernel)
            shapes[f"stem.conv{i}.bias"] = (t.channels,)
            if t.use_bn:
                shapes[f"stem.bn{i}.weight"] = (t.channels,)
                shapes[f"stem.bn{i}.bias"] = (t.channels,)
            cin = t.channels
    patch_dim = cfg.stem_channels * cfg.patch_size**2
    shapes["embed.proj.weight"] = (patch_dim, c)
    shapes["embed.proj.bias"] = (c,)
    shapes["cls_token"] = (1, 1, c)
    shapes["pos_embed"] = (1, cfg.num_patches + 1, c)

    def attn(prefix: str, split_q: bool) -> None:
        if split_q:
            shapes[f"{prefix}.q.weight"] = (c, c)
            shapes[f"{prefix}.q.bias"] = (c,)
            shapes[f"{prefix}.kv.weight"] = (c, 2 * c)
            shapes[f"{prefix}.kv.bias"] = (2 * c,)
        else:
            shapes[f"{prefix}.qkv.weight"] = (c, 3 * c)
            shapes[f"{prefix}.qkv.bias"] = (3 * c,)
        shapes[f"{prefix}.proj.weight"] = (c, c)
        shapes[f"{prefix}.proj.bias"] = (c,)

    def ffn(prefix: str, leff: bool) -> None:
        shapes[f"{prefix}.fc1.weight"] = (c, hid)
        shapes[f"{prefix}.fc1.bias"] = (hid,)
        if leff:
            if cfg.leff_use_bn:
                shapes[f"{prefix}.bn1.weight"] = (hid,)
                shapes[f"{prefix}.bn1.bias"] = (hid,)
            shapes[f"{prefix}.dw.weight"] = (hid, 1, cfg.leff_kernel, cfg.leff_kernel)
            shapes[f"{prefix}.dw.bias"] = (hid,)
            if cfg.leff_use_bn:
                shapes[f"{prefix}.bn2.weight"] = (hid,)
                shapes[f"{prefix}.bn2.bias"] = (hid,)
        shapes[f"{prefix}.fc2.weight"] = (hid, c)
        shapes[f"{prefix}.fc2.bias"] = (c,)
        if leff and cfg.leff_use_bn:
            shapes[f"{prefix}.bn3.weight"] = (c,)
            shapes[f"{prefix}.bn3.bias"] = (c,)

    def block(prefix: str, leff: bool, split_q: bool) -> None:
        shapes[f"{prefix}.norm1.weight"] = (c,)
        shapes[f"{prefix}.norm1.bias"] = (c,)
        attn(f"{prefix}.attn", split_q)
        shapes[f"{prefix}.norm2.weight"] = (c,)
        shapes[f"{prefix}.norm2.bias"] = (c,)
        ffn(f"{prefix}.ffn", leff)

    for i in range(cfg.depth):
        block(f"blocks.{i}", cfg.ffn_kind == "leff", split_q=False)
    if cfg.use_lca:
        block("lca", leff=False, split_q=True)
    if cfg.norm_order == "pre":
        shapes["norm.weight"] = (c,)
        shapes["norm.bias"] = (c,)
    shapes["head.weight"] = (c, cfg.num_classes)
    shapes["head.bias"] = (cfg.num_classes,)
    return shapes


def batchnorm_channels(cfg: ModelConfig) -> "OrderedDict[str, int]":
    out: OrderedDict[str, int] = OrderedDict()
    if cfg.i2t.enabled and cfg.i2t.use_bn:
        for i in range(cfg.i2t.num_convs):
            out[f"stem.bn{i}"] = cfg.i2t.channels
    if cfg.ffn_kind == "leff" and cfg.leff_use_bn:
        for i in range(cfg.depth):
            out[f"blocks.{i}.ffn.bn1"] = cfg.hidden_dim
            out[f"blocks.{i}.ffn.bn2"] = cfg.hidden_dim
            out[f"blocks.{i}.ffn.bn3"] = cfg.embed_dim
    return out


def init_parameters(cfg: ModelConfig, seed: int = 0, scheme: str = "default") -> "OrderedDict[str, Tensor]":
    """Allocate parameters.

    ``default``: truncated normal (std 0.02) for linears, embeddings and the
    class token; fan-in scaled normal for convolutions; ones/zeros for norms;
    zero biases and zero output projections on residual branches.
    ``random``: ``default`` plus unit-scale noise on every tensor, so no
    gradient is structurally zero (for gradient checks).
    ``zeros``: all zeros (cheap allocation for cost counting).
    """
    dtype = np.dtype(cfg.dtype)
    rng = np.random.default_rng(seed)
    params: OrderedDict[str, Tensor] = OrderedDict()
    for name, shape in parameter_shapes(cfg).items():
        if scheme == "zeros":
            data = np.zeros(shape, dtype=dtype)
        elif name.endswith(".bias"):
            data = np.zeros(shape, dtype=dtype)
        elif ".norm" in name or ".bn" in name or name.startswith("norm."):
            data = np.ones(shape, dtype=dtype)
        elif ".conv" in name or ".dw." in name:
            fan_in = int(np.prod(shape[1:]))
            data = (rng.normal(0.0, 1.0, size=shape) / np.sqrt(fan_in)).astype(dtype)
        elif name.endswith(("attn.proj.weight", "ffn.fc2.weight")):
            data = np.zeros(shape, dtype=dtype)
        else:
            data = _trunc_normal(rng, shape, 0.02, dtype)
        if scheme == "random":
            scale = 1.0 / np.sqrt(shape[0]) if len(shape) == 2 else 0.3
            data = data + (rng.normal(0.0, scale, size=shape)).astype(dtype)
        elif scheme not in ("default", "zeros"):
            raise ValueError(f"unknown init scheme {scheme!r}")
        params[name] = Tensor(data, requires_grad=True, dtype=dtype)
    return params


class CeiT:
    """A CeiT (or, with the ablation switches off, a plain ViT/DeiT) classifier."""

    def __init__(self, cfg: ModelConfig, params=None, seed: int = 0, init: str = "default") -> None:
        self.cfg = cfg.validate()
        self.params = init_parameters(cfg, seed, init) if params is None else params
        expected = parameter_shapes(cfg)
        if list(self.params) != list(expected):
            missing = [k for k in expected if k not in self.params]
            extra = [k for k in self.params if k not in expected]
            raise ShapeError(f"parameter names do not match config (missing {missing[:3]}, unexpected {extra[:3]})")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ShapeError(f"parameter {name}: expected shape {shape}, got {self.params[name].shape}")
        dtype = np.dtype(cfg.dtype)
        self.stats: OrderedDict[str, RunningStats] = OrderedDict(
            (name, RunningStats(ch, cfg.bn_momentum, dtype)) for name, ch in batchnorm_channels(cfg).items()
        )
        self.training = False
        self.update_stats = True

    # -- helpers ---------------------------------------------------------------

    def p(self, name: str) -> Tensor:
        return self.params[name]

    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def _linear(self, x: Tensor, prefix: str) -> Tensor:
        return T.linear(x, self.p(prefix + ".weight"), self.p(prefix + ".bias"))

    def _layer_norm(self, x: Tensor, prefix: str) -> Tensor:
        return T.layer_norm(x, self.p(prefix + ".weight"), self.p(prefix + ".bias"), eps=self.cfg.norm_eps)

    def _batch_norm(self, x: Tensor, prefix: str, axis: int) -> Tensor:
        return T.batch_norm(
            x,
            self.p(prefix + ".weight"),
            self.p(prefix + ".bias"),
            self.stats[prefix],
            training=self.training,
            axis=axis,
            eps=self.cfg.norm_eps,
            update_stats=self.update_stats,
        )

    # -- stem and tokenization ------------------------------------------------------

    def i2t_forward(self, image: Tensor) -> Tensor:
        """``MaxPool(BN(Conv(x)))``: [B, 3, H, W] -> [B, D, H/S, W/S]; identity when disabled."""
        cfg, t = self.cfg, self.cfg.i2t
        if image.ndim != 4 or image.shape[1] != cfg.in_channels:
            raise ShapeError(f"expected images [B, {cfg.in_channels}, H, W], got {image.shape}")
        h, w = image.shape[2:]
        if h % t.stride or w % t.stride:
            raise ShapeError(f"image {h}x{w} is not divisible by the stem stride {t.stride}")
        if not t.enabled:
            return image
        x = image
        for i in range(t.num_convs):
            x = T.conv2d(
                x,
                self.p(f"stem.conv{i}.weight"),
                self.p(f"stem.conv{i}.bias"),
                stride=t.conv_stride,
                padding=t.conv_kernel // 2,
            )
            if t.use_bn:
                x = self._batch_norm(x, f"stem.bn{i}", axis=1)
        if t.use_maxpool:
            x = T.max_pool2d(x, t.pool_kernel, t.pool_stride, padding=t.pool_kernel // 2)
        return x

    def patch_embed(self, features: Tensor, patch_perm=None) -> TokenSequence:
        """Flatten non-overlapping P'xP' patches, project to C, prepend the class token, add positions.

        ``patch_perm`` reorders the patch tokens together with their
        positional embeddings (used to probe permutation equivariance).
        """
        b, d, h, w = features.shape
        ps = self.cfg.patch_size
        if h % ps or w % ps or h != w:
            raise ShapeError(f"feature map {h}x{w} cannot be tiled by {ps}x{ps} patches into a square grid")
        g = h // ps
        if g * g != self.cfg.num_patches:
            raise ShapeError(f"{g * g} patches do not match the configured {self.cfg.num_patches}")
        patches = features.reshape(b, d, g, ps, g, ps).permute(0, 2, 4, 1, 3, 5).reshape(b, g * g, d * ps * ps)
        tokens = self._linear(patches, "embed.proj")
        pos = self.p("pos_embed")
        if patch_perm is not None:
            perm = np.asarray(patch_perm)
            tokens = tokens[:, perm]
            pos = T.concat([pos[:, :1], pos[:, 1:][:, perm]], axis=1)
        cls = T.add(Tensor(np.zeros((b, 1, self.cfg.embed_dim), dtype=tokens.dtype)), self.p("cls_token"))
        seq = T.add(T.concat([cls, tokens], axis=1), pos)
        return TokenSequence(seq, g)

    # -- encoder sub-layers ----------------------------------------------------------

    def _heads(self, x: Tensor) -> Tensor:
        b, n, c = x.shape
        h = self.cfg.heads
        return x.reshape(b, n, h, c // h).permute(0, 2, 1, 3)

    def _attend(self, q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
        """Per-head ``softmax(q k^T / sqrt(d_head)) v`` on [B, h, n, d] operands."""
        d = q.shape[-1]
        scores = T.matmul(q, k.transpose(-2, -1)) * (1.0 / np.sqrt(d))
        attn = T.softmax(scores, axis=-1)
        return T.matmul(attn, v), attn

    def _merge_heads(self, x: Tensor) -> Tensor:
        b, h, n, d = x.shape
        return x.permute(0, 2, 1, 3).reshape(b, n, h * d)

    def msa_forward(self, x: Tensor, prefix: str, record: ForwardRecord | None = None) -> Tensor:
        b, n, c = x.shape
        h = self.cfg.heads
        qkv = self._linear(x, prefix + ".qkv").reshape(b, n, 3, h, c // h).permute(2, 0, 3, 1, 4)
        out, attn = self._attend(qkv[0], qkv[1], qkv[2])
        if record is not None:
            record.block_attention.append(attn.data)
        return self._linear(self._merge_heads(out), prefix + ".proj")

    def ffn_forward(self, x: Tensor, prefix: str) -> Tensor:
        """``GELU(x W1 + b1) W2 + b2`` applied to every token."""
        return self._linear(T.gelu(self._linear(x, prefix + ".fc1")), prefix + ".fc2")

    def leff_forward(self, x: Tensor, prefix: str) -> Tensor:
        """Locally-enhanced feed-forward on a [B, N+1, C] token tensor.

        The class token is split off and returned untouched; patch tokens go
        through Linear1, a spatial restore to the sqrt(N) x sqrt(N) grid, a
        depth-wise k x k convolution, a flatten and Linear2, each stage
        followed by (optional) batch norm and GELU.
        """
        cfg = self.cfg
        b, n1, _ = x.shape
        g = int(round(np.sqrt(n1 - 1)))
        if g * g != n1 - 1:
            raise ShapeError(f"LeFF needs a square number of patch tokens, got {n1 - 1}")
        cls, patches = x[:, :1], x[:, 1:]
        hid = cfg.hidden_dim
        y = self._linear(patches, prefix + ".fc1")
        if cfg.leff_use_bn:
            y = self._batch_norm(y, prefix + ".bn1", axis=2)
        y = T.gelu(y)
        y = spatial_restore(y, g)
        y = T.conv2d(
            y,
            self.p(prefix + ".dw.weight"),
            self.p(prefix + ".dw.bias"),
            padding=(cfg.leff_kernel - 1) // 2,
            groups=hid,
        )
        if cfg.leff_use_bn:
            y = self._batch_norm(y, prefix + ".bn2", axis=1)
        y = flatten_grid(T.gelu(y))
        y = self._linear(y, prefix + ".fc2")
        if cfg.leff_use_bn:
            y = self._batch_norm(y, prefix + ".bn3", axis=2)
        y = T.gelu(y)
        return T.concat([cls, y], axis=1)

    def _ffn_slot(self, x: Tensor, prefix: str) -> Tensor:
        """Residual-branch contribution of the FFN sub-layer.

        For LeFF the class token maps identically through the whole
        sub-layer, so its branch contribution is zero rather than a copy of
        the (normalized) input token.
        """
        if self.cfg.ffn_kind == "leff":
            out = self.leff_forward(x, prefix)
            zero = Tensor(np.zeros((x.shape[0], 1, x.shape[2]), dtype=x.dtype))
            return T.concat([zero, out[:, 1:]], axis=1)
        return self.ffn_forward(x, prefix)

    def encoder_block_forward(self, seq: TokenSequence, index: int, record: ForwardRecord | None = None) -> TokenSequence:
        prefix = f"blocks.{index}"
        x = seq.tokens
        if self.cfg.norm_order == "pre":
            x = x + self.msa_forward(self._layer_norm(x, prefix + ".norm1"), prefix + ".attn", record)
            y = x + self._ffn_slot(self._layer_norm(x, prefix + ".norm2"), prefix + ".ffn")
        else:
            x = self._layer_norm(x + self.msa_forward(x, prefix + ".attn", record), prefix + ".norm1")
            y = self._layer_norm(x + self._ffn_slot(x, prefix + ".ffn"), prefix + ".norm2")
        return seq.replace(y)

    def lca_forward(self, class_tokens: Tensor, record: ForwardRecord | None = None) -> Tensor:
        """Attend from the last layer's class token to all L class tokens: [B, L, C] -> [B, C].

        Only the final token forms a query, so each head scores a 1 x L row.
        """
        if class_tokens.ndim != 3 or class_tokens.shape[1] < 1:
            raise ShapeError(f"LCA needs a non-empty [B, L, C] class-token trace, got {class_tokens.shape}")
        pre = self.cfg.norm_order == "pre"
        last = class_tokens[:, -1:]
        src = self._layer_norm(class_tokens, "lca.norm1") if pre else class_tokens
        q = self._heads(self._linear(src[:, -1:], "lca.attn.q"))
        b, n, c = src.shape
        kv = self._linear(src, "lca.attn.kv").reshape(b, n, 2, self.cfg.heads, c // self.cfg.heads).permute(2, 0, 3, 1, 4)
        out, attn = self._attend(q, kv[0], kv[1])
        if record is not None:
            record.lca_attention = attn.data
        out = self._linear(self._merge_heads(out), "lca.attn.proj")
        if pre:
            x = last + out
            y = x + self.ffn_forward(self._layer_norm(x, "lca.norm2"), "lca.ffn")
        else:
            x = self._layer_norm(last + out, "lca.norm1")
            y = self._layer_norm(x + self.ffn_forward(x, "lca.ffn"), "lca.norm2")
        return y[:, 0]

    # -- full model ------------------------------------------------------------------

    def forward(self, images, patch_perm=None, record: ForwardRecord | None = None) -> Tensor:
        """Images [B, 3, H, W] -> logits [B, num_classes]."""
        cfg = self.cfg
        images = T.as_tensor(images, dtype=np.dtype(cfg.dtype))
        if images.ndim != 4 or images.shape[2:] != (cfg.image_size, cfg.image_size):
            raise ShapeError(f"expected images of size {cfg.image_size}x{cfg.image_size}, got {images.shape}")
        seq = self.patch_embed(self.i2t_forward(images), patch_perm)
        trace = []
        for i in range(cfg.depth):
            seq = self.encoder_block_forward(seq, i, record)
            trace.append(seq.tokens[:, :1])
            if record is not None:
                record.token_counts.append(seq.tokens.shape[1])
        if record is not None:
            record.class_tokens = T.concat(trace, axis=1)
        if cfg.use_lca:
            class_tokens = record.class_tokens if record is not None else T.concat(trace, axis=1)
            rep = self.lca_forward(class_tokens, record)
        else:
            rep = seq.tokens[:, 0]
        if cfg.norm_order == "pre":
            rep = self._layer_norm(rep, "norm")
        return self._linear(rep, "head")

    __call__ = forward

    def train(self, mode: bool = True) -> "CeiT":
        self.training = mode
        return self

    def eval(self) -> "CeiT":
        return self.train(False)


def spatial_restore(tokens: Tensor, grid_side: int) -> Tensor:
    """[B, N, E] patch tokens in row-major patch order -> [B, E, g, g] image."""
    b, n, e = tokens.shape
    if n != grid_side**2:
        raise ShapeError(f"{n} tokens do not fill a {grid_side}x{grid_side} grid")
    return tokens.reshape(b, grid_side, grid_side, e).permute(0, 3, 1, 2)


def flatten_grid(x: Tensor) -> Tensor:
    """Inverse of :func:`spatial_restore`: [B, E, g, g] -> [B, g*g, E]."""
    b, e, g, _ = x.shape
    return x.permute(0, 2, 3, 1).reshape(b, g * g, e)
