"""Desk-scale training: synthetic data, AdamW with warmup + cosine, checkpoints.

File formats (all little-endian)
--------------------------------
Dataset container::

    magic   4s   b"CEDS"
    version u32  1
    count, channels, height, width, num_classes  u32 x 5
    dtype   u8   0 = float64, 1 = float32, then 3 pad bytes
    images  count*channels*height*width values of dtype, row-major
    labels  count int64

Checkpoint::

    magic      8s   b"CEITCKPT"
    version    u32  1
    header_len u32
    header     header_len bytes of UTF-8 JSON (sorted keys, compact) holding
               format_version, model_config, train_config, step, seed and a
               "tensors" list of {name, shape, dtype, offset, nbytes}
    payload    tensor bytes concatenated in header order; offsets are
               relative to the start of the payload

Tensor names are ``param/<p>``, ``adam_m/<p>``, ``adam_v/<p>``,
``bn_mean/<layer>`` and ``bn_var/<layer>``.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import config as config_mod
from .config import ModelConfig, TrainConfig
from .model import CeiT, parameter_shapes
from .tensor import ShapeError, Tensor, cross_entropy, no_grad

DATASET_MAGIC = b"CEDS"
DATASET_VERSION = 1
CHECKPOINT_MAGIC = b"CEITCKPT"
CHECKPOINT_VERSION = 1
_DS_HEADER = struct.Struct("<4sIIIIIIB3x")
_CK_HEADER = struct.Struct("<8sII")
_DTYPE_CODES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}


class CheckpointError(ValueError):
    pass


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, detail: str) -> None:
        super().__init__(f"training diverged at step {step}: {detail}")
        self.step = step


# -- data ------------------------------------------------------------------------


@dataclass
class Dataset:
    images: np.ndarray  # [M, C, H, W]
    labels: np.ndarray  # [M] int64
    num_classes: int
    split: str = "train"

    def __post_init__(self) -> None:
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.labels.shape != (self.images.shape[0],):
            raise ShapeError(f"images {self.images.shape} and labels {self.labels.shape} do not align")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.images.shape[0]

    def check_compatible(self, cfg: ModelConfig) -> None:
        want = (cfg.in_channels, cfg.image_size, cfg.image_size)
        if self.images.shape[1:] != want:
            raise ShapeError(f"dataset images are {self.images.shape[1:]}, model expects {want}")
        if self.num_classes > cfg.num_classes:
            raise ShapeError(f"dataset has {self.num_classes} classes, model only {cfg.num_classes}")


def synth_dataset(
    num_classes: int,
    samples: int,
    image_size: int,
    seed: int = 0,
    noise: float = 0.0,
    channels: int = 3,
) -> Dataset:
    """Each class is a fixed random blocky pattern (4x4 cells) plus optional Gaussian noise.

    Labels are balanced and shuffled; everything is a function of ``seed``.
    """
    if min(num_classes, samples, image_size, channels) < 1:
        raise ValueError("num_classes, samples, image_size and channels must be positive")
    rng = np.random.default_rng(seed)
    cell = max(image_size // 4, 1)
    coarse = rng.choice([-1.0, 1.0], size=(num_classes, channels, -(-image_size // cell), -(-image_size // cell)))
    patterns = np.kron(coarse, np.ones((1, 1, cell, cell)))[:, :, :image_size, :image_size]
    labels = rng.permutation(np.arange(samples) % num_classes)
    images = patterns[labels].copy()
    if noise:
        images += noise * rng.normal(size=images.shape)
    return Dataset(images, labels, num_classes)


def save_dataset(ds: Dataset, path: str | Path) -> None:
    code = 1 if ds.images.dtype == np.float32 else 0
    m, c, h, w = ds.images.shape
    with open(path, "wb") as fh:
        fh.write(_DS_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, m, c, h, w, ds.num_classes, code))
        fh.write(np.ascontiguousarray(ds.images, dtype=_DTYPE_CODES[code]).tobytes())
        fh.write(np.ascontiguousarray(ds.labels, dtype="<i8").tobytes())


def load_dataset(path: str | Path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < _DS_HEADER.size:
        raise ValueError(f"{path}: truncated dataset header")
    magic, version, m, c, h, w, k, code = _DS_HEADER.unpack_from(raw)
    if magic != DATASET_MAGIC:
        raise ValueError(f"{path}: not a dataset container")
    if version != DATASET_VERSION:
        raise ValueError(f"{path}: dataset version {version}, expected {DATASET_VERSION}")
    dtype = _DTYPE_CODES.get(code)
    if dtype is None:
        raise ValueError(f"{path}: unknown dtype code {code}")
    n_img = m * c * h * w
    off = _DS_HEADER.size
    end = off + n_img * dtype.itemsize
    if len(raw) != end + 8 * m:
        raise ValueError(f"{path}: payload size does not match header ({m}x{c}x{h}x{w})")
    images = np.frombuffer(raw, dtype=dtype, count=n_img, offset=off).reshape(m, c, h, w).astype(dtype.newbyteorder("="))
    labels = np.frombuffer(raw, dtype="<i8", count=m, offset=end).astype(np.int64)
    return Dataset(images, labels, int(k))


def dataset_from_npz(path: str | Path, out: str | Path) -> Dataset:
    """Converter stub: an ``.npz`` with ``images`` [M, C, H, W] and ``labels`` [M] -> container file."""
    with np.load(path) as data:
        images = np.asarray(data["images"], dtype=np.float64)
        labels = np.asarray(data["labels"], dtype=np.int64)
    ds = Dataset(images, labels, int(labels.max()) + 1 if labels.size else 1)
    save_dataset(ds, out)
    return ds


# -- optimizer and schedule ---------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray | None],
    state: AdamState,
    lr: float,
    weight_decay: float = 0.0,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """One AdamW update, in place on ``params`` and ``state``.

    Weight decay is decoupled (``p *= 1 - lr * wd``) and the moments are
    bias-corrected with the post-increment step count.
    """
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        elif not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay:
            p *= 1.0 - lr * weight_decay
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def total_steps(cfg: TrainConfig, steps_per_epoch: int) -> int:
    return cfg.epochs * steps_per_epoch


def lr_at(step: int, cfg: TrainConfig, steps_per_epoch: int = 1) -> float:
    """Learning rate at optimizer step ``step`` (0-based).

    Linear warmup reaches ``base_lr`` exactly at the first post-warmup step,
    then a cosine decays to ``base_lr * min_lr_ratio`` at the final step.
    """
    if step < 0:
        raise ValueError("step must be non-negative")
    base = cfg.base_lr
    warm = cfg.warmup_epochs * steps_per_epoch
    if step < warm:
        return base * (step + 1) / (warm + 1)
    if cfg.schedule == "constant":
        return base
    floor = base * cfg.min_lr_ratio
    last = total_steps(cfg, steps_per_epoch) - 1
    if last <= warm:
        return base
    t = min((step - warm) / (last - warm), 1.0)
    return floor + (base - floor) * 0.5 * (1.0 + math.cos(math.pi * t))


# -- checkpoints ----------------------------------------------------------------------


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    params: "OrderedDict[str, np.ndarray]"
    adam: AdamState
    bn_mean: "OrderedDict[str, np.ndarray]"
    bn_var: "OrderedDict[str, np.ndarray]"
    step: int
    seed: int

    @classmethod
    def capture(cls, model: CeiT, train_cfg: TrainConfig, adam: AdamState, step: int) -> "Checkpoint":
        return cls(
            model_config=model.cfg,
            train_config=train_cfg,
            params=OrderedDict((k, v.data.copy()) for k, v in model.params.items()),
            adam=AdamState(
                {k: adam.m[k].copy() for k in model.params if k in adam.m},
                {k: adam.v[k].copy() for k in model.params if k in adam.v},
                adam.step,
            ),
            bn_mean=OrderedDict((k, s.mean.copy()) for k, s in model.stats.items()),
            bn_var=OrderedDict((k, s.var.copy()) for k, s in model.stats.items()),
            step=step,
            seed=train_cfg.seed,
        )

    def build_model(self) -> CeiT:
        params = OrderedDict((k, Tensor(v.copy(), requires_grad=True)) for k, v in self.params.items())
        model = CeiT(self.model_config, params=params)
        for name, stats in model.stats.items():
            stats.mean[...] = self.bn_mean[name]
            stats.var[...] = self.bn_var[name]
        return model

    def tensors(self) -> list[tuple[str, np.ndarray]]:
        out = [(f"param/{k}", v) for k, v in self.params.items()]
        out += [(f"adam_m/{k}", v) for k, v in self.adam.m.items()]
        out += [(f"adam_v/{k}", v) for k, v in self.adam.v.items()]
        out += [(f"bn_mean/{k}", v) for k, v in self.bn_mean.items()]
        out += [(f"bn_var/{k}", v) for k, v in self.bn_var.items()]
        return out


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    entries = []
    blobs = []
    offset = 0
    for name, arr in ckpt.tensors():
        le = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        raw = le.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": le.dtype.str, "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": config_mod.to_dict(ckpt.model_config),
        "train_config": config_mod.to_dict(ckpt.train_config),
        "step": ckpt.step,
        "adam_step": ckpt.adam.step,
        "seed": ckpt.seed,
        "tensors": entries,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(_CK_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(head)))
        fh.write(head)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path: str | Path, expect: ModelConfig | None = None) -> Checkpoint:
    """Read a checkpoint; with ``expect`` also verify every parameter against that config."""
    raw = Path(path).read_bytes()
    if len(raw) < _CK_HEADER.size:
        raise CheckpointError(f"{path}: truncated checkpoint")
    magic, version, hlen = _CK_HEADER.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, this build reads {CHECKPOINT_VERSION}")
    base = _CK_HEADER.size + hlen
    if len(raw) < base:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[_CK_HEADER.size : base])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    payload = sum(e["nbytes"] for e in header["tensors"])
    if len(raw) != base + payload:
        raise CheckpointError(f"{path}: payload is {len(raw) - base} bytes, header describes {payload}")
    model_cfg = config_mod.from_dict(ModelConfig, header["model_config"], prefix="model.").validate()
    train_cfg = config_mod.from_dict(TrainConfig, header["train_config"], prefix="train.").validate()

    sections: dict[str, OrderedDict] = {s: OrderedDict() for s in ("param", "adam_m", "adam_v", "bn_mean", "bn_var")}
    for e in header["tensors"]:
        kind, name = e["name"].split("/", 1)
        dt = np.dtype(e["dtype"])
        arr = np.frombuffer(raw, dtype=dt, count=e["nbytes"] // dt.itemsize, offset=base + e["offset"])
        sections[kind][name] = arr.reshape(e["shape"]).astype(dt.newbyteorder("="))

    params = sections["param"]
    if expect is not None:
        want = parameter_shapes(expect)
        for name, shape in want.items():
            if name not in params:
                raise CheckpointError(f"checkpoint lacks parameter {name}")
            if params[name].shape != shape:
                raise CheckpointError(
                    f"shape mismatch for {name}: checkpoint has {params[name].shape}, config expects {shape}"
                )
        extra = [k for k in params if k not in want]
        if extra:
            raise CheckpointError(f"checkpoint has parameters unknown to the config, e.g. {extra[0]}")
    if list(params) != list(parameter_shapes(model_cfg)):
        raise CheckpointError("checkpoint parameter names do not match its own model config")
    adam = AdamState(dict(sections["adam_m"]), dict(sections["adam_v"]), int(header["adam_step"]))
    return Checkpoint(
        model_cfg, train_cfg, params, adam, sections["bn_mean"], sections["bn_var"], int(header["step"]), int(header["seed"])
    )


# -- loop -------------------------------------------------------------------------------


@dataclass
class TrainResult:
    history: list[dict]  # one row per optimizer step: step, epoch, lr, loss, accuracy
    epochs: list[dict]  # per-epoch mean loss / accuracy over the steps run in that epoch
    checkpoint: Checkpoint
    model: CeiT


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def train(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    dataset: Dataset,
    max_steps: int | None = None,
    resume: Checkpoint | None = None,
    on_step: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Minimize cross-entropy with AdamW.

    The batch order of epoch ``e`` is a permutation seeded by ``(seed, e)``,
    so a run resumed from a checkpoint replays exactly the batches an
    unbroken run would see. ``max_steps`` stops early (counting from step 0).
    """
    model_cfg.validate()
    train_cfg.validate()
    dataset.check_compatible(model_cfg)
    if resume is not None:
        model = resume.build_model()
        adam = AdamState({k: v.copy() for k, v in resume.adam.m.items()}, {k: v.copy() for k, v in resume.adam.v.items()}, resume.adam.step)
        start = resume.step
    else:
        model = CeiT(model_cfg, seed=train_cfg.seed)
        adam = AdamState()
        start = 0
    model.train()
    n = len(dataset)
    bs = train_cfg.batch_size
    spe = -(-n // bs)
    stop = total_steps(train_cfg, spe)
    if max_steps is not None:
        stop = min(stop, max_steps)
    dtype = np.dtype(model_cfg.dtype)

    history: list[dict] = []
    order = None
    order_epoch = -1
    for step in range(start, stop):
        epoch, k = divmod(step, spe)
        if epoch != order_epoch:
            order, order_epoch = epoch_order(train_cfg.seed, epoch, n), epoch
        idx = order[k * bs : (k + 1) * bs]
        images = dataset.images[idx].astype(dtype, copy=False)
        labels = dataset.labels[idx]
        lr = lr_at(step, train_cfg, spe)

        model.zero_grad()
        try:
            logits = model.forward(images)
            loss = cross_entropy(logits, labels)
            loss.backward()
            adamw_step(
                {k_: t.data for k_, t in model.params.items()},
                {k_: t.grad for k_, t in model.params.items()},
                adam,
                lr,
                train_cfg.weight_decay,
                train_cfg.betas,
                train_cfg.adam_eps,
            )
        except FloatingPointError as exc:
            raise TrainingDiverged(step, str(exc)) from exc
        value = loss.item()
        row = {
            "step": step,
            "epoch": epoch,
            "lr": lr,
            "loss": value,
            "accuracy": float((logits.data.argmax(axis=1) == labels).mean()),
        }
        history.append(row)
        if on_step is not None:
            on_step(row)

    epochs = []
    for e in sorted({r["epoch"] for r in history}):
        rows = [r for r in history if r["epoch"] == e]
        epochs.append(
            {
                "epoch": e,
                "loss": float(np.mean([r["loss"] for r in rows])),
                "accuracy": float(np.mean([r["accuracy"] for r in rows])),
            }
        )
    ckpt = Checkpoint.capture(model, train_cfg, adam, max(stop, start))
    return TrainResult(history, epochs, ckpt, model)


def evaluate(model: CeiT, dataset: Dataset, batch_size: int = 32) -> float:
    """Top-1 accuracy in eval mode (running batch-norm statistics)."""
    dataset.check_compatible(model.cfg)
    was = model.training
    model.eval()
    correct = 0
    dtype = np.dtype(model.cfg.dtype)
    with no_grad():
        for i in range(0, len(dataset), batch_size):
            logits = model.forward(dataset.images[i : i + batch_size].astype(dtype, copy=False))
            correct += int((logits.data.argmax(axis=1) == dataset.labels[i : i + batch_size]).sum())
    model.train(was)
    return correct / max(len(dataset), 1)


def write_metrics_csv(history: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "lr", "loss", "accuracy"])
        for r in history:
            writer.writerow([r["step"], repr(r["lr"]), repr(r["loss"]), repr(r["accuracy"])])


# -- ablation grid ------------------------------------------------------------------------

I2T_ARMS = {
    "none": config_mod.I2TConfig(enabled=False),
    "k7s4": config_mod.I2TConfig(conv_kernel=7, conv_stride=4, channels=64, use_maxpool=False, use_bn=False),
    "k5s4": config_mod.I2TConfig(conv_kernel=5, conv_stride=4, channels=64, use_maxpool=False, use_bn=False),
    "k3s2+k3s2": config_mod.I2TConfig(conv_kernel=3, conv_stride=2, num_convs=2, channels=64, use_maxpool=False, use_bn=False),
    "k7s2+pool": config_mod.I2TConfig(channels=32, use_bn=False),
    "k7s2+pool+bn": config_mod.I2TConfig(channels=32, use_bn=True),
}

LEFF_ARMS = {
    "ffn": dict(ffn_kind="baseline_ffn"),
    "k1": dict(leff_kernel=1, leff_use_bn=False),
    "k3": dict(leff_kernel=3, leff_use_bn=False),
    "k5": dict(leff_kernel=5, leff_use_bn=False),
    "k3+bn": dict(leff_kernel=3, leff_use_bn=True),
    "k5+bn": dict(leff_kernel=5, leff_use_bn=True),
}


def ablation_configs(base: ModelConfig) -> "OrderedDict[str, ModelConfig]":
    """The I2T and LeFF ablation arms applied to a DeiT-style ``base``.

    I2T arms keep the raw-path token count (the patch side shrinks by the
    stem stride); the stem channel counts are scaled down for desk use only
    through ``base`` (callers pass a small base).
    """
    import copy

    out: OrderedDict[str, ModelConfig] = OrderedDict()
    raw_patch = base.patch_size * base.i2t.stride
    for name, arm in I2T_ARMS.items():
        cfg = copy.deepcopy(base)
        cfg.i2t = copy.deepcopy(arm)
        cfg.patch_size = raw_patch // cfg.i2t.stride
        out[f"i2t:{name}"] = cfg.validate()
    for name, arm in LEFF_ARMS.items():
        cfg = copy.deepcopy(base)
        for k, v in arm.items():
            setattr(cfg, k, v)
        if "ffn_kind" not in arm:
            cfg.ffn_kind = "leff"
        out[f"leff:{name}"] = cfg.validate()
    return out


def run_ablation_grid(base: ModelConfig, train_cfg: TrainConfig, dataset: Dataset, max_steps: int | None = None) -> list[dict]:
    """Construct, count and train every ablation arm; return one summary row per arm."""
    from .complexity import analyze

    rows = []
    for name, cfg in ablation_configs(base).items():
        report = analyze(cfg)
        result = train(cfg, train_cfg, dataset, max_steps=max_steps)
        rows.append(
            {
                "arm": name,
                "params": report.params,
                "flops": report.flops,
                "first_loss": result.history[0]["loss"],
                "final_loss": result.history[-1]["loss"],
                "train_accuracy": evaluate(result.model, dataset),
            }
        )
    return rows


def format_ablation_table(rows: list[dict]) -> str:
    lines = [f"{'arm':<18} {'params':>10} {'flops':>12} {'loss0':>8} {'lossN':>8} {'acc':>6}"]
    for r in rows:
        lines.append(
            f"{r['arm']:<18} {r['params']:>10,} {r['flops']:>12,} {r['first_loss']:>8.4f} {r['final_loss']:>8.4f} {r['train_accuracy']:>6.2f}"
        )
    return "\n".join(lines)
