"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor


def numerical_gradient(f: Callable[[], float], x: Tensor, eps: float = 1e-5) -> np.ndarray:
    """d f / d x by central differences, perturbing ``x.data`` in place one element at a time."""
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f()
        flat[i] = orig - eps
        lo = f()
        flat[i] = orig
        out[i] = (hi - lo) / (2 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps finite-difference round-off (about 1e-11 absolute for an
    O(1) loss at step 1e-5) from dominating near-zero gradient entries.
    """
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


@dataclass
class GradCheckResult:
    threshold: float
    errors: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(e < self.threshold for e in self.errors.values())

    @property
    def failures(self) -> list[str]:
        return [name for name, e in self.errors.items() if not e < self.threshold]

    def format_table(self) -> str:
        width = max([len(n) for n in self.errors] + [9])
        lines = [f"{'parameter':<{width}}  {'max rel err':>12}  status"]
        for name, e in self.errors.items():
            lines.append(f"{name:<{width}}  {e:>12.3e}  {'ok' if e < self.threshold else 'FAIL'}")
        verdict = "PASS" if self.passed else f"FAIL ({len(self.failures)} parameter(s))"
        lines.append(f"threshold {self.threshold:g}: {verdict}")
        return "\n".join(lines)


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-5,
    threshold: float = 1e-4,
    floor: float = 1e-6,
    corrupt: str | None = None,
) -> GradCheckResult:
    """Compare backprop gradients of ``loss_fn()`` against central differences for every tensor in ``params``.

    Errors use a denominator floor of ``floor * max(1, |loss|)``, which
    keeps round-off on structurally zero gradients (e.g. key biases, which
    softmax ignores) from reading as failures.

    ``loss_fn`` must be a pure function of the parameter values. ``corrupt``
    names a parameter whose analytic gradient is deliberately perturbed, as a
    negative control.
    """
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    loss.backward()
    # central-difference round-off grows with |loss|, so the floor does too
    floor = floor * max(1.0, abs(loss.item()))
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for name, p in params.items()}
    if corrupt is not None:
        if corrupt not in analytic:
            raise KeyError(f"unknown parameter {corrupt!r}")
        analytic[corrupt] = analytic[corrupt] * 1.01 + 1e-3

    def f() -> float:
        return loss_fn().item()

    result = GradCheckResult(threshold)
    for name, p in params.items():
        numeric = numerical_gradient(f, p, eps)
        result.errors[name] = float(relative_error(analytic[name], numeric, floor).max(initial=0.0))
    return result


def model_gradcheck(
    cfg,
    seed: int = 0,
    scope: str = "model",
    batch: int = 2,
    eps: float = 1e-5,
    threshold: float = 1e-4,
    corrupt: str | None = None,
) -> GradCheckResult:
    """Finite-difference check of a whole CeiT model (``scope="model"``) or of its LCA head alone.

    The model runs in train mode with frozen running statistics so that the
    loss is a pure function of the parameters; every tensor also receives a
    random perturbation so that no gradient is zero by initialization.
    """
    from .model import CeiT
    from .tensor import cross_entropy, mul, tsum

    model = CeiT(cfg, seed=seed, init="random").train()
    model.update_stats = False
    rng = np.random.default_rng(seed + 1)
    if scope == "model":
        images = rng.normal(size=(batch, cfg.in_channels, cfg.image_size, cfg.image_size))
        labels = rng.integers(0, cfg.num_classes, size=batch)
        params = model.params

        def loss_fn() -> Tensor:
            return cross_entropy(model.forward(images), labels)

    elif scope == "lca":
        if not cfg.use_lca:
            raise ValueError("config has no LCA module to check")
        trace = Tensor(rng.normal(size=(batch, cfg.depth, cfg.embed_dim)), requires_grad=True)
        weights = rng.normal(size=(batch, cfg.embed_dim))
        params = {"class_tokens": trace, **{k: v for k, v in model.params.items() if k.startswith("lca.")}}

        def loss_fn() -> Tensor:
            return tsum(mul(model.lca_forward(trace), weights))

    else:
        raise ValueError(f"unknown scope {scope!r}; use 'model' or 'lca'")
    return check_gradients(loss_fn, params, eps=eps, threshold=threshold, corrupt=corrupt)
