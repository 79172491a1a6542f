"""L-infinity bounded first-order attacks: FGSM, MI-FGSM and PGD."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import Tensor, grad, ops, set_grad_enabled

KINDS = ("fgsm", "mifgsm", "pgd")


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "pgd"
    epsilon: float = 0.02
    steps: int = 10
    step_size: float | None = None  # None: kind-specific default
    momentum_decay: float = 1.0
    random_start: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}; expected one of {KINDS}")
        if not self.epsilon >= 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if int(self.steps) < 1:
            raise ValueError("steps must be a positive integer")
        if self.step_size is not None and self.step_size <= 0 and self.steps > 1:
            raise ValueError("step_size must be > 0 when steps > 1")

    @property
    def effective_steps(self) -> int:
        return 1 if self.kind == "fgsm" else int(self.steps)

    @property
    def effective_step_size(self) -> float:
        if self.kind == "fgsm":
            return self.epsilon
        if self.step_size is not None:
            return float(self.step_size)
        if self.kind == "pgd":
            return 2.5 * self.epsilon / self.steps
        return self.epsilon / self.steps

    def to_dict(self) -> dict:
        d = asdict(self)
        d["step_size"] = self.effective_step_size
        d["steps"] = self.effective_steps
        return d


def project_linf(x_adv, x, eps: float) -> np.ndarray:
    """Nearest point of the eps-ball around ``x``, then clamped to [0, 1]."""
    x_adv = np.asarray(x_adv, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x_adv.shape != x.shape:
        raise ValueError(f"shape mismatch {x_adv.shape} vs {x.shape}")
    return np.clip(np.clip(x_adv, x - eps, x + eps), 0.0, 1.0)


def cross_entropy_sum(logits: Tensor, y) -> Tensor:
    return -ops.sum(ops.pick(ops.log_softmax(logits), y))


def input_gradient(model, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, float]:
    """d(sum of per-sample CE)/dx in eval mode; also returns the loss value."""
    with set_grad_enabled(True):
        xt = Tensor(x, requires_grad=True)
        loss = cross_entropy_sum(model(xt).logits, y)
        (g,) = grad(loss, [xt])
    return g.data, loss.item()


def attack(model, x, y, cfg: AttackConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """Adversarial version of ``x`` (one image or a batch) under ``cfg``.

    Only reads the model; parameters are never modified.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    xb = x[None] if single else x
    yb = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if yb.shape[0] != xb.shape[0]:
        raise ValueError("one label per image required")
    if xb.min() < 0 or xb.max() > 1:
        raise ValueError("images must lie in [0, 1]")
    eps = float(cfg.epsilon)
    if eps == 0.0:
        return x.copy()
    if rng is None:
        rng = np.random.default_rng(cfg.seed)

    alpha = cfg.effective_step_size
    if cfg.kind == "fgsm":
        g, _ = input_gradient(model, xb, yb)
        out = project_linf(xb + eps * np.sign(g), xb, eps)
    else:
        adv = xb.copy()
        if cfg.kind == "pgd" and cfg.random_start:
            adv = project_linf(xb + rng.uniform(-eps, eps, size=xb.shape), xb, eps)
        momentum = np.zeros_like(xb)
        for _ in range(cfg.effective_steps):
            g, _ = input_gradient(model, adv, yb)
            if cfg.kind == "mifgsm":
                l1 = np.abs(g).reshape(len(g), -1).sum(axis=1).reshape((-1,) + (1,) * (g.ndim - 1))
                momentum = cfg.momentum_decay * momentum + g / np.maximum(l1, 1e-12)
                g = momentum
            adv = project_linf(adv + alpha * np.sign(g), xb, eps)
        out = adv
    return out[0] if single else out


def fgsm(model, x, y, eps: float) -> np.ndarray:
    return attack(model, x, y, AttackConfig("fgsm", eps, steps=1))


def pgd(model, x, y, eps: float, steps: int = 10, step_size: float | None = None,
        random_start: bool = True, seed: int = 0) -> np.ndarray:
    return attack(model, x, y, AttackConfig("pgd", eps, steps, step_size, random_start=random_start, seed=seed))
