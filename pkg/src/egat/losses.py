"""Training objectives: cross-entropy, adversarial KL + saliency consistency,
explanation alignment against a luminance guide map, saliency mixup, and the
weighted sum of the four, plus the ERM and input-gradient reference losses.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .attacks import AttackConfig, attack
from .autodiff import Tensor, grad, ops, set_grad_enabled
from .data import guide_map
from .explain import cam_from_activations, normalize_saliency, upsample_bilinear

LOG_EPS = 1e-12


@dataclass(frozen=True)
class EgatConfig:
    lambda1: float = 0.5
    lambda2: float = 1.0
    lambda3: float = 1.0
    lambda4: float = 0.2
    attack: AttackConfig = field(default_factory=lambda: AttackConfig("pgd", 0.02, 10, random_start=False))
    mixup_alpha: float = 1.0
    detach_cam_weights: bool = False

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3", "lambda4"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not self.mixup_alpha > 0:
            raise ValueError("mixup_alpha must be > 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["attack"] = self.attack.to_dict()
        return d


@dataclass
class LossBreakdown:
    total: float = 0.0
    cls: float = 0.0
    adv_kl: float = 0.0
    adv_saliency: float = 0.0
    egl: float = 0.0
    reg_ce: float = 0.0
    reg_attr: float = 0.0
    reg_sparsity: float = 0.0
    igr_penalty: float = 0.0

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def recomposed(self, cfg: EgatConfig, igr_weight: float = 0.0) -> float:
        return (self.cls + cfg.lambda1 * (self.adv_kl + cfg.lambda4 * self.adv_saliency)
                + cfg.lambda2 * self.egl + cfg.lambda3 * (self.reg_ce + self.reg_attr + self.reg_sparsity)
                + igr_weight * self.igr_penalty)

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


# ---------------------------------------------------------------------------
# elementary pieces


def cross_entropy(logits: Tensor, y) -> Tensor:
    """Mean cross-entropy of softmax(logits) against integer labels."""
    y = np.asarray(y, dtype=np.int64)
    if logits.shape[0] == 0 or y.size == 0:
        raise ValueError("empty batch")
    if np.any(y < 0) or np.any(y >= logits.shape[1]):
        raise ValueError("label out of range")
    return -ops.mean(ops.pick(ops.log_softmax(logits), y))


def kl_divergence(p: Tensor, q: Tensor) -> Tensor:
    """Per-row KL(p || q) with log(. + 1e-12) guards."""
    return ops.sum(p * (ops.log(p) - ops.log(q)), axis=-1)


def bce(pred, target) -> Tensor:
    """Mean binary cross-entropy with 1e-12 log guards."""
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    return -ops.mean(ops.log(pred) * t + ops.log(1.0 - pred) * (1.0 - t))


def map_l2(a: Tensor, b: Tensor) -> Tensor:
    """Per-sample L2 distance between (N, h, w) maps."""
    return ops.l2_norm(a - b, axis=(1, 2))


def map_l1_mean(a: Tensor) -> Tensor:
    """Per-sample mean absolute value over pixels of (N, h, w) maps."""
    return ops.mean(ops.abs(a), axis=(1, 2))


def _forward_cam(model, x, y, dropout_mask=None, detach=False, x_requires_grad=False):
    """One forward pass giving logits and the ground-truth Grad-CAM map."""
    xt = x if isinstance(x, Tensor) else Tensor(x, requires_grad=x_requires_grad)
    out = model(xt, dropout_mask=dropout_mask)
    acts = out.taps[model.tap_name]
    if not acts.requires_grad:
        # input-independent, parameter-free activations: rebuild the head on a leaf
        acts = Tensor(acts.data, requires_grad=True)
        logits = model.head(acts, dropout_mask)
    else:
        logits = out.logits
    cam = cam_from_activations(acts, logits, y, detach_weights=detach)
    return logits, cam


# ---------------------------------------------------------------------------
# objectives


def loss_cls(model, x, y, dropout_mask=None) -> Tensor:
    with set_grad_enabled(True):
        return cross_entropy(model(x, dropout_mask=dropout_mask).logits, y)


def loss_adv(model, x, y, cfg: EgatConfig, x_adv=None, rng=None, dropout_mask=None,
             clean=None) -> tuple[Tensor, Tensor]:
    """(KL(f(x) || f(x_adv)), ||Phi(x) - Phi(x_adv)||_2), both batch means.

    ``x_adv`` is generated with ``cfg.attack`` when not supplied and is treated
    as a constant. ``clean`` may pass a precomputed (logits, cam) for ``x``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x_adv is None:
        x_adv = attack(model, x, y, cfg.attack, rng=rng)
    with set_grad_enabled(True):
        logits, cam = clean if clean is not None else _forward_cam(
            model, x, y, dropout_mask, cfg.detach_cam_weights)
        logits_adv, cam_adv = _forward_cam(model, x_adv, y, dropout_mask, cfg.detach_cam_weights)
        kl = ops.mean(kl_divergence(ops.softmax(logits), ops.softmax(logits_adv)))
        sal = ops.mean(map_l2(cam, cam_adv))
    return kl, sal


def explanation_target(x) -> np.ndarray:
    """Guide maps M(x) for a batch: (N, H, W)."""
    x = np.asarray(x, dtype=np.float64)
    return np.stack([guide_map(xi) for xi in x])


def loss_egl(model, x, y, dropout_mask=None, detach=False, cam=None) -> Tensor:
    """BCE between the normalised, input-resolution Grad-CAM map and the guide map."""
    x = np.asarray(x, dtype=np.float64)
    with set_grad_enabled(True):
        if cam is None:
            _, cam = _forward_cam(model, x, y, dropout_mask, detach)
        phi = upsample_bilinear(normalize_saliency(cam), *x.shape[-2:])
        return bce(phi, explanation_target(x))


def mixup_pairs(y, rng: np.random.Generator) -> np.ndarray:
    """Partner index for each sample, shuffled among same-label samples.

    A sample whose label occurs once pairs with itself.
    """
    y = np.asarray(y)
    partner = np.arange(len(y))
    for label in np.unique(y):
        idx = np.flatnonzero(y == label)
        if len(idx) > 1:
            partner[idx] = idx[rng.permutation(len(idx))]
    return partner


def loss_reg_mixup(model, x, y, cfg: EgatConfig, rng: np.random.Generator | None = None,
                   beta: float | None = None, partner=None, dropout_mask=None,
                   clean=None) -> tuple[Tensor, Tensor, Tensor]:
    """(CE on the mixed input, L1 attribution-mixing gap, L1 sparsity of Phi(x)).

    One Beta(alpha, alpha) coefficient is drawn per batch; the mixed sample of
    ``x[i]`` is ``beta * x[i] + (1 - beta) * x[partner[i]]``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    rng = rng if rng is not None else np.random.default_rng(0)
    if partner is None:
        partner = mixup_pairs(y, rng)
    if beta is None:
        beta = float(rng.beta(cfg.mixup_alpha, cfg.mixup_alpha))
    x_mix = beta * x + (1.0 - beta) * x[partner]
    with set_grad_enabled(True):
        if clean is None:
            clean = _forward_cam(model, x, y, dropout_mask, cfg.detach_cam_weights)
        cam = clean[1]
        logits_mix, cam_mix = _forward_cam(model, x_mix, y, dropout_mask, cfg.detach_cam_weights)
        reg_ce = cross_entropy(logits_mix, y)
        blended = cam * beta + ops.take(cam, partner) * (1.0 - beta)
        reg_attr = ops.mean(map_l1_mean(blended - cam_mix))
        reg_sparsity = ops.mean(map_l1_mean(cam))
    return reg_ce, reg_attr, reg_sparsity


def loss_total(model, x, y, cfg: EgatConfig, rng: np.random.Generator | None = None,
               x_adv=None, dropout_mask=None, beta: float | None = None,
               partner=None) -> tuple[Tensor, LossBreakdown]:
    """Weighted EGAT objective and its per-term breakdown.

    Terms whose weight is zero are skipped (reported as 0) so that a zero
    weighting reduces exactly to cross-entropy training.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    rng = rng if rng is not None else np.random.default_rng(0)
    bd = LossBreakdown()
    need_cam = cfg.lambda2 > 0 or cfg.lambda3 > 0 or (cfg.lambda1 > 0 and cfg.lambda4 > 0)
    with set_grad_enabled(True):
        if need_cam:
            logits, cam = _forward_cam(model, x, y, dropout_mask, cfg.detach_cam_weights)
        else:
            logits, cam = model(x, dropout_mask=dropout_mask).logits, None
        cls = cross_entropy(logits, y)
        total = cls
        bd.cls = cls.item()
        if cfg.lambda1 > 0:
            if x_adv is None:
                x_adv = attack(model, x, y, cfg.attack, rng=rng)
            logits_adv = cam_adv = None
            if cfg.lambda4 > 0:
                logits_adv, cam_adv = _forward_cam(model, x_adv, y, dropout_mask, cfg.detach_cam_weights)
            else:
                logits_adv = model(x_adv, dropout_mask=dropout_mask).logits
            kl = ops.mean(kl_divergence(ops.softmax(logits), ops.softmax(logits_adv)))
            adv = kl
            bd.adv_kl = kl.item()
            if cfg.lambda4 > 0:
                sal = ops.mean(map_l2(cam, cam_adv))
                adv = adv + sal * cfg.lambda4
                bd.adv_saliency = sal.item()
            total = total + adv * cfg.lambda1
        if cfg.lambda2 > 0:
            egl = loss_egl(model, x, y, cam=cam)
            total = total + egl * cfg.lambda2
            bd.egl = egl.item()
        if cfg.lambda3 > 0:
            reg_ce, reg_attr, reg_sp = loss_reg_mixup(model, x, y, cfg, rng=rng, beta=beta, partner=partner,
                                                      dropout_mask=dropout_mask, clean=(logits, cam))
            total = total + (reg_ce + reg_attr + reg_sp) * cfg.lambda3
            bd.reg_ce, bd.reg_attr, bd.reg_sparsity = reg_ce.item(), reg_attr.item(), reg_sp.item()
    bd.total = total.item()
    return total, bd


def input_gradient_penalty(model, x, y, dropout_mask=None) -> tuple[Tensor, Tensor]:
    """(mean CE, mean over samples of ||d CE_n / d x_n||^2), the latter differentiable."""
    x = np.asarray(x, dtype=np.float64)
    with set_grad_enabled(True):
        xt = Tensor(x, requires_grad=True)
        logits = model(xt, dropout_mask=dropout_mask).logits
        ce_sum = -ops.sum(ops.pick(ops.log_softmax(logits), y))
        if not ce_sum.requires_grad:
            return ce_sum * (1.0 / len(x)), Tensor(0.0)
        (gx,) = grad(ce_sum, [xt], create_graph=True)
        penalty = ops.mean(ops.sum(gx * gx, axis=tuple(range(1, gx.ndim))))
        return ce_sum * (1.0 / len(x)), penalty


def loss_igr(model, x, y, weight: float, dropout_mask=None) -> tuple[Tensor, LossBreakdown]:
    """Cross-entropy plus ``weight`` times the mean squared input-gradient norm."""
    cls, penalty = input_gradient_penalty(model, x, y, dropout_mask)
    total = cls + penalty * weight if weight else cls
    return total, LossBreakdown(total=total.item(), cls=cls.item(), igr_penalty=penalty.item())
