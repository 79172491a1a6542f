"""Accuracy, occlusion faithfulness (comprehensiveness / sufficiency) and the
empirical smoothness estimators used to audit the background-shift bound.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .attacks import AttackConfig, attack
from .autodiff import Tensor, grad, no_grad, ops, set_grad_enabled
from .explain import input_saliency

BASELINES = ("zero", "mean")


def _logits(model, x) -> Tensor:
    out = model(x)
    return out.logits if hasattr(out, "logits") else out


def probabilities(model, x, batch_size: int = 256) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    with no_grad():
        return np.concatenate([ops.softmax(_logits(model, Tensor(x[i:i + batch_size]))).data
                               for i in range(0, len(x), batch_size)])


# ---------------------------------------------------------------------------
# accuracy


def accuracy(model, x, y, attack_cfg: AttackConfig | None = None, batch_size: int = 100) -> float:
    """Fraction of argmax-correct predictions, on attacked inputs if ``attack_cfg`` is given.

    The attack generator is seeded from ``attack_cfg.seed`` once per call, so
    results do not depend on ``batch_size`` only when ``random_start`` is off.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(y) == 0:
        raise ValueError("accuracy of an empty set is undefined")
    if attack_cfg is not None and attack_cfg.epsilon > 0:
        rng = np.random.default_rng(attack_cfg.seed)
        x = np.concatenate([attack(model, x[i:i + batch_size], y[i:i + batch_size], attack_cfg, rng)
                            for i in range(0, len(y), batch_size)])
    pred = probabilities(model, x).argmax(axis=1)
    return float(np.mean(pred == y))


def per_class_accuracy(pred, y, num_classes: int) -> list[float | None]:
    pred, y = np.asarray(pred), np.asarray(y)
    return [float(np.mean(pred[y == c] == c)) if np.any(y == c) else None for c in range(num_classes)]


# ---------------------------------------------------------------------------
# occlusion faithfulness


def topk_count(k_fraction: float, num_pixels: int) -> int:
    if not 0 < k_fraction <= 1:
        raise ValueError(f"k_fraction must lie in (0, 1], got {k_fraction}")
    return max(1, int(math.ceil(k_fraction * num_pixels - 1e-9)))


def topk_mask(saliency, k_fraction: float) -> np.ndarray:
    """Boolean (N, H, W) mask of the top-k pixels; ties go to the lower row-major index."""
    s = np.asarray(saliency, dtype=np.float64)
    single = s.ndim == 2
    s = s[None] if single else s
    n, h, w = s.shape
    k = topk_count(k_fraction, h * w)
    order = np.argsort(-s.reshape(n, -1), axis=1, kind="stable")[:, :k]
    mask = np.zeros((n, h * w), dtype=bool)
    np.put_along_axis(mask, order, True, axis=1)
    mask = mask.reshape(n, h, w)
    return mask[0] if single else mask


def baseline_fill(x, baseline: str = "zero") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if baseline == "zero":
        return np.zeros_like(x)
    if baseline == "mean":
        return np.broadcast_to(x.mean(axis=(-2, -1), keepdims=True), x.shape).copy()
    raise ValueError(f"baseline must be one of {BASELINES}")


def remove_topk(x, saliency, k_fraction: float, baseline: str = "zero") -> np.ndarray:
    """x with its top-k salient pixels (all channels) replaced by the baseline."""
    x = np.asarray(x, dtype=np.float64)
    m = topk_mask(saliency, k_fraction)
    return np.where(m[..., None, :, :], baseline_fill(x, baseline), x)


def keep_topk(x, saliency, k_fraction: float, baseline: str = "zero") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    m = topk_mask(saliency, k_fraction)
    return np.where(m[..., None, :, :], x, baseline_fill(x, baseline))


def _class_prob(model, x, y) -> np.ndarray:
    p = probabilities(model, x)
    return p[np.arange(len(p)), np.asarray(y, dtype=np.int64)]


def _saliency(model, x, y, saliency):
    if saliency is not None:
        return np.asarray(saliency, dtype=np.float64)
    return input_saliency(model, x, y)


def comprehensiveness_per_sample(model, x, y, k_fraction: float = 0.2, baseline: str = "zero",
                                 saliency=None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    x = x[None] if x.ndim == 3 else x
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    sal = _saliency(model, x, y, saliency)
    return _class_prob(model, x, y) - _class_prob(model, remove_topk(x, sal, k_fraction, baseline), y)


def sufficiency_per_sample(model, x, y, k_fraction: float = 0.2, baseline: str = "zero",
                           saliency=None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    x = x[None] if x.ndim == 3 else x
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    sal = _saliency(model, x, y, saliency)
    return _class_prob(model, x, y) - _class_prob(model, keep_topk(x, sal, k_fraction, baseline), y)


def comprehensiveness(model, x, y, k_fraction: float = 0.2, baseline: str = "zero", saliency=None) -> float:
    """Mean drop in true-class probability once the top-k salient pixels are removed.

    The saliency defaults to the model's own Grad-CAM for the true class,
    upsampled to input resolution.
    """
    return float(np.mean(comprehensiveness_per_sample(model, x, y, k_fraction, baseline, saliency)))


def sufficiency(model, x, y, k_fraction: float = 0.2, baseline: str = "zero", saliency=None) -> float:
    """Mean drop in true-class probability when only the top-k salient pixels are kept."""
    return float(np.mean(sufficiency_per_sample(model, x, y, k_fraction, baseline, saliency)))


@dataclass
class MetricsReport:
    clean_accuracy: float
    adversarial_accuracy: float | None = None
    comprehensiveness: float | None = None
    sufficiency: float | None = None
    k_fraction: float | None = None
    baseline: str | None = None
    per_class: dict = field(default_factory=dict)
    attack: dict | None = None
    n: int = 0
    ood: bool = False

    def __post_init__(self):
        for name in ("clean_accuracy", "adversarial_accuracy"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} outside [0, 1]: {v}")
        for name in ("comprehensiveness", "sufficiency"):
            v = getattr(self, name)
            if v is not None and not -1.0 <= v <= 1.0:
                raise ValueError(f"{name} outside [-1, 1]: {v}")

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(model, x, y, attack_cfg: AttackConfig | None = None, metrics=("acc",),
             k_fraction: float = 0.2, baseline: str = "zero", ood: bool = False) -> MetricsReport:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(y) == 0:
        raise ValueError("cannot evaluate an empty set")
    C = int(_logits(model, Tensor(x[:1])).shape[1]) if not hasattr(model, "num_classes") else model.num_classes
    pred = probabilities(model, x).argmax(axis=1)
    rep = MetricsReport(float(np.mean(pred == y)), n=len(y), ood=ood)
    rep.per_class["clean"] = per_class_accuracy(pred, y, C)
    if attack_cfg is not None:
        rep.attack = attack_cfg.to_dict()
        if attack_cfg.epsilon == 0:
            rep.adversarial_accuracy = rep.clean_accuracy
            rep.per_class["adversarial"] = list(rep.per_class["clean"])
        else:
            rng = np.random.default_rng(attack_cfg.seed)
            xa = np.concatenate([attack(model, x[i:i + 100], y[i:i + 100], attack_cfg, rng)
                                 for i in range(0, len(y), 100)])
            pa = probabilities(model, xa).argmax(axis=1)
            rep.adversarial_accuracy = float(np.mean(pa == y))
            rep.per_class["adversarial"] = per_class_accuracy(pa, y, C)
    if "comp" in metrics or "suff" in metrics:
        rep.k_fraction, rep.baseline = k_fraction, baseline
        sal = input_saliency(model, x, y)
        if "comp" in metrics:
            rep.comprehensiveness = comprehensiveness(model, x, y, k_fraction, baseline, sal)
        if "suff" in metrics:
            rep.sufficiency = sufficiency(model, x, y, k_fraction, baseline, sal)
    return rep


REPORT_COLUMNS = ("attack", "eps", "n", "ood", "cAcc", "aAcc", "comp", "suff", "k", "baseline")


def report_rows(reports: list[MetricsReport]) -> list[dict]:
    rows = []
    for r in reports:
        a = r.attack or {}
        rows.append({"attack": a.get("kind", "none"), "eps": a.get("epsilon", 0.0), "n": r.n,
                     "ood": r.ood, "cAcc": r.clean_accuracy, "aAcc": r.adversarial_accuracy,
                     "comp": r.comprehensiveness, "suff": r.sufficiency, "k": r.k_fraction,
                     "baseline": r.baseline})
    return rows


def format_table(rows: list[dict], columns=None) -> str:
    """Aligned plain-text table; floats get 4 decimals, missing values print as '-'."""
    columns = list(columns or (rows[0].keys() if rows else []))

    def cell(v):
        if v is None:
            return "-"
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, float):
            return f"{v:.4f}"
        return str(v)

    body = [[cell(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(c), *(len(b[i]) for b in body)) if body else len(c) for i, c in enumerate(columns)]
    lines = ["  ".join(c.rjust(w) for c, w in zip(columns, widths))]
    lines += ["  ".join(v.rjust(w) for v, w in zip(b, widths)) for b in body]
    return "\n".join(lines) + "\n"


def write_reports(reports: list[MetricsReport], json_path, text_path=None) -> None:
    Path(json_path).write_text(json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True) + "\n")
    if text_path is not None:
        Path(text_path).write_text(format_table(report_rows(reports), REPORT_COLUMNS))


# ---------------------------------------------------------------------------
# Lipschitz estimation


class PairSampler:
    """Pairs drawn from a data array: even pair ids perturb a point by at most
    ``radius`` per pixel, odd ids pair two data points.

    Pair ``i`` uses its own generator, so the first ``m`` pairs are the same
    for every requested count.
    """

    def __init__(self, data, radius: float = 0.02, clip: bool = True):
        self.data = np.asarray(data, dtype=np.float64)
        if len(self.data) == 0:
            raise ValueError("sampler needs at least one data point")
        self.radius, self.clip = float(radius), clip

    def __call__(self, i: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
        rng = np.random.default_rng([seed, i])
        a = self.data[rng.integers(len(self.data))]
        if i % 2 == 0:
            b = a + rng.uniform(-self.radius, self.radius, size=a.shape)
            if self.clip:
                b = np.clip(b, 0.0, 1.0)
        else:
            b = self.data[rng.integers(len(self.data))]
        return a, b


def lipschitz_ratios(fn: Callable, pairs: int, sampler: Callable, seed: int = 0,
                     batch_size: int = 200) -> np.ndarray:
    """Per-pair ||g(a) - g(b)|| / ||a - b||; NaN marks degenerate (zero-distance) pairs."""
    if pairs < 1:
        raise ValueError("pairs must be >= 1")
    out = np.full(pairs, np.nan)
    for s in range(0, pairs, batch_size):
        ids = range(s, min(pairs, s + batch_size))
        ab = [sampler(i, seed) for i in ids]
        a = np.stack([p[0] for p in ab])
        b = np.stack([p[1] for p in ab])
        dx = np.sqrt(((a - b) ** 2).reshape(len(ab), -1).sum(axis=1))
        ga = np.asarray(fn(a), dtype=np.float64).reshape(len(ab), -1)
        gb = np.asarray(fn(b), dtype=np.float64).reshape(len(ab), -1)
        dg = np.sqrt(((ga - gb) ** 2).sum(axis=1))
        ok = dx > 0
        out[s:s + len(ab)][ok] = dg[ok] / dx[ok]
    return out


def estimate_lipschitz(fn: Callable, pairs: int, sampler: Callable, seed: int = 0,
                       batch_size: int = 200) -> float:
    """Largest observed ratio over sampled pairs: an empirical lower bound on the constant."""
    r = lipschitz_ratios(fn, pairs, sampler, seed, batch_size)
    if np.all(np.isnan(r)):
        raise ValueError("all sampled pairs were degenerate (zero distance)")
    return float(np.nanmax(r))


def prob_gradient(model, x, classes) -> np.ndarray:
    """d softmax_c(x) / dx for each sample's class ``c``, shape of ``x``."""
    x = np.asarray(x, dtype=np.float64)
    classes = np.asarray(classes, dtype=np.int64)
    with set_grad_enabled(True):
        xt = Tensor(x, requires_grad=True)
        p = ops.softmax(_logits(model, xt))
        (g,) = grad(ops.sum(ops.pick(p, classes)), [xt])
    return g.data


def prob_jacobian(model, x) -> np.ndarray:
    """(N, C, *x.shape[1:]) Jacobian of the softmax output."""
    x = np.asarray(x, dtype=np.float64)
    C = _logits(model, Tensor(x[:1])).shape[1] if not hasattr(model, "num_classes") else model.num_classes
    return np.stack([prob_gradient(model, x, np.full(len(x), c)) for c in range(C)], axis=1)


# ---------------------------------------------------------------------------
# background-shift bound


@dataclass
class BoundEstimate:
    kappa_f: float
    kappa_phi: float
    kappa_bg: float
    G: float
    sample_pairs: int
    lemma1_lhs: np.ndarray = field(default_factory=lambda: np.zeros(0))
    lemma1_rhs: np.ndarray = field(default_factory=lambda: np.zeros(0))
    bg_shift_norm: np.ndarray = field(default_factory=lambda: np.zeros(0))
    satisfied: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    kappa_phi_safety: float = 1.0

    @property
    def satisfaction_rate(self) -> float:
        return float(np.mean(self.satisfied)) if len(self.satisfied) else float("nan")

    def summary(self) -> dict:
        return {"kappa_f": self.kappa_f, "kappa_phi": self.kappa_phi, "kappa_bg": self.kappa_bg,
                "G": self.G, "sample_pairs": self.sample_pairs, "kappa_phi_safety": self.kappa_phi_safety,
                "audited_pairs": int(len(self.satisfied)), "satisfaction_rate": self.satisfaction_rate}


@dataclass
class Lemma1Result:
    lhs: np.ndarray
    rhs: np.ndarray
    bg_shift_norm: np.ndarray
    bg_grad_norm: np.ndarray
    satisfied: np.ndarray

    @property
    def rate(self) -> float:
        return float(np.mean(self.satisfied))

    def failures(self) -> np.ndarray:
        return np.flatnonzero(~self.satisfied)


def lemma1_rhs(bg_grad_norm, bg_shift_norm, kappa_phi: float) -> np.ndarray:
    g, d = np.asarray(bg_grad_norm, dtype=np.float64), np.asarray(bg_shift_norm, dtype=np.float64)
    return g * d + 0.5 * kappa_phi * d * d


def lemma1_check(model, pairs, kappa_phi: float, batch_size: int = 100) -> Lemma1Result:
    """Audit ||f(x_test) - f(x_train)|| <= ||grad_bg f_y(x_train)|| ||dx_bg|| + kappa/2 ||dx_bg||^2.

    ``pairs`` holds (x_train, x_test, object_mask, label) tuples, or
    (x_train, x_test, mask_train, mask_test, label) when masks are given per
    image; the two masks must agree.
    """
    if kappa_phi < 0:
        raise ValueError("kappa_phi must be nonnegative")
    xs, xt, masks, labels = [], [], [], []
    for k, p in enumerate(pairs):
        if len(p) == 5:
            a, b, ma, mb, y = p
            if not np.array_equal(np.asarray(ma, bool), np.asarray(mb, bool)):
                raise ValueError(f"pair {k}: object masks differ")
        else:
            a, b, ma, y = p
        a, b, ma = np.asarray(a, np.float64), np.asarray(b, np.float64), np.asarray(ma, bool)
        if not np.array_equal(a[:, ma], b[:, ma]):
            raise ValueError(f"pair {k}: object pixels differ between the two images")
        xs.append(a)
        xt.append(b)
        masks.append(ma)
        labels.append(int(y))
    if not xs:
        raise ValueError("no pairs to audit")
    xs, xt, masks, labels = np.stack(xs), np.stack(xt), np.stack(masks), np.array(labels)
    bg = ~masks[:, None]
    lhs = np.sqrt(((probabilities(model, xt) - probabilities(model, xs)) ** 2).sum(axis=1))
    gnorm = np.empty(len(xs))
    for s in range(0, len(xs), batch_size):
        g = prob_gradient(model, xs[s:s + batch_size], labels[s:s + batch_size])
        g = np.where(bg[s:s + batch_size], g, 0.0)
        gnorm[s:s + batch_size] = np.sqrt((g ** 2).reshape(len(g), -1).sum(axis=1))
    dnorm = np.sqrt((np.where(bg, xt - xs, 0.0) ** 2).reshape(len(xs), -1).sum(axis=1))
    rhs = lemma1_rhs(gnorm, dnorm, kappa_phi)
    return Lemma1Result(lhs, rhs, dnorm, gnorm, lhs <= rhs)


def gradient_norms(model, x, y, masks=None, batch_size: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """(full, background-only) L2 norms of the true-class probability gradient."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    full = np.empty(len(x))
    bgn = np.full(len(x), np.nan)
    for s in range(0, len(x), batch_size):
        g = prob_gradient(model, x[s:s + batch_size], y[s:s + batch_size])
        full[s:s + batch_size] = np.sqrt((g ** 2).reshape(len(g), -1).sum(axis=1))
        if masks is not None:
            gb = np.where(~np.asarray(masks[s:s + batch_size], bool)[:, None], g, 0.0)
            bgn[s:s + batch_size] = np.sqrt((gb ** 2).reshape(len(g), -1).sum(axis=1))
    return full, bgn


def estimate_bounds(model, x, y, masks, pairs: int = 10000, seed: int = 0,
                    radius: float = 0.02) -> BoundEstimate:
    """Empirical kappa_f (softmax output), kappa_phi (softmax Jacobian), kappa_bg and G."""
    sampler = PairSampler(x, radius)
    kf = estimate_lipschitz(lambda a: probabilities(model, a), pairs, sampler, seed)
    kp = estimate_lipschitz(lambda a: prob_jacobian(model, a), pairs, sampler, seed)
    full, bgn = gradient_norms(model, x, y, masks)
    return BoundEstimate(kf, kp, float(np.nanmax(bgn)) if masks is not None else float("nan"),
                         float(full.max()), pairs)


def linear_kappa_phi(W) -> float:
    """Lipschitz constant of x -> grad_x softmax_c(Wx + b), valid for every class c.

    The Hessian of a softmax component w.r.t. the logits has spectral norm at
    most 1/2, so the input-space Hessian is bounded by ||W||_2^2 / 2.
    """
    W = np.asarray(W, dtype=np.float64)
    return 0.5 * float(np.linalg.norm(W.reshape(W.shape[0], -1), 2)) ** 2


def theorem1_terms(kappa_f: float, kappa_phi: float, d: int, n: int, delta: float,
                   empirical_risk: float | None = None, alpha: float = 1.0, G: float | None = None) -> dict:
    """Measurable ingredients of the adversarial generalization bound.

    ``headline`` is ((kappa_f + kappa_phi) sqrt(d) + log(1/delta)) / sqrt(n)
    with the hidden constant set to 1; ``uniform`` is the explicit
    R_hat + 2 * complexity + sqrt(log(1/delta) / (2n)) form. ``empirical_risk``
    is a 0-1 adversarial error rate.
    """
    if n < 1 or d < 1:
        raise ValueError("n and d must be positive")
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    log_term = math.log(1.0 / delta)
    headline = ((kappa_f + kappa_phi) * math.sqrt(d) + log_term) / math.sqrt(n)
    lip = kappa_f + (alpha * kappa_phi / G if G else 0.0)
    complexity = lip * math.sqrt(d) / math.sqrt(n)
    confidence = math.sqrt(log_term / (2 * n))
    out = {"kappa_f": kappa_f, "kappa_phi": kappa_phi, "G": G, "alpha": alpha, "d": d, "n": n,
           "delta": delta, "headline_term": headline, "rademacher_term": complexity,
           "confidence_term": confidence, "empirical_risk": empirical_risk}
    if empirical_risk is not None:
        out["headline_bound"] = empirical_risk + headline
        out["uniform_bound"] = empirical_risk + 2 * complexity + confidence
    return out


LEMMA1_COLUMNS = ("pair_id", "lhs", "rhs", "bg_shift_norm", "bg_grad_norm", "satisfied")


def write_lemma1_csv(res: Lemma1Result, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LEMMA1_COLUMNS)
        for i in range(len(res.lhs)):
            w.writerow([i, repr(float(res.lhs[i])), repr(float(res.rhs[i])), repr(float(res.bg_shift_norm[i])),
                        repr(float(res.bg_grad_norm[i])), int(res.satisfied[i])])
    return path
