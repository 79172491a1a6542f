"""Adam training loop for the ERM, input-gradient (IGR) and EGAT objectives."""
from __future__ import annotations

import csv
import hashlib
import json
import time
import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .attacks import AttackConfig, attack
from .autodiff import grad
from .data import DatasetSplit
from .losses import EgatConfig, LossBreakdown, cross_entropy, loss_igr, loss_total
from .model import Checkpoint, ConvClassifier, predict

OBJECTIVES = ("erm", "igr", "egat")
LOG_EXTRA = ("grad_norm", "clipped", "wall_ms", "val_accuracy")


class NonFiniteLossError(RuntimeError):
    def __init__(self, step: int, seed: int, batch: np.ndarray, breakdown: LossBreakdown):
        self.step, self.seed, self.batch, self.breakdown = step, seed, batch, breakdown
        super().__init__(f"non-finite loss at step {step} (seed {seed}, batch {batch.tolist()}): "
                         f"{breakdown.as_dict()}")

    def dump(self) -> dict:
        return {"step": self.step, "seed": self.seed, "batch_indices": self.batch.tolist(),
                "breakdown": self.breakdown.as_dict()}


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named consumer of randomness under ``seed``."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


@dataclass(frozen=True)
class TrainConfig:
    objective: str = "egat"
    egat: EgatConfig = field(default_factory=EgatConfig)
    learning_rate: float = 1e-4
    batch_size: int = 32
    max_steps: int = 5000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    val_every: int = 100
    seed: int = 0
    output_dir: str | None = None
    igr_weight: float = 1.0
    grad_clip: float = 10.0
    widths: tuple[int, int] = (8, 16)
    dropout_rate: float = 0.1

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        for name in ("learning_rate", "batch_size", "val_every", "adam_eps", "grad_clip"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.igr_weight < 0:
            raise ValueError("igr_weight must be >= 0")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must lie in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["egat"] = self.egat.to_dict()
        d["egat"]["attack"] = asdict(self.egat.attack)  # raw fields, so the dict parses back to an equal config
        d["widths"] = list(self.widths)
        return d

    def digest(self) -> bytes:
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).digest()


# flat config keys -> (section, field); section None means TrainConfig itself
_ATTACK_KEYS = {"attack": "kind", "eps": "epsilon", "epsilon": "epsilon", "pgd_steps": "steps",
                "attack_steps": "steps", "step_size": "step_size", "momentum_decay": "momentum_decay",
                "random_start": "random_start"}
_EGAT_KEYS = {"lambda1", "lambda2", "lambda3", "lambda4", "mixup_alpha", "detach_cam_weights"}


def _coerce(value, like):
    if isinstance(value, str):
        v = value.strip()
        if isinstance(like, bool):
            if v.lower() in ("1", "true", "yes", "on"):
                return True
            if v.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {value!r}")
        if isinstance(like, int):
            return int(v)
        if isinstance(like, float) or like is None:
            return None if v.lower() in ("", "none", "null") else float(v)
        if isinstance(like, tuple):
            return tuple(int(t) for t in v.split(","))
        return v
    if isinstance(like, tuple):
        return tuple(int(t) for t in value)
    if isinstance(like, float) and value is not None:
        return float(value)
    return value


def config_from_mapping(d: dict, base: TrainConfig | None = None) -> TrainConfig:
    """Build a TrainConfig from flat keys (``lambda1``, ``eps``, ...) or nested sections."""
    base = base or TrainConfig()
    top, eg, at = {}, {}, {}
    names = {f.name for f in fields(TrainConfig)}
    for key, value in d.items():
        key = key.strip().replace("-", "_")
        if key == "egat" and isinstance(value, dict):
            for k, v in value.items():
                if k == "attack" and isinstance(v, dict):
                    at.update(v)
                else:
                    eg[k] = v
        elif key in _EGAT_KEYS:
            eg[key] = value
        elif key in _ATTACK_KEYS:
            at[_ATTACK_KEYS[key]] = value
        elif key in names:
            top[key] = value
        else:
            raise ValueError(f"unknown config key {key!r}")
    a0 = base.egat.attack
    at = {k: _coerce(v, getattr(a0, k)) for k, v in at.items()}
    eg = {k: _coerce(v, getattr(base.egat, k)) for k, v in eg.items()}
    top = {k: _coerce(v, getattr(base, k)) for k, v in top.items()}
    egat = replace(base.egat, attack=replace(a0, **at), **eg)
    return replace(base, egat=egat, **top)


def read_config(path) -> TrainConfig:
    """Parse a JSON object or ``key = value`` lines (``#`` starts a comment)."""
    text = Path(path).read_text()
    if text.lstrip().startswith("{"):
        return config_from_mapping(json.loads(text))
    d = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value")
        k, v = line.split("=", 1)
        d[k.strip()] = v.strip()
    return config_from_mapping(d)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> AdamState:
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> tuple[dict, AdamState]:
    """One bias-corrected Adam update; inputs are left untouched."""
    t = state.t + 1
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = np.asarray(grads[k], dtype=np.float64)
        if g.shape != np.shape(p):
            raise ValueError(f"gradient shape {g.shape} does not match parameter {k!r} {np.shape(p)}")
        m = beta1 * state.m[k] + (1 - beta1) * g
        v = beta2 * state.v[k] + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        new_p[k] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[k], new_v[k] = m, v
    return new_p, AdamState(new_m, new_v, t)


# ---------------------------------------------------------------------------
# loop


class BatchSampler:
    """Seeded shuffles with wrap-around: an epoch boundary may fall inside a batch."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n, self.batch_size, self.rng = n, batch_size, rng
        self._order = np.empty(0, dtype=np.int64)

    def next(self) -> np.ndarray:
        while len(self._order) < self.batch_size:
            self._order = np.concatenate([self._order, self.rng.permutation(self.n)])
        out, self._order = self._order[:self.batch_size], self._order[self.batch_size:]
        return out


@dataclass
class TrainResult:
    best: Checkpoint
    log: list[dict]
    final: ConvClassifier
    clip_events: int = 0


def clean_accuracy(model, x, y) -> float:
    return float(np.mean(predict(model, x).argmax(axis=1) == np.asarray(y)))


def step_loss(model, cfg: TrainConfig, x, y, dropout_mask, attack_rng, mixup_rng):
    """Differentiable objective for one minibatch plus its breakdown."""
    if cfg.objective == "erm":
        logits = model(x, dropout_mask=dropout_mask).logits
        loss = cross_entropy(logits, y)
        return loss, LossBreakdown(total=loss.item(), cls=loss.item())
    if cfg.objective == "igr":
        return loss_igr(model, x, y, cfg.igr_weight, dropout_mask)
    x_adv = attack(model, x, y, cfg.egat.attack, rng=attack_rng) if cfg.egat.lambda1 > 0 else None
    return loss_total(model, x, y, cfg.egat, rng=mixup_rng, x_adv=x_adv, dropout_mask=dropout_mask)


def _global_norm(grads: dict) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def train(config: TrainConfig, data: DatasetSplit, model: ConvClassifier | None = None,
          log_path=None, progress=None) -> TrainResult:
    """Run ``config.max_steps`` Adam updates and keep the best-validation checkpoint."""
    tr, va = data.train, data.val
    if len(tr) == 0:
        raise ValueError("empty training set")
    C = tr.num_classes
    if model is None:
        model = ConvClassifier(C, widths=config.widths, dropout_rate=config.dropout_rate,
                               seed=int(substream(config.seed, "init").integers(2**31)))
    cfg_hash = config.digest()
    sampler = BatchSampler(len(tr), config.batch_size, substream(config.seed, "data"))
    drop_rng = substream(config.seed, "dropout")
    attack_rng = substream(config.seed, "attack")
    mixup_rng = substream(config.seed, "mixup")
    val_x, val_y = (va.images, va.labels) if len(va) else (tr.images, tr.labels)

    def validate():
        return clean_accuracy(model, val_x, val_y)

    best = Checkpoint.from_model(model, 0, validate(), cfg_hash)
    state = AdamState.zeros_like(model.state_dict())
    rows: list[dict] = []
    clips = 0
    names = list(model.params)
    for step in range(1, config.max_steps + 1):
        t0 = time.perf_counter()
        idx = sampler.next()
        x, y = tr.images[idx], tr.labels[idx]
        mask = model.dropout_mask(len(idx), drop_rng)
        loss, bd = step_loss(model, config, x, y, mask, attack_rng, mixup_rng)
        if not np.isfinite(bd.total):
            raise NonFiniteLossError(step, config.seed, idx, bd)
        gs = grad(loss, [model.params[k] for k in names])
        grads = {k: g.data for k, g in zip(names, gs)}
        gnorm = _global_norm(grads)
        clipped = gnorm > config.grad_clip
        if clipped:
            clips += 1
            scale = config.grad_clip / gnorm
            grads = {k: g * scale for k, g in grads.items()}
        new_params, state = adam_step(model.state_dict(), grads, state, config.learning_rate,
                                      config.adam_beta1, config.adam_beta2, config.adam_eps)
        model.load_state_dict(new_params)
        val = None
        if step % config.val_every == 0 or step == config.max_steps:
            val = validate()
            if val > best.val_accuracy:
                best = Checkpoint.from_model(model, step, val, cfg_hash)
        row = {"step": step, **bd.as_dict(), "grad_norm": gnorm, "clipped": int(clipped),
               "wall_ms": (time.perf_counter() - t0) * 1e3, "val_accuracy": val}
        rows.append(row)
        if progress is not None:
            progress(row)
    if log_path is not None:
        write_log(rows, log_path)
    return TrainResult(best, rows, model, clips)


def log_columns() -> list[str]:
    return ["step", *LossBreakdown.field_names(), *LOG_EXTRA]


def write_log(rows: list[dict], path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=log_columns())
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else (repr(r[k]) if isinstance(r[k], float) else r[k]))
                        for k in log_columns()})
    return path


def read_log(path) -> list[dict]:
    out = []
    with Path(path).open(newline="") as fh:
        for r in csv.DictReader(fh):
            out.append({k: (None if v == "" else (int(v) if k in ("step", "clipped") else float(v)))
                        for k, v in r.items()})
    return out
