"""Grad-CAM saliency maps plus the normalisation/upsampling used to compare them."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor, grad, ops, set_grad_enabled

NORM_EPS = 1e-8


@dataclass
class SaliencyMap:
    values: Tensor  # (h, w) or (N, h, w)
    class_index: np.ndarray | int
    resolution: str = "activation"  # or "input"
    differentiable: bool = True

    @property
    def array(self) -> np.ndarray:
        return self.values.data

    def _replace(self, values: Tensor, **kw) -> SaliencyMap:
        d = dict(class_index=self.class_index, resolution=self.resolution,
                 differentiable=self.differentiable and values.requires_grad)
        d.update(kw)
        return SaliencyMap(values, **d)


def cam_from_activations(acts: Tensor, logits: Tensor, classes, detach_weights: bool = False) -> Tensor:
    """ReLU(sum_k alpha_k A^k) with alpha_k the spatial mean of d logit_c / d A^k.

    ``acts`` is (N, K, h, w), ``logits`` (N, C) computed from it; returns (N, h, w).
    Samples are independent, so the gradient of the summed selected logits
    gives every sample's own gradient at once.
    """
    classes = np.asarray(classes, dtype=np.int64).reshape(-1)
    if classes.shape[0] != logits.shape[0]:
        raise ValueError("one class index per sample required")
    if np.any(classes < 0) or np.any(classes >= logits.shape[1]):
        raise ValueError(f"class index out of range [0, {logits.shape[1]})")
    if not logits.requires_grad:
        # logit independent of the activations
        return Tensor(np.zeros((acts.shape[0],) + acts.shape[2:]))
    target = ops.sum(ops.pick(logits, classes))
    (d_acts,) = grad(target, [acts], create_graph=not detach_weights)
    alpha = ops.mean(d_acts, axis=(2, 3), keepdims=True)
    if detach_weights:
        alpha = alpha.detach()
    return ops.relu(ops.sum(alpha * acts, axis=1))


def grad_cam(model, x, c, detach_weights: bool = False, dropout_mask=None) -> SaliencyMap:
    """Grad-CAM of ``model`` at its ``last_conv`` tap for class ``c``.

    ``x`` may be one image (C, H, W) with an int class, or a batch with one
    class per sample. With ``detach_weights=False`` the map stays attached to
    the graph and can be differentiated w.r.t. parameters and input.
    """
    single = np.ndim(x.data if isinstance(x, Tensor) else x) == 3
    xt = x if isinstance(x, Tensor) else Tensor(x)
    if single:
        xt = ops.reshape(xt, (1,) + xt.shape)
    classes = np.atleast_1d(np.asarray(c, dtype=np.int64))
    if classes.size == 1 and xt.shape[0] > 1:
        classes = np.full(xt.shape[0], classes[0])
    with set_grad_enabled(True):
        acts = model.features(xt)
        if not acts.requires_grad:
            acts = Tensor(acts.data, requires_grad=True)
        logits = model.head(acts, dropout_mask)
        phi = cam_from_activations(acts, logits, classes, detach_weights)
    if single:
        phi = ops.reshape(phi, phi.shape[1:])
    return SaliencyMap(phi, int(classes[0]) if single else classes, "activation",
                       differentiable=phi.requires_grad)


def _values(m):
    if isinstance(m, SaliencyMap):
        return m.values
    return m if isinstance(m, Tensor) else Tensor(m)


def _wrap_like(m, values: Tensor, **kw):
    if isinstance(m, SaliencyMap):
        return m._replace(values, **kw)
    if isinstance(m, Tensor):
        return values
    return values.data


def normalize_saliency(m, eps: float = NORM_EPS):
    """(m - min) / (max - min + eps) per map over the last two axes."""
    v = _values(m)
    if np.any(v.data < 0):
        raise ValueError("saliency maps must be nonnegative")
    axes = (-2, -1) if v.ndim >= 2 else (-1,)
    lo = ops.min(v, axis=axes, keepdims=True)
    hi = ops.max(v, axis=axes, keepdims=True)
    return _wrap_like(m, (v - lo) / (hi - lo + eps))


def bilinear_matrix(src: int, dst: int) -> np.ndarray:
    """(dst, src) corner-aligned linear interpolation weights."""
    if dst < src:
        raise ValueError(f"upsample_bilinear cannot downsample ({src} -> {dst})")
    R = np.zeros((dst, src))
    if src == 1:
        R[:, 0] = 1.0
        return R
    pos = np.arange(dst) * (src - 1) / (dst - 1) if dst > 1 else np.zeros(1)
    lo = np.minimum(np.floor(pos).astype(int), src - 2)
    frac = pos - lo
    R[np.arange(dst), lo] = 1.0 - frac
    R[np.arange(dst), lo + 1] += frac
    return R


def upsample_bilinear(m, H: int, W: int):
    v = _values(m)
    h, w = v.shape[-2:]
    if (h, w) == (H, W):
        return _wrap_like(m, v, resolution="input") if isinstance(m, SaliencyMap) else m
    out = ops.linear_map2d(v, bilinear_matrix(h, H), bilinear_matrix(w, W))
    return _wrap_like(m, out, resolution="input")


def input_saliency(model, x, c, normalize: bool = True) -> np.ndarray:
    """Non-differentiable Grad-CAM at input resolution, (N, H, W)."""
    x = np.asarray(x, dtype=np.float64)
    sal = grad_cam(model, x, c, detach_weights=True).values
    if normalize:
        sal = normalize_saliency(sal)
    return upsample_bilinear(sal.detach(), *x.shape[-2:]).data


def to_uint8(m) -> np.ndarray:
    arr = _values(m).data
    if arr.min() < 0 or arr.max() > 1:
        raise ValueError("heatmap values must be normalised to [0, 1]")
    return np.round(255.0 * arr).astype(np.uint8)


def save_heatmap(m, path) -> Path:
    """Write a normalised 2-D map as 8-bit grayscale (PNG, or PGM/PPM by suffix)."""
    path = Path(path)
    img = to_uint8(m)
    if img.ndim != 2:
        raise ValueError("heatmap export expects a single 2-D map")
    suffix = path.suffix.lower()
    if suffix == ".pgm":
        path.write_bytes(b"P5\n%d %d\n255\n" % (img.shape[1], img.shape[0]) + img.tobytes())
    elif suffix == ".ppm":
        rgb = np.repeat(img[..., None], 3, axis=2)
        path.write_bytes(b"P6\n%d %d\n255\n" % (img.shape[1], img.shape[0]) + rgb.tobytes())
    else:
        from PIL import Image

        Image.fromarray(img).save(path)
    return path
