"""Synthetic object-on-background images, guide maps, splits and image-directory I/O.

Each synthetic image is a muted glyph (the class is the glyph's shape) drawn on
a dark, domain-specific background texture. Object pixels depend only on
``(seed, index)``, background pixels on ``(seed, index, domain)``; re-rendering
a sample under another domain therefore changes only the background.
"""
from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IMAGE_SIZE = 32
SHAPES = ("disk", "square", "triangle", "cross", "ring", "diamond", "hbar", "vbar")
# muted palette: Rec.601 luminance 0.45-0.55, just above the background ceiling,
# so the object/background contrast is modest
PALETTE = np.array([
    [140, 140, 140], [142, 128, 67], [79, 143, 90], [85, 124, 144],
    [143, 107, 118], [129, 129, 89], [111, 141, 141], [143, 118, 84],
]) / 255.0
DOMAINS = ("flat", "stripes", "noise", "checker")
BG_MAX = 0.4  # background channel ceiling keeps glyphs brighter than their surroundings
LUMA = np.array([299.0, 587.0, 114.0])  # per mille, so white maps to exactly 1
IMAGE_EXTS = (".png", ".ppm", ".pgm", ".pnm")


class DataError(Exception):
    pass


@dataclass
class SyntheticSample:
    image: np.ndarray  # (3, 32, 32) in [0, 1]
    label: int
    object_mask: np.ndarray  # (32, 32) bool
    domain_id: str
    index: int = 0


@dataclass
class Dataset:
    """Stacked images with labels and optional masks/domain tags."""

    images: np.ndarray
    labels: np.ndarray
    class_names: list[str] = field(default_factory=list)
    masks: np.ndarray | None = None
    domains: list[str] | None = None
    indices: np.ndarray | None = None  # generator index of each synthetic sample
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_names) if self.class_names else int(self.labels.max()) + 1

    def subset(self, idx) -> Dataset:
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(
            self.images[idx], self.labels[idx], list(self.class_names),
            None if self.masks is None else self.masks[idx],
            None if self.domains is None else [self.domains[i] for i in idx],
            None if self.indices is None else self.indices[idx],
            dict(self.meta),
        )


@dataclass
class DatasetSplit:
    train: Dataset
    val: Dataset
    test: Dataset
    seed: int = 0


# ---------------------------------------------------------------------------
# synthetic generator


def _quantize(img):
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def glyph_mask(shape: str, cy: float, cx: float, r: float, size: int = IMAGE_SIZE) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    if shape == "disk":
        m = dy ** 2 + dx ** 2 <= r ** 2
    elif shape == "square":
        m = (np.abs(dy) <= 0.8 * r) & (np.abs(dx) <= 0.8 * r)
    elif shape == "triangle":
        h = 0.9 * r
        m = (dy >= -h) & (dy <= h) & (np.abs(dx) <= (dy + h) / (2 * h) * r)
    elif shape == "cross":
        t = 0.3 * r
        m = ((np.abs(dx) <= t) & (np.abs(dy) <= r)) | ((np.abs(dy) <= t) & (np.abs(dx) <= r))
    elif shape == "ring":
        d2 = dy ** 2 + dx ** 2
        m = (d2 <= r ** 2) & (d2 >= (0.55 * r) ** 2)
    elif shape == "diamond":
        m = np.abs(dy) + np.abs(dx) <= r
    elif shape == "hbar":
        m = (np.abs(dy) <= 0.35 * r) & (np.abs(dx) <= r)
    elif shape == "vbar":
        m = (np.abs(dx) <= 0.35 * r) & (np.abs(dy) <= r)
    else:
        raise DataError(f"unknown glyph {shape!r}")
    return m


def _dark_color(rng):
    return rng.uniform(0.0, BG_MAX, size=3)


def render_background(domain: str, rng: np.random.Generator, size: int = IMAGE_SIZE) -> np.ndarray:
    """(3, size, size) texture for a background style."""
    if domain == "flat":
        bg = np.broadcast_to(_dark_color(rng)[:, None, None], (3, size, size)).copy()
    elif domain == "stripes":
        period = int(rng.choice([4, 6, 8]))
        c0, c1 = _dark_color(rng), _dark_color(rng)
        rows = ((np.arange(size) + int(rng.integers(period))) // (period // 2)) % 2
        bg = np.where(rows[None, :, None] == 0, c0[:, None, None], c1[:, None, None])
        bg = np.broadcast_to(bg, (3, size, size)).copy()
    elif domain == "noise":
        base = rng.uniform(0.1, 0.3, size=3)
        bg = base[:, None, None] + rng.normal(0.0, 0.08, size=(3, size, size))
    elif domain == "checker":
        cell = int(rng.choice([3, 4, 5]))
        c0, c1 = _dark_color(rng), _dark_color(rng)
        yy, xx = np.mgrid[0:size, 0:size]
        sel = ((yy // cell + xx // cell) % 2)[None]
        bg = np.where(sel == 0, c0[:, None, None], c1[:, None, None])
    else:
        raise DataError(f"unknown background domain {domain!r}; known: {DOMAINS}")
    return np.clip(bg, 0.0, BG_MAX)


def _domain_code(domain: str) -> int:
    return zlib.crc32(domain.encode())


def render_sample(seed: int, index: int, label: int, domain: str) -> SyntheticSample:
    """Render generator sample ``index`` of class ``label`` on ``domain``."""
    if not 0 <= label < len(SHAPES):
        raise DataError(f"label {label} has no glyph (max {len(SHAPES) - 1})")
    orng = np.random.default_rng([seed, index, 0])
    r = orng.uniform(6.0, 9.0)
    cy = orng.uniform(r + 1, IMAGE_SIZE - r - 2)
    cx = orng.uniform(r + 1, IMAGE_SIZE - r - 2)
    color = PALETTE[orng.integers(len(PALETTE))]
    mask = glyph_mask(SHAPES[label], cy, cx, r)
    bg = render_background(domain, np.random.default_rng([seed, index, 1, _domain_code(domain)]))
    img = np.where(mask[None], color[:, None, None], bg)
    return SyntheticSample(_quantize(img), int(label), mask, domain, int(index))


def balanced_labels(n: int, num_classes: int, seed: int) -> np.ndarray:
    return np.random.default_rng([seed, 2]).permutation(np.arange(n) % num_classes)


def gen_synthetic(n: int, num_classes: int, domains, seed: int = 0) -> list[SyntheticSample]:
    """``n`` class-balanced samples; sample ``i`` uses ``domains[i % len(domains)]``."""
    if n <= 0:
        raise DataError("n must be positive")
    if not 2 <= num_classes <= len(SHAPES):
        raise DataError(f"num_classes must be in [2, {len(SHAPES)}]")
    domains = [domains] if isinstance(domains, str) else list(domains)
    if not domains:
        raise DataError("at least one domain required")
    for d in domains:
        if d not in DOMAINS:
            raise DataError(f"unknown background domain {d!r}; known: {DOMAINS}")
    labels = balanced_labels(n, num_classes, seed)
    return [render_sample(seed, i, int(labels[i]), domains[i % len(domains)]) for i in range(n)]


def class_names(num_classes: int) -> list[str]:
    # zero-padded so that sorted directory order equals label order
    return [f"{k:02d}_{SHAPES[k]}" for k in range(num_classes)]


def to_dataset(samples: list[SyntheticSample], num_classes: int | None = None, meta=None) -> Dataset:
    labels = np.array([s.label for s in samples], dtype=np.int64)
    k = num_classes or int(labels.max()) + 1
    return Dataset(
        np.stack([s.image for s in samples]), labels, class_names(k),
        np.stack([s.object_mask for s in samples]), [s.domain_id for s in samples],
        np.array([s.index for s in samples], dtype=np.int64), dict(meta or {}),
    )


def synthetic_dataset(n: int, num_classes: int, domains, seed: int = 0) -> Dataset:
    domains = [domains] if isinstance(domains, str) else list(domains)
    meta = {"synthetic": True, "seed": seed, "n": n, "num_classes": num_classes, "domains": domains}
    return to_dataset(gen_synthetic(n, num_classes, domains, seed), num_classes, meta)


def background_shift_pairs(ds: Dataset, other_domain: str, count: int, seed: int = 0):
    """(x_train, x_test, mask, label) tuples: same glyph re-rendered on ``other_domain``."""
    if ds.masks is None or ds.indices is None or "seed" not in ds.meta:
        raise DataError("background-shift pairs need a synthetic dataset with masks")
    rng = np.random.default_rng([seed, 3])
    pick = rng.choice(len(ds), size=count, replace=count > len(ds))
    gseed = int(ds.meta["seed"])
    pairs = []
    for i in pick:
        other = render_sample(gseed, int(ds.indices[i]), int(ds.labels[i]), other_domain)
        if not np.array_equal(other.object_mask, ds.masks[i]):
            raise DataError(f"object masks differ for sample {i}")
        pairs.append((ds.images[i], other.image, ds.masks[i], int(ds.labels[i])))
    return pairs


# ---------------------------------------------------------------------------
# guide map and splits


def guide_map(x) -> np.ndarray:
    """Rec.601 luminance of a (3, H, W) image in [0, 1]."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] != 3:
        raise DataError(f"guide_map expects a (3, H, W) image, got {x.shape}")
    return np.clip(np.tensordot(LUMA, x, axes=(0, 0)) / 1000.0, 0.0, 1.0)


def split_sizes(n: int) -> tuple[int, int, int]:
    n_val = n_test = int(np.floor(0.2 * n))
    return n - n_val - n_test, n_val, n_test


def split_indices(labels, seed: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """60/20/20 index split: seeded shuffle, then contiguous cut.

    When every class has at least 5 samples the shuffled order is interleaved
    class-proportionally first, so each contiguous block is stratified.
    """
    labels = np.asarray(labels)
    n = len(labels)
    if n < 5:
        raise DataError("at least 5 samples are needed for a 60/20/20 split")
    rng = np.random.default_rng([seed, 4])
    order = rng.permutation(n)
    classes, counts = np.unique(labels, return_counts=True)
    if counts.min() >= 5:
        keys = np.empty(n)
        for c, cnt in zip(classes, counts):
            members = order[labels[order] == c]
            keys[members] = (np.arange(cnt) + 0.5) / cnt
        # ties between classes fall back to the shuffled order
        rank = np.empty(n, dtype=np.int64)
        rank[order] = np.arange(n)
        order = np.lexsort((rank, keys))
    n_train, n_val, _ = split_sizes(n)
    return order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:]


def split(data, seed: int = 0) -> DatasetSplit:
    ds = to_dataset(data) if isinstance(data, list) else data
    tr, va, te = split_indices(ds.labels, seed)
    return DatasetSplit(ds.subset(tr), ds.subset(va), ds.subset(te), seed)


# ---------------------------------------------------------------------------
# image directories


def read_image(path: Path, size: int = IMAGE_SIZE) -> np.ndarray:
    from PIL import Image

    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if im.size != (size, size):
                im = im.resize((size, size), Image.Resampling.BILINEAR)
            arr = np.asarray(im, dtype=np.float64) / 255.0
    except Exception as e:  # PIL raises a variety of types
        raise DataError(f"cannot read image {path}: {e}") from e
    return arr.transpose(2, 0, 1)


def _read_mask(path: Path) -> np.ndarray:
    from PIL import Image

    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L")) >= 128
    except Exception as e:
        raise DataError(f"cannot read mask {path}: {e}") from e


def _image_files(d: Path) -> list[Path]:
    return sorted(p for p in d.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_EXTS)


def load_image_dir(path, size: int = IMAGE_SIZE) -> Dataset:
    """Class-per-subdirectory images; labels follow sorted subdirectory order."""
    root = Path(path)
    if not root.is_dir():
        raise DataError(f"not a directory: {root}")
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not classes:
        raise DataError(f"no class subdirectories in {root}")
    images, labels, files = [], [], []
    for k, name in enumerate(classes):
        paths = _image_files(root / name)
        if not paths:
            raise DataError(f"class directory {root / name} contains no images")
        for p in paths:
            images.append(read_image(p, size))
            labels.append(k)
            files.append(str(p.relative_to(root)))
    return Dataset(np.stack(images), np.array(labels, dtype=np.int64), classes, meta={"files": files})


def _save_png(arr_u8: np.ndarray, path: Path) -> None:
    from PIL import Image

    Image.fromarray(arr_u8).save(path, optimize=False)


def export_dataset(ds: Dataset, out) -> Path:
    """Write ``images/<class>/<i>.png``, ``masks/<class>/<i>.png`` and ``meta.json``."""
    out = Path(out)
    records = []
    for i in range(len(ds)):
        cname = ds.class_names[ds.labels[i]]
        rel = f"{cname}/{i:05d}.png"
        (out / "images" / cname).mkdir(parents=True, exist_ok=True)
        img = np.round(ds.images[i].transpose(1, 2, 0) * 255.0).astype(np.uint8)
        _save_png(img, out / "images" / rel)
        if ds.masks is not None:
            (out / "masks" / cname).mkdir(parents=True, exist_ok=True)
            _save_png(ds.masks[i].astype(np.uint8) * 255, out / "masks" / rel)
        records.append({
            "file": rel,
            "label": int(ds.labels[i]),
            "domain": None if ds.domains is None else ds.domains[i],
            "index": None if ds.indices is None else int(ds.indices[i]),
        })
    meta = dict(ds.meta)
    meta.update({"class_names": ds.class_names, "samples": records})
    (out / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    return out


def load_dataset(path) -> Dataset:
    """Load an exported dataset directory (or a bare class-per-subdirectory tree)."""
    root = Path(path)
    meta_path = root / "meta.json"
    if not meta_path.exists():
        return load_image_dir(root)
    meta = json.loads(meta_path.read_text())
    ds = load_image_dir(root / "images")
    if ds.class_names != meta["class_names"]:
        raise DataError("class directories do not match meta.json")
    by_file = {r["file"]: r for r in meta["samples"]}
    files = ds.meta["files"]
    recs = [by_file[f] for f in files]
    ds.domains = [r["domain"] for r in recs]
    if all(r["index"] is not None for r in recs):
        ds.indices = np.array([r["index"] for r in recs], dtype=np.int64)
    mask_root = root / "masks"
    if mask_root.is_dir():
        ds.masks = np.stack([_read_mask(mask_root / f) for f in files])
    ds.meta = {k: v for k, v in meta.items() if k != "samples"}
    ds.meta["files"] = files
    return ds
