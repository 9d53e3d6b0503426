"""Procedural datasets for transfer experiments.

synth_shapes renders small RGB images of parameterized geometric classes.
Class identity is carried by geometry alone; colors and textures are
nuisance variables, and the domain-shift knob reshapes their statistics
(channel mixing, brightness, an additive grating) without touching the
geometry, so labels survive any shift level.

make_longtail, corrupt and few_shot_subset derive evaluation variants from
a base dataset.  Every function here is a pure function of its arguments:
same inputs, bitwise-same arrays.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

MAX_CLASSES = 16

CORRUPTION_KINDS = ("gaussian_noise", "blur", "contrast", "occlusion")

_NOISE_SIGMA = (0.04, 0.08, 0.12, 0.18, 0.26)
_BLUR_SIGMA = (0.4, 0.6, 0.9, 1.3, 1.8)
_CONTRAST_SCALE = (0.75, 0.6, 0.45, 0.3, 0.2)
_OCCLUSION_SIDE = (4, 6, 8, 10, 12)


@dataclass
class Dataset:
    images: np.ndarray  # [N, 3, H, W] float32 in [0, 1]
    labels: np.ndarray  # [N] int64
    num_classes: int
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices)
        return Dataset(
            images=self.images[indices].copy(),
            labels=self.labels[indices].copy(),
            num_classes=self.num_classes,
            meta=dict(self.meta),
        )

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


# ---------------------------------------------------------------------------
# rendering


def _shape_mask(cls: int, u: np.ndarray, v: np.ndarray, r: float) -> np.ndarray:
    """Boolean mask for class `cls` on rotated, centered coordinates."""
    au, av = np.abs(u), np.abs(v)
    rad2 = u * u + v * v
    if cls == 0:  # disk
        return rad2 <= r * r
    if cls == 1:  # ring
        return (rad2 <= r * r) & (rad2 >= (0.55 * r) ** 2)
    if cls == 2:  # square
        return np.maximum(au, av) <= 0.85 * r
    if cls == 3:  # square outline
        m = np.maximum(au, av)
        return (m <= 0.85 * r) & (m >= 0.47 * r)
    if cls == 4:  # triangle, apex up
        return (v <= 0.75 * r) & (au <= 0.65 * (0.75 * r - v))
    if cls == 5:  # triangle, apex down
        return (-v <= 0.75 * r) & (au <= 0.65 * (0.75 * r + v))
    if cls == 6:  # plus
        return ((au <= 0.3 * r) & (av <= r)) | ((av <= 0.3 * r) & (au <= r))
    if cls == 7:  # diagonal cross
        box = np.maximum(au, av) <= r
        return box & ((np.abs(u - v) <= 0.42 * r) | (np.abs(u + v) <= 0.42 * r))
    if cls == 8:  # horizontal bar
        return (av <= 0.28 * r) & (au <= r)
    if cls == 9:  # vertical bar
        return (au <= 0.28 * r) & (av <= r)
    if cls == 10:  # diamond
        return au + av <= r
    if cls == 11:  # diamond outline
        s = au + av
        return (s <= r) & (s >= 0.55 * r)
    if cls == 12:  # two dots
        d, rr = 0.45 * r, 0.34 * r
        return ((u - d) ** 2 + v * v <= rr * rr) | ((u + d) ** 2 + v * v <= rr * rr)
    if cls == 13:  # horizontal stripes in a disk
        period = 0.38 * r
        return (rad2 <= r * r) & (np.floor((v + 1.0) / period).astype(int) % 2 == 0)
    if cls == 14:  # vertical stripes in a disk
        period = 0.38 * r
        return (rad2 <= r * r) & (np.floor((u + 1.0) / period).astype(int) % 2 == 0)
    if cls == 15:  # checkerboard in a square
        period = 0.45 * r
        cells = np.floor((u + 1.0) / period).astype(int) + np.floor((v + 1.0) / period).astype(int)
        return (np.maximum(au, av) <= 0.9 * r) & (cells % 2 == 0)
    raise ValueError(f"no shape template for class {cls}")


def synth_shapes(
    n: int, num_classes: int, shift: float, seed: int, hw: int = 32
) -> Dataset:
    """Render a balanced dataset of `n` images over `num_classes` classes.

    shift in [0, 1] remaps color and texture statistics while preserving
    labels: for a fixed seed, every shift level draws identical geometry,
    colors and noise, then applies the shift transform on top.  Class i has
    n // C images plus one of the remainder, interleaved as label i at
    index i mod C.
    """
    if not 2 <= num_classes <= MAX_CLASSES:
        raise ValueError(f"num_classes must be in [2, {MAX_CLASSES}], got {num_classes}")
    if not 0.0 <= shift <= 1.0:
        raise ValueError(f"shift must be in [0, 1], got {shift}")
    if n < 1:
        raise ValueError(f"need at least one sample, got {n}")

    rng = np.random.default_rng(seed)
    lin = np.linspace(-1.0, 1.0, hw, dtype=np.float64)
    yy, xx = np.meshgrid(lin, lin, indexing="ij")

    images = np.empty((n, 3, hw, hw), dtype=np.float32)
    labels = (np.arange(n) % num_classes).astype(np.int64)
    s = float(shift)

    for i in range(n):
        cls = int(labels[i])
        cx, cy = rng.uniform(-0.18, 0.18, size=2)
        radius = rng.uniform(0.45, 0.68)
        theta = rng.uniform(-0.26, 0.26)
        bg = rng.uniform(0.05, 0.35, size=3)
        fg = rng.uniform(0.55, 0.95, size=3)
        noise = rng.normal(0.0, 0.02, size=(3, hw, hw))
        phase = rng.uniform(0.0, 2.0 * math.pi)
        freq = rng.uniform(2.0, 4.0)

        ct, st = math.cos(theta), math.sin(theta)
        u = (xx - cx) * ct + (yy - cy) * st
        v = -(xx - cx) * st + (yy - cy) * ct
        mask = _shape_mask(cls, u, v, radius)

        img = bg[:, None, None] + mask[None] * (fg - bg)[:, None, None] + noise
        if s > 0.0:
            rolled = img[[1, 2, 0]]
            img = (1.0 - s) * img + s * rolled
            img = img + 0.12 * s
            grating = np.sin(2.0 * math.pi * freq * (xx + yy) / 2.0 + phase)
            img = img + 0.18 * s * grating[None]
        images[i] = np.clip(img, 0.0, 1.0).astype(np.float32)

    return Dataset(
        images=images,
        labels=labels,
        num_classes=num_classes,
        meta={"kind": "synth_shapes", "n": n, "shift": s, "seed": int(seed), "hw": hw},
    )


# ---------------------------------------------------------------------------
# long-tail resampling


def longtail_profile(n_head: int, imbalance_ratio: float, num_classes: int) -> list[int]:
    """Exponential class sizes: n_i = round(n_head * IR^(-i / (C - 1))).

    Head class keeps n_head exactly; the tail class gets round(n_head / IR).
    """
    if num_classes < 2:
        raise ValueError("long-tail profile needs at least 2 classes")
    if imbalance_ratio < 1.0:
        raise ValueError(f"imbalance ratio must be >= 1, got {imbalance_ratio}")
    c = num_classes
    return [
        int(round(n_head * imbalance_ratio ** (-i / (c - 1)))) for i in range(c)
    ]


def make_longtail(ds: Dataset, imbalance_ratio: float, seed: int) -> Dataset:
    """Resample `ds` to an exponential class-size profile.

    Class i keeps the first n_i of its samples under a seeded shuffle.  The
    head size is the smallest per-class count of the input, so a balanced
    input keeps its full head class.
    """
    counts = ds.class_counts()
    if counts.min() == 0:
        missing = int(np.argmin(counts))
        raise ValueError(f"class {missing} has no samples to resample from")
    n_head = int(counts.min())
    profile = longtail_profile(n_head, imbalance_ratio, ds.num_classes)
    rng = np.random.default_rng(seed)
    keep = []
    for cls, n_i in enumerate(profile):
        idx = np.flatnonzero(ds.labels == cls)
        idx = idx[rng.permutation(idx.size)]
        keep.append(idx[:n_i])
    out = ds.subset(np.concatenate(keep))
    out.meta = {**ds.meta, "longtail_ir": float(imbalance_ratio), "profile": profile}
    return out


# ---------------------------------------------------------------------------
# corruptions


def _gaussian_kernel(sigma: float, k: int = 5) -> np.ndarray:
    r = np.arange(k, dtype=np.float64) - (k - 1) / 2.0
    w = np.exp(-0.5 * (r / sigma) ** 2)
    return w / w.sum()


def _blur_images(images: np.ndarray, sigma: float) -> np.ndarray:
    """Separable 5-tap gaussian blur with edge-replicate padding."""
    k = 5
    pad = k // 2
    w = _gaussian_kernel(sigma, k)
    x = np.pad(images, ((0, 0), (0, 0), (pad, pad), (0, 0)), mode="edge")
    rows = sum(w[t] * x[:, :, t : t + images.shape[2], :] for t in range(k))
    x = np.pad(rows, ((0, 0), (0, 0), (0, 0), (pad, pad)), mode="edge")
    return sum(w[t] * x[:, :, :, t : t + images.shape[3]] for t in range(k))


def corrupt(ds: Dataset, kind: str, severity: int, seed: int) -> Dataset:
    """Apply one corruption at severity 1..5; labels pass through untouched.

    For a fixed seed the random draws (noise field, occlusion centers) do
    not depend on severity, so higher severities nest: the same noise gets
    louder, the same occlusion square grows.
    """
    if kind not in CORRUPTION_KINDS:
        raise ValueError(f"unknown corruption {kind!r}; pick from {CORRUPTION_KINDS}")
    if not 1 <= severity <= 5:
        raise ValueError(f"severity must be 1..5, got {severity}")
    rng = np.random.default_rng(seed)
    level = severity - 1
    images = ds.images

    if kind == "gaussian_noise":
        noise = rng.standard_normal(images.shape).astype(np.float32)
        out = images + np.float32(_NOISE_SIGMA[level]) * noise
    elif kind == "blur":
        out = _blur_images(images.astype(np.float64), _BLUR_SIGMA[level])
    elif kind == "contrast":
        m = images.mean(axis=(1, 2, 3), keepdims=True)
        out = (images - m) * np.float32(_CONTRAST_SCALE[level]) + m
    else:  # occlusion
        out = images.copy()
        side = _OCCLUSION_SIDE[level]
        h, w = images.shape[2], images.shape[3]
        centers = rng.integers(0, (h, w), size=(len(ds), 2))
        for i, (cy, cx) in enumerate(centers):
            r0 = max(0, int(cy) - side // 2)
            c0 = max(0, int(cx) - side // 2)
            out[i, :, r0 : min(h, int(cy) - side // 2 + side),
                c0 : min(w, int(cx) - side // 2 + side)] = 0.5

    out = np.clip(out, 0.0, 1.0).astype(np.float32)
    return Dataset(
        images=out,
        labels=ds.labels.copy(),
        num_classes=ds.num_classes,
        meta={**ds.meta, "corruption": kind, "severity": severity},
    )


# ---------------------------------------------------------------------------
# few-shot subsets


def few_shot_subset(ds: Dataset, k: int, seed: int) -> Dataset:
    """First k samples per class under a per-class seeded shuffle.

    The shuffle depends only on (seed, class), not on k, so subsets nest:
    the k=1 subset is contained in k=2, and so on.
    """
    if k < 1:
        raise ValueError(f"k must be positive, got {k}")
    keep = []
    for cls in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == cls)
        if idx.size < k:
            raise ValueError(
                f"class {cls} has {idx.size} samples, fewer than k={k}"
            )
        perm = np.random.default_rng([seed, cls]).permutation(idx.size)
        keep.append(idx[perm][:k])
    out = ds.subset(np.concatenate(keep))
    out.meta = {**ds.meta, "few_shot_k": k}
    return out
