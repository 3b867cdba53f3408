"""Synthetic ultrasound-like datasets, augmentation, and subject-level splits.

Every sample is a pure function of (generator settings, seed, sample index),
so generation order does not matter.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

N_CLASSES = 9
CLASS_NAMES = ("CL", "CE1", "CE2", "CE3", "CE4", "CE5", "AE1", "AE2", "AE3")
SEG_LABELS = {0: "background", 1: "ovary", 2: "follicle"}
VIEWS_PER_SUBJECT = 2


@dataclass
class ClassificationSet:
    images: np.ndarray  # (N, 1, H, W) float32, normalised
    labels: np.ndarray  # (N,) int64
    subjects: np.ndarray  # (N,) int64
    mean: float = 0.0
    std: float = 1.0

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "ClassificationSet":
        idx = np.asarray(idx)
        return ClassificationSet(self.images[idx], self.labels[idx], self.subjects[idx], self.mean, self.std)


@dataclass
class SegmentationSet:
    images: np.ndarray  # (N, 1, H, W) float32, normalised
    masks: np.ndarray  # (N, H, W) int64 in {0, 1, 2}
    subjects: np.ndarray
    mean: float = 0.0
    std: float = 1.0

    def __len__(self) -> int:
        return len(self.masks)

    def subset(self, idx) -> "SegmentationSet":
        idx = np.asarray(idx)
        return SegmentationSet(self.images[idx], self.masks[idx], self.subjects[idx], self.mean, self.std)


# ---------------------------------------------------------------- primitives


def _grid(size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    return yy, xx


def _ellipse(size, cy, cx, a, b, theta):
    yy, xx = _grid(size)
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(theta), np.sin(theta)
    u = (dx * c + dy * s) / a
    v = (-dx * s + dy * c) / b
    return u * u + v * v


def _speckle(rng, size, looks, corr=0.8):
    """Multiplicative speckle: gamma-distributed intensity, spatially correlated."""
    g = rng.gamma(looks, 1.0 / looks, size=(size, size))
    if corr > 0:
        g = ndimage.gaussian_filter(g, corr)
        g = g / g.mean()
    return g


def _background(rng, size):
    yy, xx = _grid(size)
    base = 0.40 + 0.08 * rng.standard_normal()
    ang = rng.uniform(0, 2 * np.pi)
    ramp = 0.12 * ((yy * np.cos(ang) + xx * np.sin(ang)) / size - 0.5)
    blobs = ndimage.gaussian_filter(rng.standard_normal((size, size)), size / 10) * 2.0
    return base + ramp + 0.05 * blobs


# ---------------------------------------------------------------- classification


def _lesion(rng, label, size, jitter):
    """Draw one lesion of the given class; returns the clean intensity image."""
    img = _background(rng, size)
    cy = size / 2 + rng.uniform(-1, 1) * jitter * size * 0.12
    cx = size / 2 + rng.uniform(-1, 1) * jitter * size * 0.12
    r = size * rng.uniform(0.22, 0.32)
    ecc = 1.0 + jitter * rng.uniform(0.0, 0.35)
    theta = rng.uniform(0, np.pi)
    d = _ellipse(size, cy, cx, r * ecc, r / ecc, theta)
    inside = d <= 1.0
    yy, xx = _grid(size)
    dark, bright = 0.06, 0.95

    if label == 0:  # anechoic cyst, thin wall
        img[inside] = dark
        img[(d > 1.0) & (d < 1.12)] += 0.15
    elif label == 1:  # cyst with thick double-line wall
        img[inside] = dark
        img[(d > 0.82) & (d <= 1.0)] = bright * 0.8
        img[(d > 1.0) & (d < 1.1)] = 0.35
        img[(d > 1.1) & (d < 1.25)] = bright * 0.7
    elif label == 2:  # multivesicular: matrix with daughter cysts
        img[inside] = 0.55
        n = rng.integers(4, 8)
        for _ in range(n):
            a = rng.uniform(0, 2 * np.pi)
            rad = rng.uniform(0.2, 0.6) * r
            dd = _ellipse(size, cy + rad * np.sin(a), cx + rad * np.cos(a), r * 0.3, r * 0.26, rng.uniform(0, np.pi))
            img[(dd <= 1.0) & inside] = dark
    elif label == 3:  # detached floating membrane
        img[inside] = dark
        phase = rng.uniform(0, 2 * np.pi)
        wave = cy + 0.25 * r * np.sin((xx - cx) / r * 3.0 + phase) + rng.uniform(-0.2, 0.2) * r
        img[(np.abs(yy - wave) < 1.3) & (d < 0.8)] = bright
    elif label == 4:  # heterogeneous solid content
        tex = ndimage.gaussian_filter(rng.standard_normal((size, size)), 1.5)
        img[inside] = 0.45 + 0.6 * tex[inside]
        img[(d > 0.9) & (d < 1.05)] = 0.2
    elif label == 5:  # calcified arc with acoustic shadow
        img[inside] = 0.5
        a0 = rng.uniform(0, 2 * np.pi)
        ang = np.arctan2(yy - cy, xx - cx)
        arc = (np.cos(ang - a0) > -0.2) & (d > 0.75) & (d < 1.05)
        img[arc] = bright
        shadow = (yy > cy + 0.6 * r) & (np.abs(xx - cx) < r * 0.8)
        img[shadow] *= 0.35
    elif label == 6:  # infiltrative hyperechoic, irregular border
        warp = ndimage.gaussian_filter(rng.standard_normal((size, size)), 3) * 6
        dd = _ellipse(size, cy, cx, r * ecc, r / ecc, theta) + warp
        irregular = dd <= 1.0
        tex = ndimage.gaussian_filter(rng.standard_normal((size, size)), 1.0)
        img[irregular] = 0.75 + 0.25 * tex[irregular]
    elif label == 7:  # mass with scattered calcified specks
        img[inside] = 0.42
        n = rng.integers(12, 22)
        ys = cy + rng.uniform(-0.8, 0.8, n) * r
        xs = cx + rng.uniform(-0.8, 0.8, n) * r
        for y, x in zip(ys, xs):
            spot = (yy - y) ** 2 + (xx - x) ** 2 < 2.0
            img[spot & inside] = bright
    elif label == 8:  # necrotic mass with irregular central cavity
        tex = ndimage.gaussian_filter(rng.standard_normal((size, size)), 1.0)
        img[inside] = 0.7 + 0.2 * tex[inside]
        warp = ndimage.gaussian_filter(rng.standard_normal((size, size)), 2) * 4
        cav = _ellipse(size, cy, cx, r * 0.5, r * 0.4, rng.uniform(0, np.pi)) + warp <= 1.0
        img[cav & inside] = dark
    else:
        raise ValueError(f"unknown class {label}")
    return img


def gen_classification_set(n_per_class: int, size: int = 64, seed: int = 0, jitter: float = 1.0,
                           looks: float = 3.0) -> ClassificationSet:
    """Nine lesion-like classes; two views per synthetic subject."""
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    images, labels, subjects = [], [], []
    for label in range(N_CLASSES):
        for i in range(n_per_class):
            subject = label * 1_000_000 + i // VIEWS_PER_SUBJECT
            srng = np.random.default_rng([seed, 1, subject])
            sub_seed = int(srng.integers(2**31))
            rng = np.random.default_rng([seed, 2, label, i])
            # views of one subject share the lesion geometry, differ in noise and gain
            clean = _lesion(np.random.default_rng(sub_seed), label, size, jitter)
            gain = 1.0 + 0.15 * rng.standard_normal()
            img = clean * gain * _speckle(rng, size, looks)
            images.append(img)
            labels.append(label)
            subjects.append(subject)
    arr = np.stack(images)[:, None].astype(np.float64)
    mean, std = float(arr.mean()), float(arr.std())
    arr = ((arr - mean) / std).astype(np.float32)
    return ClassificationSet(arr, np.array(labels, dtype=np.int64), np.array(subjects, dtype=np.int64), mean, std)


# ---------------------------------------------------------------- segmentation

FOLLICLE_MARGIN = 2.0


def _seg_sample(rng, size):
    img = _background(rng, size)
    yy, xx = _grid(size)
    cy = size / 2 + rng.uniform(-0.1, 0.1) * size
    cx = size / 2 + rng.uniform(-0.1, 0.1) * size
    a = size * rng.uniform(0.28, 0.40)
    b = size * rng.uniform(0.22, 0.32)
    theta = rng.uniform(0, np.pi)
    ovary = _ellipse(size, cy, cx, a, b, theta) <= 1.0
    mask = ovary.astype(np.int64)
    img[ovary] = 0.62 + 0.05 * rng.standard_normal()
    # follicles must sit inside the ovary with a margin
    allowed = ndimage.distance_transform_edt(ovary) > FOLLICLE_MARGIN + 1.0
    n = int(rng.integers(1, 9))
    placed = 0
    for _ in range(60):
        if placed >= n:
            break
        fr_a = size * rng.uniform(0.05, 0.12)
        fr_b = fr_a * rng.uniform(0.7, 1.0)
        fy = cy + rng.uniform(-1, 1) * a * 0.7
        fx = cx + rng.uniform(-1, 1) * a * 0.7
        f = _ellipse(size, fy, fx, fr_a, fr_b, rng.uniform(0, np.pi)) <= 1.0
        if f.sum() < 4 or not allowed[f].all():
            continue
        mask[f] = 2
        img[f] = 0.08
        placed += 1
    if placed == 0:  # guarantee one follicle at the ovary centre
        f = _ellipse(size, cy, cx, size * 0.05, size * 0.05, 0.0) <= 1.0
        f &= allowed
        mask[f] = 2
        img[f] = 0.08
    img = ndimage.gaussian_filter(img, 0.6)
    return img, mask


def gen_segmentation_set(n: int, size: int = 64, seed: int = 0, looks: float = 3.0,
                         views_per_subject: int = VIEWS_PER_SUBJECT) -> SegmentationSet:
    if n < 1:
        raise ValueError("n must be >= 1")
    images, masks, subjects = [], [], []
    for i in range(n):
        subject = i // views_per_subject
        rng = np.random.default_rng([seed, 3, i])
        clean, mask = _seg_sample(np.random.default_rng([seed, 4, subject]), size)
        img = clean * (1.0 + 0.1 * rng.standard_normal()) * _speckle(rng, size, looks)
        images.append(img)
        masks.append(mask)
        subjects.append(subject)
    arr = np.stack(images)[:, None].astype(np.float64)
    mean, std = float(arr.mean()), float(arr.std())
    arr = ((arr - mean) / std).astype(np.float32)
    return SegmentationSet(arr, np.stack(masks).astype(np.int64), np.array(subjects, dtype=np.int64), mean, std)


def follicles_inside_ovary(mask: np.ndarray) -> bool:
    """Every follicle pixel's 4-neighbours are ovary or follicle (never background)."""
    fol = mask == 2
    bg = np.pad(mask == 0, 1, constant_values=True)
    touching = bg[:-2, 1:-1] | bg[2:, 1:-1] | bg[1:-1, :-2] | bg[1:-1, 2:]
    return not np.any(fol & touching)


# ---------------------------------------------------------------- splits


def subject_split(subjects: np.ndarray, test_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Train/test indices such that no subject appears on both sides."""
    uniq = np.unique(subjects)
    rng = np.random.default_rng([seed, 5])
    perm = rng.permutation(uniq)
    n_test = max(1, int(round(test_fraction * len(uniq))))
    test_subjects = set(perm[:n_test].tolist())
    is_test = np.array([s in test_subjects for s in subjects])
    return np.flatnonzero(~is_test), np.flatnonzero(is_test)


# ---------------------------------------------------------------- augmentation


@dataclass
class AugmentConfig:
    rotation_degrees: float = 20.0
    hflip_prob: float = 0.5
    normalize: bool = False


def augment(image: np.ndarray, mask: Optional[np.ndarray], config: AugmentConfig, rng: np.random.Generator):
    """Joint rotation (nearest-neighbour for the mask) and horizontal flip; normalisation last."""
    angle = rng.uniform(-config.rotation_degrees, config.rotation_degrees) if config.rotation_degrees else 0.0
    flip = rng.random() < config.hflip_prob
    img = image
    if angle != 0.0:
        img = ndimage.rotate(img, angle, axes=(-1, -2), reshape=False, order=1, mode="nearest")
        if mask is not None:
            mask = ndimage.rotate(mask, angle, axes=(-1, -2), reshape=False, order=0, mode="constant", cval=0)
    if flip:
        img = img[..., ::-1]
        if mask is not None:
            mask = mask[..., ::-1]
    if config.normalize:
        img = (img - img.mean()) / (img.std() + 1e-8)
    img = np.ascontiguousarray(img, dtype=image.dtype)
    return img, (None if mask is None else np.ascontiguousarray(mask))


def augment_batch(images, masks, config: AugmentConfig, rng):
    out_i, out_m = [], []
    for k in range(len(images)):
        i, m = augment(images[k], None if masks is None else masks[k], config, rng)
        out_i.append(i)
        out_m.append(m)
    return np.stack(out_i), (None if masks is None else np.stack(out_m))


def replicate_channels(images: np.ndarray, channels: int = 3) -> np.ndarray:
    """Grayscale to multi-channel adapter (for 3-channel backbones)."""
    return np.repeat(images, channels, axis=1)


# ---------------------------------------------------------------- on-disk form


def save_dataset(ds, directory, name: str) -> Path:
    """Raw little-endian arrays plus a JSON manifest."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    files = {}
    arrays = {"images": ds.images.astype("<f4"), "subjects": ds.subjects.astype("<i8")}
    if isinstance(ds, ClassificationSet):
        arrays["labels"] = ds.labels.astype("<i8")
        kind = "classification"
    else:
        arrays["masks"] = ds.masks.astype("<i8")
        kind = "segmentation"
    for key, arr in arrays.items():
        fname = f"{name}_{key}.bin"
        tmp = d / (fname + ".tmp")
        tmp.write_bytes(arr.tobytes())
        os.replace(tmp, d / fname)
        files[key] = {"path": fname, "shape": list(arr.shape), "dtype": arr.dtype.str}
    manifest = {"kind": kind, "name": name, "mean": ds.mean, "std": ds.std, "arrays": files}
    mpath = d / f"{name}.json"
    tmp = d / f"{name}.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    os.replace(tmp, mpath)
    return mpath


def load_dataset(manifest_path):
    m = json.loads(Path(manifest_path).read_text())
    base = Path(manifest_path).parent
    arrs = {}
    for key, info in m["arrays"].items():
        raw = (base / info["path"]).read_bytes()
        arrs[key] = np.frombuffer(raw, dtype=np.dtype(info["dtype"])).reshape(info["shape"]).copy()
    images = arrs["images"].astype(np.float32)
    if m["kind"] == "classification":
        return ClassificationSet(images, arrs["labels"].astype(np.int64), arrs["subjects"].astype(np.int64), m["mean"], m["std"])
    return SegmentationSet(images, arrs["masks"].astype(np.int64), arrs["subjects"].astype(np.int64), m["mean"], m["std"])
