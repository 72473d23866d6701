"""Synthetic two-domain detection benchmark and augmentation pipelines.

Source scenes are flat-coloured geometric shapes on smooth backgrounds.
Target scenes contain the same shapes rendered with striped fills and then
pushed through a fixed photometric shift (contrast loss, hue rotation,
haze and sensor noise). Class frequencies are controlled by per-class
weights, which is how the benchmark becomes imbalanced.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from aat.detector import Detection, iou

SHAPES = ("circle", "square", "triangle", "ring", "cross", "diamond")
_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class SceneSpec:
    image_size: int = 64
    classes: tuple[str, ...] = ("circle", "square", "ring", "triangle")
    class_weights: tuple[float, ...] = (10.0, 10.0, 1.0, 1.0)
    count_range: tuple[int, int] = (1, 4)
    size_range: tuple[int, int] = (12, 24)
    background_noise: float = 0.02

    def __post_init__(self):
        if len(self.classes) != len(self.class_weights):
            raise ValueError("one frequency weight per class is required")
        if any(w <= 0 for w in self.class_weights):
            raise ValueError("class frequency weights must be positive")
        unknown = set(self.classes) - set(SHAPES)
        if unknown:
            raise ValueError(f"no renderer for shapes {sorted(unknown)}")
        if self.count_range[0] < 0 or self.count_range[0] > self.count_range[1]:
            raise ValueError(f"bad object count range {self.count_range}")

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def minority_classes(self) -> list[int]:
        """Classes whose frequency weight is below the mean weight."""
        w = np.asarray(self.class_weights)
        return [int(c) for c in np.nonzero(w < w.mean())[0]]


@dataclass(frozen=True)
class DomainConfig:
    tag: str = "source"
    haze: float = 0.0
    contrast: float = 1.0
    hue_shift: float = 0.0
    noise: float = 0.0
    texture: str = "flat"

    def __post_init__(self):
        if self.tag not in ("source", "target"):
            raise ValueError(f"domain tag must be 'source' or 'target', got {self.tag!r}")
        if self.texture not in ("flat", "stripes"):
            raise ValueError(f"unknown texture style {self.texture!r}")
        if self.tag == "source" and self.is_shifted:
            raise ValueError("the source domain applies no shift")

    @property
    def is_shifted(self) -> bool:
        return bool(self.haze or self.contrast != 1.0 or self.hue_shift or self.noise or self.texture != "flat")


SOURCE = DomainConfig()
TARGET = DomainConfig("target", haze=0.35, contrast=0.6, hue_shift=1.2, noise=0.04, texture="stripes")


# -- rendering -----------------------------------------------------------------


def _shape_mask(shape: str, xx: np.ndarray, yy: np.ndarray, cx: float, cy: float, r: float) -> np.ndarray:
    dx, dy = xx - cx, yy - cy
    if shape == "circle":
        return dx * dx + dy * dy <= r * r
    if shape == "square":
        return (np.abs(dx) <= r * 0.85) & (np.abs(dy) <= r * 0.85)
    if shape == "ring":
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if shape == "triangle":
        t = (dy + r) / (2 * r)
        return (t >= 0) & (t <= 1) & (np.abs(dx) <= t * r)
    if shape == "cross":
        arm = r / 3
        return ((np.abs(dx) <= r) & (np.abs(dy) <= arm)) | ((np.abs(dy) <= r) & (np.abs(dx) <= arm))
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) <= r
    raise ValueError(f"no renderer for shape {shape!r}")


def _hue_matrix(theta: float) -> np.ndarray:
    """Rotation of RGB space about the grey axis by ``theta`` radians."""
    k = np.ones(3) / np.sqrt(3)
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(theta) * kx + (1 - np.cos(theta)) * kx @ kx


def apply_domain_shift(image: np.ndarray, domain: DomainConfig, rng: np.random.Generator) -> np.ndarray:
    img = image
    if domain.contrast != 1.0:
        img = img.mean() + domain.contrast * (img - img.mean())
    if domain.hue_shift:
        img = img @ _hue_matrix(domain.hue_shift).T
    if domain.haze:
        img = (1 - domain.haze) * img + domain.haze * 0.85
    if domain.noise:
        img = img + rng.normal(0, domain.noise, img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_scene(seed, spec: SceneSpec, domain: DomainConfig = SOURCE) -> tuple[np.ndarray, list[Detection]]:
    """Render one scene; the output is a pure function of ``seed``.

    Returns a float32 ``H x W x 3`` image in [0, 1] and its exact ground truth.
    """
    rng = np.random.default_rng(seed)
    n = spec.image_size
    yy, xx = np.mgrid[0:n, 0:n] + 0.5
    base = rng.uniform(0.15, 0.55, 3)
    tilt = rng.uniform(-0.15, 0.15, 2)
    img = base + (tilt[0] * (xx / n - 0.5) + tilt[1] * (yy / n - 0.5))[..., None]
    img = img + rng.normal(0, spec.background_noise, img.shape)
    weights = np.asarray(spec.class_weights, dtype=float)
    n_obj = int(rng.integers(spec.count_range[0], spec.count_range[1] + 1))
    labels: list[Detection] = []
    for _ in range(n_obj):
        cls = int(rng.choice(len(weights), p=weights / weights.sum()))
        color = rng.uniform(0.55, 1.0, 3) * rng.permutation([1.0, rng.uniform(0.2, 0.8), rng.uniform(0.0, 0.4)])
        stripe_phase = rng.uniform(0, 2 * np.pi)
        for _attempt in range(30):
            size = rng.uniform(*spec.size_range)
            r = size / 2
            cx = rng.uniform(r + 1, n - r - 1)
            cy = rng.uniform(r + 1, n - r - 1)
            mask = _shape_mask(spec.classes[cls], xx, yy, cx, cy, r)
            if not mask.any():
                continue
            rows, cols = np.nonzero(mask)
            box = (float(cols.min()), float(rows.min()), float(cols.max() + 1), float(rows.max() + 1))
            if any(_boxes_touch(box, other.box, margin=2) for other in labels):
                continue
            fill = np.broadcast_to(color, img.shape)
            if domain.texture == "stripes":
                stripes = 0.65 + 0.35 * (np.sin((xx + yy) * 1.3 + stripe_phase) > 0)
                fill = fill * stripes[..., None]
            img = np.where(mask[..., None], fill, img)
            labels.append(Detection(box, cls, 1.0))
            break
    img = apply_domain_shift(np.clip(img, 0, 1), domain, rng)
    return img.astype(np.float32), labels


def _boxes_touch(a, b, margin: float = 0.0) -> bool:
    return not (a[2] + margin <= b[0] or b[2] + margin <= a[0] or a[3] + margin <= b[1] or b[3] + margin <= a[1])


# -- augmentation ----------------------------------------------------------------


@dataclass
class AugmentationRecord:
    """Ordered ``(transform, params)`` pairs; replaying them reproduces the output."""

    steps: list[tuple[str, dict]] = field(default_factory=list)

    def add(self, name: str, **params) -> None:
        self.steps.append((name, params))

    def cutouts(self) -> list[tuple[int, int, int, int]]:
        return [tuple(r) for name, p in self.steps if name == "cutout" for r in p["rects"]]

    def count(self, name: str) -> int:
        return sum(1 for n, _ in self.steps if n == name)


@dataclass(frozen=True)
class StrongAugConfig:
    jitter_p: float = 0.8
    grayscale_p: float = 0.2
    blur_p: float = 0.5
    cutout_p: float = 0.7
    cutout_count: tuple[int, int] = (1, 3)
    cutout_area: tuple[float, float] = (0.05, 0.20)
    jitter_strength: float = 0.4
    blur_sigma: tuple[float, float] = (0.1, 1.2)
    erased_fraction: float = 0.8


NO_AUGMENT = StrongAugConfig(jitter_p=0.0, grayscale_p=0.0, blur_p=0.0, cutout_p=0.0)


def hflip_labels(labels: Sequence[Detection], width: int) -> list[Detection]:
    return [Detection((width - d.box[2], d.box[1], width - d.box[0], d.box[3]), d.class_id, d.score) for d in labels]


def weak_augment(image: np.ndarray, labels: Sequence[Detection], rng: np.random.Generator, flip: bool | None = None):
    """Horizontal flip with probability 0.5 (or as forced by ``flip``)."""
    record = AugmentationRecord()
    do_flip = bool(rng.random() < 0.5) if flip is None else flip
    if do_flip:
        record.add("hflip")
        return image[:, ::-1].copy(), hflip_labels(labels, image.shape[1]), record
    return image, list(labels), record


def _jitter(img: np.ndarray, brightness: float, contrast: float, saturation: float) -> np.ndarray:
    img = img * brightness
    img = img.mean() + contrast * (img - img.mean())
    gray = (img @ _LUMA)[..., None]
    img = gray + saturation * (img - gray)
    return np.clip(img, 0.0, 1.0)


def _grayscale(img: np.ndarray) -> np.ndarray:
    return np.repeat((img @ _LUMA)[..., None], 3, axis=-1)


def _blur(img: np.ndarray, sigma: float) -> np.ndarray:
    return ndimage.gaussian_filter(img, sigma=(sigma, sigma, 0), mode="nearest")


def _cutout(img: np.ndarray, rects) -> np.ndarray:
    img = img.copy()
    for x1, y1, x2, y2 in rects:
        img[y1:y2, x1:x2] = 0.0
    return img


def _apply_step(img: np.ndarray, name: str, p: dict) -> np.ndarray:
    if name == "hflip":
        return img[:, ::-1].copy()
    if name == "jitter":
        return _jitter(img, p["brightness"], p["contrast"], p["saturation"])
    if name == "grayscale":
        return _grayscale(img)
    if name == "blur":
        return _blur(img, p["sigma"])
    if name == "cutout":
        return _cutout(img, p["rects"])
    if name == "paste":
        out = img.copy()
        x1, y1, x2, y2 = p["box"]
        out[y1:y2, x1:x2] = p["patch"]
        return out
    raise ValueError(f"unknown augmentation step {name!r}")


def replay(image: np.ndarray, record: AugmentationRecord) -> np.ndarray:
    """Re-apply every recorded transform to ``image``."""
    img = image
    for name, p in record.steps:
        img = _apply_step(img, name, p)
    return np.clip(img, 0.0, 1.0).astype(image.dtype)


def strong_augment(
    image: np.ndarray,
    labels: Sequence[Detection],
    rng: np.random.Generator,
    config: StrongAugConfig = StrongAugConfig(),
):
    """Colour jitter, grayscale, Gaussian blur and cutout, each with its configured probability.

    Cutout runs last so erased regions stay exactly zero. Labels that end up
    mostly erased are dropped by :func:`apply_cutout_label_rule`.
    """
    record = AugmentationRecord()
    n_h, n_w = image.shape[:2]
    if rng.random() < config.jitter_p:
        s = config.jitter_strength
        f = rng.uniform(1 - s, 1 + s, 3)
        record.add("jitter", brightness=float(f[0]), contrast=float(f[1]), saturation=float(f[2]))
    if rng.random() < config.grayscale_p:
        record.add("grayscale")
    if rng.random() < config.blur_p:
        record.add("blur", sigma=float(rng.uniform(*config.blur_sigma)))
    if rng.random() < config.cutout_p:
        rects = []
        for _ in range(int(rng.integers(config.cutout_count[0], config.cutout_count[1] + 1))):
            area = rng.uniform(*config.cutout_area) * n_h * n_w
            aspect = np.exp(rng.uniform(np.log(0.5), np.log(2.0)))
            w = int(np.clip(round(np.sqrt(area * aspect)), 1, n_w))
            h = int(np.clip(round(np.sqrt(area / aspect)), 1, n_h))
            x1 = int(rng.integers(0, n_w - w + 1))
            y1 = int(rng.integers(0, n_h - h + 1))
            rects.append((x1, y1, x1 + w, y1 + h))
        record.add("cutout", rects=rects)
    out = replay(image, record)
    return out, apply_cutout_label_rule(labels, record, config.erased_fraction), record


def union_area(rects: Sequence[Sequence[float]]) -> float:
    """Exact area of a union of axis-aligned rectangles (coordinate compression)."""
    rects = [r for r in rects if r[2] > r[0] and r[3] > r[1]]
    if not rects:
        return 0.0
    xs = sorted({v for r in rects for v in (r[0], r[2])})
    ys = sorted({v for r in rects for v in (r[1], r[3])})
    total = 0.0
    for x0, x1 in zip(xs, xs[1:]):
        for y0, y1 in zip(ys, ys[1:]):
            if any(r[0] <= x0 and x1 <= r[2] and r[1] <= y0 and y1 <= r[3] for r in rects):
                total += (x1 - x0) * (y1 - y0)
    return total


def erased_fraction(box: Sequence[float], rects: Sequence[Sequence[float]]) -> float:
    x1, y1, x2, y2 = box
    area = (x2 - x1) * (y2 - y1)
    if area <= 0:
        return 1.0
    clipped = [(max(x1, r[0]), max(y1, r[1]), min(x2, r[2]), min(y2, r[3])) for r in rects]
    return union_area(clipped) / area


def apply_cutout_label_rule(labels: Sequence[Detection], record: AugmentationRecord, threshold: float = 0.8) -> list[Detection]:
    """Drop labels whose box is erased by a fraction ``>= threshold``."""
    rects = record.cutouts()
    if not rects:
        return list(labels)
    return [d for d in labels if erased_fraction(d.box, rects) < threshold]


def transfer_labels(labels: Sequence[Detection], record: AugmentationRecord, width: int, threshold: float = 0.8) -> list[Detection]:
    """Map labels through a record's geometric steps, then apply the cutout rule."""
    out = list(labels)
    for name, _ in record.steps:
        if name == "hflip":
            out = hflip_labels(out, width)
    return apply_cutout_label_rule(out, record, threshold)


def _resize_nearest(patch: np.ndarray, h: int, w: int) -> np.ndarray:
    rows = np.minimum((np.arange(h) + 0.5) * patch.shape[0] / h, patch.shape[0] - 1).astype(int)
    cols = np.minimum((np.arange(w) + 0.5) * patch.shape[1] / w, patch.shape[1] - 1).astype(int)
    return patch[rows][:, cols]


def paste_crops(
    image: np.ndarray,
    labels: Sequence[Detection],
    crops: Sequence[tuple[np.ndarray, int]],
    record: AugmentationRecord,
    rng: np.random.Generator,
    max_overlap: float = 0.3,
    max_tries: int = 10,
    min_side: int = 4,
):
    """Paste ``(patch, class)`` crops into the record's cutout rectangles.

    Each crop is shrunk to fit its rectangle if needed and placed where its
    box overlaps no existing label by more than ``max_overlap`` IoU. Crops
    that find no spot are skipped and counted as ``paste_skipped`` steps.
    """
    rects = record.cutouts()
    labels = list(labels)
    if not crops or not rects:
        return image, labels
    img = image.copy()
    for patch, cls in crops:
        rx1, ry1, rx2, ry2 = rects[int(rng.integers(len(rects)))]
        rw, rh = rx2 - rx1, ry2 - ry1
        ph, pw = patch.shape[:2]
        s = min(1.0, rw / pw, rh / ph)
        w, h = max(1, int(pw * s)), max(1, int(ph * s))
        placed = False
        if w >= min_side and h >= min_side:
            resized = _resize_nearest(patch, h, w) if (h, w) != (ph, pw) else patch
            for _ in range(max_tries):
                x1 = rx1 + int(rng.integers(0, rw - w + 1))
                y1 = ry1 + int(rng.integers(0, rh - h + 1))
                box = (x1, y1, x1 + w, y1 + h)
                if all(iou(box, d.box) <= max_overlap for d in labels):
                    img[y1 : y1 + h, x1 : x1 + w] = resized
                    record.add("paste", box=box, patch=resized.copy(), class_id=int(cls))
                    labels.append(Detection(box, int(cls), 1.0))
                    placed = True
                    break
        if not placed:
            record.add("paste_skipped", class_id=int(cls))
    return img, labels


def augment_patch(patch: np.ndarray, rng: np.random.Generator, strength: float = 0.4) -> np.ndarray:
    """Colour-jitter a crop before it is pasted."""
    f = rng.uniform(1 - strength, 1 + strength, 3)
    return _jitter(patch, *f).astype(patch.dtype)


# -- datasets --------------------------------------------------------------------

_SPLIT_CODES = {"source_train": 0, "target_train": 1, "target_test": 2, "source_test": 3}


@dataclass
class DetectionDataset:
    """Images stored as uint8 (matching their PNG form) plus per-image labels."""

    images: np.ndarray
    labels: list[list[Detection]]
    classes: tuple[str, ...]
    name: str = ""

    def __len__(self) -> int:
        return len(self.labels)

    def image(self, k: int) -> np.ndarray:
        return self.images[k].astype(np.float32) / 255.0

    def batch(self, idx: Sequence[int]) -> np.ndarray:
        return self.images[np.asarray(idx)].astype(np.float32) / 255.0

    def class_histogram(self) -> np.ndarray:
        hist = np.zeros(len(self.classes), dtype=int)
        for labs in self.labels:
            for d in labs:
                hist[d.class_id] += 1
        return hist


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def make_split(spec: SceneSpec, domain: DomainConfig, size: int, seed: int, name: str) -> DetectionDataset:
    """Generate ``size`` scenes; image ``k`` uses the seed stream ``(seed, split, k)``."""
    code = _SPLIT_CODES.get(name, 99)
    n = spec.image_size
    images = np.empty((size, n, n, 3), dtype=np.uint8)
    labels = []
    for k in range(size):
        img, labs = generate_scene([seed, code, k], spec, domain)
        images[k] = to_uint8(img)
        labels.append(labs)
    return DetectionDataset(images, labels, spec.classes, name)


def save_split(dataset: DetectionDataset, directory: str | Path, extra: dict | None = None) -> Path:
    """Write PNGs and one annotation JSON for the split; returns the JSON path."""
    root = Path(directory)
    img_dir = root / dataset.name
    img_dir.mkdir(parents=True, exist_ok=True)
    images, annotations = [], []
    for k in range(len(dataset)):
        fname = f"{dataset.name}/{k:06d}.png"
        Image.fromarray(dataset.images[k]).save(root / fname, optimize=False)
        h, w = dataset.images[k].shape[:2]
        images.append({"id": k, "file": fname, "width": w, "height": h})
        for d in dataset.labels[k]:
            annotations.append({"image_id": k, "box": list(d.box), "class": d.class_id})
    doc = {"images": images, "annotations": annotations, "classes": list(dataset.classes)}
    doc.update(extra or {})
    path = root / f"{dataset.name}.json"
    path.write_text(json.dumps(doc, indent=1, sort_keys=True))
    return path


def load_split(annotation_path: str | Path) -> DetectionDataset:
    path = Path(annotation_path)
    doc = json.loads(path.read_text())
    entries = sorted(doc["images"], key=lambda e: e["id"])
    index = {e["id"]: k for k, e in enumerate(entries)}
    images = np.stack([np.asarray(Image.open(path.parent / e["file"]).convert("RGB")) for e in entries]) if entries else np.zeros((0, 0, 0, 3), np.uint8)
    labels: list[list[Detection]] = [[] for _ in entries]
    for a in doc["annotations"]:
        labels[index[a["image_id"]]].append(Detection(tuple(a["box"]), a["class"], 1.0))
    return DetectionDataset(images, labels, tuple(doc["classes"]), path.stem)


def spec_to_dict(spec: SceneSpec) -> dict:
    return asdict(spec)
