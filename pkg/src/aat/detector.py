"""Single-stage grid detector, box geometry, NMS and target assignment.

The detector is a four-stage convolutional backbone that turns a 64x64 RGB
image into an 8x8 feature grid. Each grid cell predicts ``C + 1`` class
logits (index ``C`` is background) and four box deltas
``(dx, dy, log dw, log dh)`` relative to the cell centre and a reference box
of twice the stride.
"""

from __future__ import annotations

import copy
import warnings
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from aat import ops
from aat.tensor import ShapeError, Tensor

DELTA_CLIP = 4.0


@dataclass(frozen=True)
class Detection:
    """A labelled box ``(x1, y1, x2, y2)`` in pixels with a confidence score."""

    box: tuple[float, float, float, float]
    class_id: int
    score: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "box", tuple(float(v) for v in self.box))
        object.__setattr__(self, "class_id", int(self.class_id))
        object.__setattr__(self, "score", float(self.score))

    @property
    def area(self) -> float:
        x1, y1, x2, y2 = self.box
        return max(x2 - x1, 0.0) * max(y2 - y1, 0.0)

    @property
    def center(self) -> tuple[float, float]:
        x1, y1, x2, y2 = self.box
        return (x1 + x2) / 2, (y1 + y2) / 2

    def to_json(self) -> dict:
        return {"box": list(self.box), "class": self.class_id, "score": self.score}

    @classmethod
    def from_json(cls, record: dict) -> Detection:
        return cls(tuple(record["box"]), record["class"], record.get("score", 1.0))


def detections_to_json(dets: Iterable[Detection]) -> list[dict]:
    return [d.to_json() for d in dets]


def detections_from_json(records: Iterable[dict]) -> list[Detection]:
    return [Detection.from_json(r) for r in records]


class RawOutputs(NamedTuple):
    logits: Tensor  # (N, G, G, C + 1)
    deltas: Tensor  # (N, G, G, 4)
    features: Tensor  # (N, G, G, F)
    image_size: int
    stride: int


class GridDetector:
    """Toy single-stage detector.

    Args:
        num_classes: Number of foreground classes ``C``.
        image_size: Square input side length.
        channels: Output channels of the four backbone stages. The first
            three stages use stride 2, so the grid stride is 8.
        seed: Seed for weight initialisation.
        zero_heads: Start both heads at zero (uniform class probabilities).
        dtype: Parameter dtype.
    """

    strides = (2, 2, 2, 1)

    def __init__(
        self,
        num_classes: int,
        image_size: int = 64,
        channels: Sequence[int] = (16, 32, 32, 32),
        seed: int = 0,
        zero_heads: bool = False,
        dtype=np.float32,
    ):
        if len(channels) != 4:
            raise ValueError("the backbone has exactly four stages")
        self.num_classes = num_classes
        self.image_size = image_size
        self.channels = tuple(channels)
        self.stride = int(np.prod(self.strides))
        if image_size % self.stride:
            raise ValueError(f"image size {image_size} not divisible by stride {self.stride}")
        self.grid = image_size // self.stride
        self.ref_size = 2.0 * self.stride
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        cin = 3
        for k, cout in enumerate(self.channels):
            std = np.sqrt(2.0 / (9 * cin))
            self._add(f"backbone.conv{k + 1}.w", rng.normal(0, std, (3, 3, cin, cout)), dtype)
            self._add(f"backbone.conv{k + 1}.b", np.zeros(cout), dtype)
            cin = cout
        head_std = 0.0 if zero_heads else 0.01
        self._add("head.cls.w", rng.normal(0, 1, (cin, num_classes + 1)) * head_std, dtype)
        self._add("head.cls.b", np.zeros(num_classes + 1), dtype)
        self._add("head.reg.w", rng.normal(0, 1, (cin, 4)) * head_std, dtype)
        self._add("head.reg.b", np.zeros(4), dtype)

    def _add(self, name: str, value: np.ndarray, dtype) -> None:
        self.params[name] = Tensor(np.asarray(value, dtype=dtype), requires_grad=True, name=name)

    @property
    def background(self) -> int:
        return self.num_classes

    @property
    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def set_trainable(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = flag

    def copy(self, trainable: bool | None = None) -> GridDetector:
        clone = copy.copy(self)
        clone.params = {k: Tensor(p.data.copy(), p.requires_grad, k) for k, p in self.params.items()}
        if trainable is not None:
            clone.set_trainable(trainable)
        return clone

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"state is missing parameters: {sorted(missing)}")
        for k, p in self.params.items():
            if state[k].shape != p.shape:
                raise ShapeError(f"{k}: stored shape {state[k].shape} vs model shape {p.shape}")
            p.data = np.array(state[k], dtype=p.dtype)

    def forward(self, images: Tensor) -> RawOutputs:
        n = self.image_size
        if images.ndim != 4 or images.shape[1:] != (n, n, 3):
            raise ShapeError(f"expected input (N, {n}, {n}, 3), got {images.shape}")
        p = self.params
        x = images
        for k, s in enumerate(self.strides, start=1):
            x = ops.relu(ops.conv2d(x, p[f"backbone.conv{k}.w"], p[f"backbone.conv{k}.b"], stride=s, padding=1))
        logits = ops.linear(x, p["head.cls.w"], p["head.cls.b"])
        deltas = ops.linear(x, p["head.reg.w"], p["head.reg.b"])
        return RawOutputs(logits, deltas, x, self.image_size, self.stride)

    __call__ = forward


def predict(model: GridDetector, image) -> RawOutputs:
    """Run ``model`` on one ``H x W x 3`` image or an ``N x H x W x 3`` batch."""
    x = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=model.params["head.cls.b"].dtype))
    if x.ndim == 3:
        x = ops.reshape(x, (1,) + x.shape)
    return model.forward(x)


# -- geometry ------------------------------------------------------------------


def iou(box_a: Sequence[float], box_b: Sequence[float]) -> float:
    """Intersection over union of two ``(x1, y1, x2, y2)`` boxes."""
    ax1, ay1, ax2, ay2 = box_a
    bx1, by1, bx2, by2 = box_b
    area_a = (ax2 - ax1) * (ay2 - ay1)
    area_b = (bx2 - bx1) * (by2 - by1)
    if ax2 <= ax1 or ay2 <= ay1 or bx2 <= bx1 or by2 <= by1:
        warnings.warn("iou called with a zero-area box", RuntimeWarning, stacklevel=2)
        return 0.0
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return float(inter / (area_a + area_b - inter))


def iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(n, 4)`` and ``(m, 4)`` box arrays; degenerate pairs give 0."""
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = np.clip(a[:, 2] - a[:, 0], 0, None) * np.clip(a[:, 3] - a[:, 1], 0, None)
    area_b = np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where((union > 0) & (inter > 0), inter / np.where(union > 0, union, 1), 0.0)
    return out


def _rank_key(d: Detection):
    return (-d.score, d.class_id, d.box[0], d.box[1])


def nms(detections: Sequence[Detection], iou_threshold: float = 0.5) -> list[Detection]:
    """Greedy per-class suppression, highest score first.

    A detection is dropped when it overlaps an already kept detection of the
    same class with IoU strictly above ``iou_threshold``. Output is ordered by
    descending score, ties by ``(class_id, x1, y1)``.
    """
    if not 0 < iou_threshold <= 1:
        raise ValueError(f"iou threshold must lie in (0, 1], got {iou_threshold}")
    ordered = sorted(detections, key=_rank_key)
    if len(ordered) < 2:
        return ordered
    boxes = np.array([d.box for d in ordered])
    classes = np.array([d.class_id for d in ordered])
    overlaps = iou_matrix(boxes, boxes)
    alive = np.ones(len(ordered), dtype=bool)
    for i in range(len(ordered)):
        if not alive[i]:
            continue
        clash = (overlaps[i] > iou_threshold) & (classes == classes[i])
        clash[: i + 1] = False
        alive &= ~clash
    return [d for d, keep in zip(ordered, alive) if keep]


# -- decoding --------------------------------------------------------------------

_SCORE_CAP = np.nextafter(1.0, 0.0)


def cell_centers(grid: int, stride: int) -> tuple[np.ndarray, np.ndarray]:
    c = (np.arange(grid) + 0.5) * stride
    cy, cx = np.meshgrid(c, c, indexing="ij")
    return cx, cy


def decode_boxes(deltas: np.ndarray, stride: int, image_size: int) -> np.ndarray:
    """Turn ``(..., G, G, 4)`` deltas into clipped ``(x1, y1, x2, y2)`` boxes."""
    g = deltas.shape[-2]
    cx0, cy0 = cell_centers(g, stride)
    d = deltas.astype(np.float64)
    ref = 2.0 * stride
    cx = cx0 + d[..., 0] * stride
    cy = cy0 + d[..., 1] * stride
    w = ref * np.exp(np.clip(d[..., 2], -DELTA_CLIP, DELTA_CLIP))
    h = ref * np.exp(np.clip(d[..., 3], -DELTA_CLIP, DELTA_CLIP))
    boxes = np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)
    return np.clip(boxes, 0.0, float(image_size))


def class_probabilities(logits) -> np.ndarray:
    """Softmax over the last axis in float64; accepts a Tensor or an array."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return ops.softmax_np(data.astype(np.float64))


def decode(outputs: RawOutputs, score_threshold: float, foreground_argmax: bool = True) -> list[list[Detection]]:
    """Per image, one detection per cell whose best foreground class scores ``>= score_threshold``.

    With ``foreground_argmax`` (the pseudo-labelling setting) a cell only
    fires when its overall argmax is not background; evaluation turns this
    off to rank every cell by its best foreground score. Scores are capped
    just below 1, so a threshold of 1.0 yields nothing.
    """
    if not 0 <= score_threshold <= 1:
        raise ValueError(f"score threshold must lie in [0, 1], got {score_threshold}")
    probs = class_probabilities(outputs.logits)
    boxes = decode_boxes(outputs.deltas.data, outputs.stride, outputs.image_size)
    results = []
    for n in range(probs.shape[0]):
        p = probs[n]
        winner = p.argmax(axis=-1)
        fg = p[..., :-1]
        cls = fg.argmax(axis=-1)
        score = np.minimum(fg.max(axis=-1), _SCORE_CAP)
        keep = score >= score_threshold
        if foreground_argmax:
            keep &= winner != p.shape[-1] - 1
        dets = []
        for i, j in zip(*np.nonzero(keep)):
            b = boxes[n, i, j]
            if b[2] > b[0] and b[3] > b[1]:
                dets.append(Detection(tuple(b), int(cls[i, j]), float(score[i, j])))
        results.append(dets)
    return results


# -- targets and losses ----------------------------------------------------------


@dataclass
class GridAssignment:
    """Per-cell training targets for one image.

    ``classes`` holds the target class per cell (``num_classes`` for
    background), ``deltas`` the regression targets and ``source`` the index
    of the label each cell was assigned from (-1 when unassigned).
    """

    classes: np.ndarray
    deltas: np.ndarray
    source: np.ndarray

    @property
    def foreground(self) -> np.ndarray:
        return self.source >= 0


def assign_targets(labels: Sequence[Detection], num_classes: int, image_size: int = 64, stride: int = 8) -> GridAssignment:
    """Assign each object to the cell containing its centre.

    When several objects share a cell the largest-area one wins; equal areas
    keep the earlier label. Objects centred outside the image are ignored.
    """
    g = image_size // stride
    classes = np.full((g, g), num_classes, dtype=np.int64)
    deltas = np.zeros((g, g, 4))
    source = np.full((g, g), -1, dtype=np.int64)
    order = sorted(range(len(labels)), key=lambda k: (-labels[k].area, k))
    ref = 2.0 * stride
    for k in order:
        d = labels[k]
        cx, cy = d.center
        if not (0 <= cx < image_size and 0 <= cy < image_size):
            continue
        i, j = int(cy // stride), int(cx // stride)
        if source[i, j] >= 0:
            continue
        x1, y1, x2, y2 = d.box
        w, h = x2 - x1, y2 - y1
        if w <= 0 or h <= 0:
            continue
        classes[i, j] = d.class_id
        source[i, j] = k
        deltas[i, j] = ((cx - (j + 0.5) * stride) / stride, (cy - (i + 0.5) * stride) / stride, np.log(w / ref), np.log(h / ref))
    return GridAssignment(classes, deltas, source)


def background_weight(n_fg: int, n_bg: int, floor: float = 0.05) -> float:
    return max(n_fg / n_bg, floor) if n_bg else floor


def detection_loss(
    outputs: RawOutputs,
    assignments: Sequence[GridAssignment],
    include_regression: bool = True,
    bg_floor: float = 0.05,
) -> tuple[Tensor, dict]:
    """Balanced per-cell classification loss plus optional smooth-L1 regression.

    Background cells are weighted by ``max(n_fg / n_bg, bg_floor)`` and the
    classification term is the weighted mean cross-entropy. The regression
    term averages smooth-L1 over foreground cells and is reported as exactly
    0 when ``include_regression`` is off.
    """
    logits = outputs.logits
    n, g, _, k = logits.shape
    if len(assignments) != n or any(a.classes.shape != (g, g) for a in assignments):
        raise ShapeError(f"assignments do not match a batch of {n} {g}x{g} grids")
    targets = np.concatenate([a.classes.reshape(-1) for a in assignments])
    fg = targets != k - 1
    n_fg = int(fg.sum())
    n_bg = targets.size - n_fg
    weights = np.where(fg, 1.0, background_weight(n_fg, n_bg, bg_floor))
    cls = ops.softmax_cross_entropy(ops.reshape(logits, (-1, k)), targets, weights)
    report = {"cls": float(cls.data), "reg": 0.0, "n_fg": n_fg}
    loss = cls
    if include_regression and n_fg:
        idx = np.nonzero(fg)[0]
        reg_t = np.concatenate([a.deltas.reshape(-1, 4) for a in assignments])[idx]
        pred = ops.take(ops.reshape(outputs.deltas, (-1, 4)), idx)
        reg = ops.scale(ops.smooth_l1(pred, reg_t), 1.0 / n_fg)
        report["reg"] = float(reg.data)
        loss = ops.add(cls, reg)
    report["total"] = float(loss.data)
    return loss, report
