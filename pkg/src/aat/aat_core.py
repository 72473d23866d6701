"""Adversarially attacked teacher: attack, label regularisation and minority oversampling.

The teacher's classification branch is attacked with a single FGSM step
using its own (vanilla) pseudo-labels as targets. Detections on the
perturbed image are compared with the vanilla ones under a class-dominance
confusion matrix to produce the adversarial pseudo-label set. Minority
objects that survive the attack are cropped into a FIFO bank and later
pasted into cutout regions of strongly augmented target images.
"""

from __future__ import annotations

import enum
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from aat import ops
from aat.detector import Detection, GridAssignment, GridDetector, assign_targets, iou
from aat.tensor import Tape, Tensor

log = logging.getLogger(__name__)


# -- FGSM on the teacher -----------------------------------------------------------


@dataclass
class AdversarialExample:
    image: np.ndarray  # x_adv, clipped to [0, 1]
    perturbation: np.ndarray  # x_adv - x after clipping
    raw_perturbation: np.ndarray  # beta * sgn(grad), before clipping
    beta: float
    attacked_mask: np.ndarray  # (N, G, G) cells whose loss was attacked
    skipped: bool = False


def attack_loss(teacher: GridDetector, images: Tensor, assignments: Sequence[GridAssignment]) -> Tensor:
    """Summed cross-entropy of the teacher's logits against its own labels on assigned cells."""
    out = teacher(images)
    k = out.logits.shape[-1]
    targets = np.concatenate([a.classes.reshape(-1) for a in assignments])
    weights = np.concatenate([a.foreground.reshape(-1) for a in assignments]).astype(out.logits.dtype)
    return ops.softmax_cross_entropy(ops.reshape(out.logits, (-1, k)), targets, weights, reduction="sum")


def fgsm_attack(
    teacher: GridDetector,
    images: np.ndarray,
    vanilla: Sequence[Sequence[Detection]],
    beta: float,
) -> AdversarialExample:
    """One gradient-sign step that increases the teacher's loss on its vanilla labels.

    ``images`` is an ``N x H x W x 3`` batch in [0, 1] and ``vanilla`` holds
    one label list per image. Only cells assigned to vanilla labels
    contribute to the loss, so images without labels are returned unchanged.
    Gradients flow to the input only; teacher weights are never recorded.
    """
    images = np.asarray(images)
    assignments = [assign_targets(v, teacher.num_classes, teacher.image_size, teacher.stride) for v in vanilla]
    mask = np.stack([a.foreground for a in assignments])
    zero = np.zeros_like(images)
    if beta == 0 or not mask.any():
        return AdversarialExample(images.copy(), zero, zero.copy(), beta, mask)
    frozen = teacher.copy(trainable=False) if any(p.requires_grad for p in teacher.params.values()) else teacher
    x = Tensor(images.astype(frozen.params["head.cls.b"].dtype), requires_grad=True)
    with Tape() as tape:
        loss = attack_loss(frozen, x, assignments)
    grads = tape.backward(loss)
    g = grads[x]
    if not np.isfinite(g).all():
        log.warning("non-finite input gradient; attack skipped")
        return AdversarialExample(images.copy(), zero, zero.copy(), beta, mask, skipped=True)
    raw = (beta * np.sign(g)).astype(images.dtype)
    adv = np.clip(images + raw, 0.0, 1.0).astype(images.dtype)
    return AdversarialExample(adv, adv - images, raw, beta, mask)


# -- class dominance -----------------------------------------------------------------


class ConfusionMatrix:
    """Exponential average of source-domain class probabilities.

    Row ``i`` estimates the probability vector a class-``i`` object is
    classified with. Starts at the identity.
    """

    def __init__(self, num_classes: int, momentum: float = 0.99):
        if not 0 <= momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        self.matrix = np.eye(num_classes)
        self.momentum = momentum
        self.counts = np.zeros(num_classes, dtype=np.int64)

    @property
    def num_classes(self) -> int:
        return self.matrix.shape[0]

    def update(self, classes: Sequence[int], probs: np.ndarray) -> None:
        """Fold in one probability vector per observed instance, in order."""
        m = self.momentum
        for c, q in zip(classes, np.asarray(probs, dtype=np.float64)):
            self.matrix[c] = m * self.matrix[c] + (1 - m) * q
            self.counts[c] += 1

    def minority_classes(self) -> list[int]:
        return [c for c in range(self.num_classes) if is_minority(c, self.matrix)]

    def copy(self) -> ConfusionMatrix:
        out = ConfusionMatrix(self.num_classes, self.momentum)
        out.matrix = self.matrix.copy()
        out.counts = self.counts.copy()
        return out


def foreground_probabilities(logits: np.ndarray) -> np.ndarray:
    """Softmax over foreground logits only (background column dropped, rows renormalised)."""
    return ops.softmax_np(np.asarray(logits, dtype=np.float64)[..., :-1])


def update_confusion_matrix(cm: ConfusionMatrix, assignments: Sequence[GridAssignment], logits: np.ndarray) -> ConfusionMatrix:
    """Update ``cm`` from cells assigned to source ground truth.

    ``logits`` is the ``(N, G, G, C + 1)`` student output for the same batch.
    """
    classes, probs = [], []
    for n, a in enumerate(assignments):
        fg = a.foreground
        if fg.any():
            classes.extend(a.classes[fg].tolist())
            probs.append(foreground_probabilities(logits[n][fg]))
    if classes:
        cm.update(classes, np.concatenate(probs))
    return cm


class Dominance(enum.Enum):
    I_LESS_DOMINANT = "i-less-dominant"
    J_LESS_DOMINANT = "j-less-dominant"


def dominance_compare(c_i: int, c_j: int, matrix: np.ndarray) -> Dominance:
    """``c_i`` is the less dominant class iff ``M[c_i, c_j] >= M[c_j, c_i]``."""
    if matrix[c_i, c_j] >= matrix[c_j, c_i]:
        return Dominance.I_LESS_DOMINANT
    return Dominance.J_LESS_DOMINANT


def is_minority(c: int, matrix: np.ndarray) -> bool:
    diag = np.diag(matrix)
    return bool(diag[c] < diag.mean())


# -- adversarial pseudo-labels ----------------------------------------------------------------


def best_match(box: Sequence[float], vanilla: Sequence[Detection]) -> tuple[int, float]:
    """Index and IoU of the vanilla label overlapping ``box`` most.

    Ties go to the higher vanilla score, then the lexicographically smaller box.
    Returns ``(-1, 0.0)`` when ``vanilla`` is empty.
    """
    best, best_key = -1, None
    for j, v in enumerate(vanilla):
        ov = iou(box, v.box)
        key = (-ov, -v.score, v.box)
        if best_key is None or key < best_key:
            best, best_key = j, key
    return (best, -best_key[0]) if best >= 0 else (-1, 0.0)


def generate_adversarial_pseudo_labels(
    vanilla: Sequence[Detection],
    adversarial_pass: Sequence[Detection],
    matrix: np.ndarray,
    match_iou: float = 0.5,
) -> list[Detection]:
    """Build the adversarial pseudo-label set from vanilla and attacked detections.

    For each detection on the attacked image: if it overlaps its best vanilla
    match by more than ``match_iou`` it is kept when its class is no more
    dominant than the matched vanilla class; otherwise it is kept only when
    its class is a minority class. Vanilla labels without a surviving
    counterpart are simply absent from the result.
    """
    matrix = np.asarray(matrix)
    out = []
    for det in adversarial_pass:
        j, ov = best_match(det.box, vanilla)
        if j >= 0 and ov > match_iou:
            if dominance_compare(det.class_id, vanilla[j].class_id, matrix) is Dominance.I_LESS_DOMINANT:
                out.append(det)
        elif is_minority(det.class_id, matrix):
            out.append(det)
    return out


def label_dispositions(
    vanilla: Sequence[Detection],
    adversarial_pass: Sequence[Detection],
    final: Sequence[Detection],
    match_iou: float = 0.5,
) -> dict:
    """Classify what happened to each label.

    Vanilla labels are ``retained`` (a same-class final label overlaps them),
    ``corrected`` (only a different-class final label overlaps them) or
    ``suppressed`` (no final label overlaps them). Final labels with no
    overlapping vanilla label are ``recovered``.
    """
    vanilla_out, final_out = [], []
    for v in vanilla:
        hits = [f for f in final if iou(f.box, v.box) > match_iou]
        if any(f.class_id == v.class_id for f in hits):
            state = "retained"
        elif hits:
            state = "corrected"
        else:
            state = "suppressed"
        vanilla_out.append({**v.to_json(), "disposition": state})
    for f in final:
        j, ov = best_match(f.box, vanilla)
        if j < 0 or ov <= match_iou:
            final_out.append({**f.to_json(), "disposition": "recovered"})
    counts = {k: 0 for k in ("retained", "corrected", "suppressed", "recovered")}
    for rec in vanilla_out + final_out:
        counts[rec["disposition"]] += 1
    return {"vanilla": vanilla_out, "recovered": final_out, "counts": counts}


# -- robust minority oversampling ---------------------------------------------------------------


@dataclass
class CropEntry:
    patch: np.ndarray
    class_id: int
    image_id: int
    iteration: int


@dataclass
class CropBank:
    """Per-class FIFO queues of minority crops, each capped at ``capacity``."""

    capacity: int = 32
    queues: dict[int, deque] = field(default_factory=dict)

    def push(self, entry: CropEntry) -> None:
        q = self.queues.setdefault(entry.class_id, deque(maxlen=self.capacity))
        q.append(entry)

    def retain_classes(self, classes: Sequence[int]) -> None:
        """Drop queues of classes that are no longer minority."""
        keep = set(classes)
        for c in list(self.queues):
            if c not in keep:
                del self.queues[c]

    def __len__(self) -> int:
        return sum(len(q) for q in self.queues.values())

    def class_sizes(self) -> dict[int, int]:
        return {c: len(q) for c, q in sorted(self.queues.items()) if q}

    def entries(self, class_id: int) -> list[CropEntry]:
        return list(self.queues.get(class_id, ()))


def crop_patch(image: np.ndarray, box: Sequence[float]) -> np.ndarray:
    h, w = image.shape[:2]
    x1, y1 = max(int(np.floor(box[0])), 0), max(int(np.floor(box[1])), 0)
    x2, y2 = min(int(np.ceil(box[2])), w), min(int(np.ceil(box[3])), h)
    return image[y1:y2, x1:x2].copy()


def harvest_robust_minority_crops(
    image: np.ndarray,
    vanilla: Sequence[Detection],
    adversarial: Sequence[Detection] | None,
    matrix: np.ndarray,
    bank: CropBank,
    image_id: int = -1,
    iteration: int = 0,
    match_iou: float = 0.5,
    min_side: int = 4,
) -> CropBank:
    """Push crops of attack-robust minority labels into ``bank``.

    A label is robust when it is in the adversarial set and a vanilla label
    of the same class overlaps it by more than ``match_iou``; the crop is
    taken under the adversarial box. Passing ``adversarial=None`` skips the
    robustness check and harvests every minority vanilla label instead.
    """
    minority = [c for c in range(matrix.shape[0]) if is_minority(c, matrix)]
    bank.retain_classes(minority)
    if not minority:
        return bank
    if adversarial is None:
        candidates = [v for v in vanilla if v.class_id in minority]
    else:
        candidates = [
            a
            for a in adversarial
            if a.class_id in minority and any(v.class_id == a.class_id and iou(a.box, v.box) > match_iou for v in vanilla)
        ]
    for det in candidates:
        patch = crop_patch(image, det.box)
        if min(patch.shape[:2]) >= min_side:
            bank.push(CropEntry(patch, det.class_id, image_id, iteration))
    return bank


def sample_crops_for_oversampling(bank: CropBank, rng: np.random.Generator, max_crops: int = 2) -> list[tuple[np.ndarray, int]]:
    """Class-balanced draw: round-robin over non-empty queues, uniform within a queue."""
    classes = [c for c, q in sorted(bank.queues.items()) if q]
    if not classes or max_crops <= 0:
        return []
    order = [classes[k] for k in rng.permutation(len(classes))]
    out = []
    for k in range(max_crops):
        q = bank.queues[order[k % len(order)]]
        entry = q[int(rng.integers(len(q)))]
        out.append((entry.patch, entry.class_id))
    return out
