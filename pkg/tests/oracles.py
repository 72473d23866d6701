"""Reference implementations written independently of the package.

They favour obviousness over speed: exact rational arithmetic, exhaustive
search, plain lists. Tests compare the package against them.
"""

from __future__ import annotations

from fractions import Fraction

import numpy as np


def rational_iou(a, b) -> Fraction:
    ax1, ay1, ax2, ay2 = (Fraction(v) for v in a)
    bx1, by1, bx2, by2 = (Fraction(v) for v in b)
    iw = max(Fraction(0), min(ax2, bx2) - max(ax1, bx1))
    ih = max(Fraction(0), min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union if union > 0 else Fraction(0)


def adversarial_labels_reference(vanilla, attacked, matrix, threshold=Fraction(1, 2)):
    """Line-by-line transcription of the label-regularisation pseudocode.

    ``vanilla`` and ``attacked`` are lists of ``(box, class, score)``.
    The best match maximises IoU, then score, then prefers the smaller box tuple.
    """
    diag_mean = sum(matrix[k][k] for k in range(len(matrix))) / len(matrix)
    out = []
    for box, cls, score in attacked:
        best_j = None
        for j in range(len(vanilla)):
            if best_j is None:
                best_j = j
                continue
            cand, cur = vanilla[j], vanilla[best_j]
            ci, bi = rational_iou(box, cand[0]), rational_iou(box, cur[0])
            if ci > bi or (ci == bi and (cand[2] > cur[2] or (cand[2] == cur[2] and tuple(cand[0]) < tuple(cur[0])))):
                best_j = j
        if best_j is not None and rational_iou(box, vanilla[best_j][0]) > threshold:
            cj = vanilla[best_j][1]
            if matrix[cls][cj] >= matrix[cj][cls]:
                out.append((box, cls, score))
        elif matrix[cls][cls] < diag_mean:
            out.append((box, cls, score))
    return out


class ReferenceBank:
    """Per-class FIFO as plain lists."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.items: dict[int, list] = {}

    def push(self, cls: int, item) -> None:
        q = self.items.setdefault(cls, [])
        q.append(item)
        if len(q) > self.capacity:
            q.pop(0)

    def retain(self, classes) -> None:
        self.items = {c: q for c, q in self.items.items() if c in set(classes)}


def match_reference(detections, ground_truth, threshold=Fraction(1, 2)):
    """Greedy one-to-one matching by exhaustive search.

    Both arguments are lists of ``(box, class)``; detections are already in
    rank order. Each detection claims the unclaimed same-class ground truth
    of largest IoU (first index on ties) provided that IoU is at least
    ``threshold``.
    """
    claimed = [False] * len(ground_truth)
    flags = []
    for box, cls in detections:
        pick = None
        for g, (gbox, gcls) in enumerate(ground_truth):
            if claimed[g] or gcls != cls:
                continue
            v = rational_iou(box, gbox)
            if v >= threshold and (pick is None or v > pick[1]):
                pick = (g, v)
        if pick is not None:
            claimed[pick[0]] = True
        flags.append(pick is not None)
    return flags


def ap_reference(flags, num_gt):
    """All-point AP from rank-ordered TP flags: sum over recall steps of the best later precision."""
    if num_gt == 0:
        return None
    precisions, recalls, hits = [], [], 0
    for n, t in enumerate(flags, start=1):
        hits += bool(t)
        precisions.append(Fraction(hits, n))
        recalls.append(Fraction(hits, num_gt))
    ap, prev = Fraction(0), Fraction(0)
    for n in range(len(flags)):
        if recalls[n] > prev:
            ap += (recalls[n] - prev) * max(precisions[n:])
            prev = recalls[n]
    return ap


def ema_closed_form(theta0: np.ndarray, theta_s: np.ndarray, alpha: float, n: int) -> np.ndarray:
    return alpha**n * theta0 + (1 - alpha**n) * theta_s


def random_label_instance(rng: np.random.Generator, max_boxes: int = 10, max_classes: int = 5):
    """Vanilla and attacked label lists plus a row-stochastic matrix.

    Boxes have integer corners so IoU values are exact. Attacked boxes are
    mostly jittered copies of vanilla ones, so matches above and below the
    0.5 IoU line both occur, and scores come from a small set to force ties.
    """
    k = int(rng.integers(1, max_classes + 1))
    matrix = rng.dirichlet(np.full(k, 0.7), size=k)

    def box():
        x, y = rng.integers(0, 50, 2)
        w, h = rng.integers(2, 14, 2)
        return (int(x), int(y), int(x + w), int(y + h))

    def score():
        return float(rng.choice([0.8, 0.85, 0.9, 0.95]))

    vanilla = [(box(), int(rng.integers(k)), score()) for _ in range(int(rng.integers(0, max_boxes + 1)))]
    attacked = []
    for _ in range(int(rng.integers(0, max_boxes + 1))):
        if vanilla and rng.random() < 0.7:
            b = vanilla[int(rng.integers(len(vanilla)))][0]
            d = rng.integers(-3, 4, 4)
            x1, y1 = b[0] + int(d[0]), b[1] + int(d[1])
            x2, y2 = max(b[2] + int(d[2]), x1 + 1), max(b[3] + int(d[3]), y1 + 1)
            attacked.append(((x1, y1, x2, y2), int(rng.integers(k)), score()))
        else:
            attacked.append((box(), int(rng.integers(k)), score()))
    return vanilla, attacked, matrix
