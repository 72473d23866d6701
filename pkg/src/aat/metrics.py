"""Detection evaluation: greedy matching, all-point AP and pseudo-label quality."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from aat.detector import Detection, iou_matrix


def _sort_detections(dets: Sequence[Detection]) -> list[Detection]:
    return sorted(dets, key=lambda d: (-d.score, d.box))


def match_detections(
    detections: Sequence[Detection],
    ground_truth: Sequence[Detection],
    iou_threshold: float = 0.5,
) -> tuple[list[bool], int]:
    """Greedy one-to-one matching within one image.

    ``detections`` are processed in the given order (callers sort by score).
    Each takes the highest-IoU still-unmatched ground truth of its class with
    IoU ``>= iou_threshold``. Returns a TP flag per detection and the number
    of unmatched ground-truth objects.
    """
    used = [False] * len(ground_truth)
    flags = []
    if detections and ground_truth:
        ious = iou_matrix(np.array([d.box for d in detections]), np.array([g.box for g in ground_truth]))
    for k, d in enumerate(detections):
        best, best_iou = -1, -1.0
        for j, g in enumerate(ground_truth):
            if used[j] or g.class_id != d.class_id:
                continue
            ov = ious[k, j]
            if ov >= iou_threshold and ov > best_iou:
                best, best_iou = j, ov
        if best >= 0:
            used[best] = True
        flags.append(best >= 0)
    return flags, used.count(False)


def average_precision(tp: Sequence[bool], scores: Sequence[float] | None, num_gt: int) -> float | None:
    """All-point interpolated AP: area under the precision envelope over recall.

    ``tp`` is reordered by descending ``scores`` when scores are given (stable,
    so equal scores keep their input order). Returns ``None`` when there is no
    ground truth and no detection, and 0.0 when there is no ground truth but
    some detection.
    """
    tp = np.asarray(tp, dtype=bool)
    if scores is not None and len(tp):
        tp = tp[np.argsort(-np.asarray(scores, dtype=float), kind="stable")]
    if num_gt == 0:
        return None if len(tp) == 0 else 0.0
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / num_gt
    precision = ctp / (ctp + cfp)
    r = np.concatenate([[0.0], recall])
    p = np.concatenate([[0.0], precision])
    for k in range(len(p) - 2, -1, -1):
        p[k] = max(p[k], p[k + 1])
    steps = np.nonzero(r[1:] != r[:-1])[0] + 1
    return float(np.sum((r[steps] - r[steps - 1]) * p[steps]))


@dataclass
class EvalReport:
    per_class_ap: dict[int, float | None]
    mean_ap: float
    counts: dict[int, dict[str, int]]
    minority_classes: list[int] = field(default_factory=list)
    minority_ap: float | None = None
    class_names: list[str] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        d = asdict(self)
        d["per_class_ap"] = {str(k): v for k, v in self.per_class_ap.items()}
        d["counts"] = {str(k): v for k, v in self.counts.items()}
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)

    def table(self) -> str:
        lines = [f"{'class':>10} {'AP50':>7} {'TP':>5} {'FP':>5} {'FN':>5}"]
        for c, ap in sorted(self.per_class_ap.items()):
            name = self.class_names[c] if c < len(self.class_names) else str(c)
            cnt = self.counts[c]
            ap_s = "   n/a" if ap is None else f"{100 * ap:6.1f}"
            lines.append(f"{name:>10} {ap_s:>7} {cnt['tp']:>5} {cnt['fp']:>5} {cnt['fn']:>5}")
        lines.append(f"{'mAP':>10} {100 * self.mean_ap:6.1f}")
        if self.minority_ap is not None:
            lines.append(f"{'minority':>10} {100 * self.minority_ap:6.1f}")
        return "\n".join(lines)


def evaluate_detections(
    detections: Sequence[Sequence[Detection]],
    ground_truth: Sequence[Sequence[Detection]],
    num_classes: int,
    iou_threshold: float = 0.5,
    minority_classes: Sequence[int] = (),
    class_names: Sequence[str] = (),
) -> EvalReport:
    """Per-class AP at ``iou_threshold`` over a dataset, and their mean.

    The mean runs over classes that occur in the ground truth.
    """
    if len(detections) != len(ground_truth):
        raise ValueError("need one detection list per ground-truth image")
    scores = {c: [] for c in range(num_classes)}
    flags = {c: [] for c in range(num_classes)}
    n_gt = np.zeros(num_classes, dtype=int)
    for dets, gts in zip(detections, ground_truth):
        for g in gts:
            n_gt[g.class_id] += 1
        ordered = _sort_detections(dets)
        tp, _ = match_detections(ordered, gts, iou_threshold)
        for d, t in zip(ordered, tp):
            scores[d.class_id].append(d.score)
            flags[d.class_id].append(t)
    per_class, counts = {}, {}
    for c in range(num_classes):
        per_class[c] = average_precision(flags[c], scores[c], int(n_gt[c]))
        tp = int(np.sum(flags[c]))
        counts[c] = {"tp": tp, "fp": len(flags[c]) - tp, "fn": int(n_gt[c]) - tp, "gt": int(n_gt[c])}
    present = [c for c in range(num_classes) if n_gt[c] > 0]
    mean_ap = float(np.mean([per_class[c] for c in present])) if present else 0.0
    minority = [c for c in minority_classes if n_gt[c] > 0]
    minority_ap = float(np.mean([per_class[c] for c in minority])) if minority else None
    return EvalReport(per_class, mean_ap, counts, list(minority_classes), minority_ap, list(class_names))


def pseudo_label_quality(
    pseudo_labels: Sequence[Sequence[Detection]],
    ground_truth: Sequence[Sequence[Detection]],
    num_classes: int,
    iou_threshold: float = 0.5,
) -> dict[int, dict[str, float | None]]:
    """Per-class precision and recall of pseudo-labels against ground truth.

    Precision is ``None`` for a class with no pseudo-label, recall is
    ``None`` for a class with no ground truth.
    """
    tp = np.zeros(num_classes, dtype=int)
    n_pl = np.zeros(num_classes, dtype=int)
    n_gt = np.zeros(num_classes, dtype=int)
    for pls, gts in zip(pseudo_labels, ground_truth):
        ordered = _sort_detections(pls)
        flags, _ = match_detections(ordered, gts, iou_threshold)
        for d, f in zip(ordered, flags):
            n_pl[d.class_id] += 1
            tp[d.class_id] += int(f)
        for g in gts:
            n_gt[g.class_id] += 1
    out = {}
    for c in range(num_classes):
        out[c] = {
            "precision": float(tp[c] / n_pl[c]) if n_pl[c] else None,
            "recall": float(tp[c] / n_gt[c]) if n_gt[c] else None,
            "tp": int(tp[c]),
            "pseudo_labels": int(n_pl[c]),
            "ground_truth": int(n_gt[c]),
        }
    return out
