"""Mean Teacher training: burn-in, EMA, pseudo-labelling and the combined objective.

One call to :func:`train_step` performs a full mutual-learning iteration:

1. weak view of the target batch -> teacher -> vanilla pseudo-labels;
2. (APR) FGSM on the teacher, detections on the attacked view, adversarial
   pseudo-labels;
3. strong view of the weak view; pseudo-labels transferred through the
   recorded geometry and the cutout rule;
4. (RMO) robust minority crops harvested into the bank and pasted into
   cutout regions;
5. ``L = L_s + lambda_t * (L_t + L_t_adv) + lambda_dis * L_dis`` on the
   student, one SGD step, one EMA update of the teacher, and (APR/RMO) a
   confusion-matrix update from the source batch.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from aat import ops
from aat.aat_core import (
    ConfusionMatrix,
    CropBank,
    fgsm_attack,
    generate_adversarial_pseudo_labels,
    harvest_robust_minority_crops,
    sample_crops_for_oversampling,
    update_confusion_matrix,
)
from aat.detector import (
    Detection,
    GridDetector,
    RawOutputs,
    assign_targets,
    decode,
    detection_loss,
    nms,
)
from aat.optim import SGD
from aat.synthdata import (
    DetectionDataset,
    StrongAugConfig,
    augment_patch,
    paste_crops,
    strong_augment,
    transfer_labels,
    weak_augment,
)
from aat.tensor import NumericError, Tape, Tensor, no_record

log = logging.getLogger(__name__)

MODES = ("source-only", "mt-baseline", "aat", "oracle")


class TrainingDiverged(FloatingPointError):
    """A loss term became non-finite; the message names the term."""


@dataclass
class TrainConfig:
    num_classes: int = 4
    image_size: int = 64
    channels: tuple[int, ...] = (16, 32, 32, 32)
    burn_in_steps: int = 4000
    adapt_steps: int = 3000
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_source: int = 8
    batch_target: int = 8
    ema_alpha: float = 0.9996
    threshold: float = 0.8
    nms_iou: float = 0.5
    lambda_t: float = 1.0
    lambda_dis: float = 0.1
    lambda_grl: float = 0.1
    beta: float = 1 / 255
    cm_momentum: float = 0.99
    bank_capacity: int = 32
    max_paste: int = 2
    apr: bool = True
    rmo: bool = True
    augment_crops: bool = True
    strong_aug: StrongAugConfig = field(default_factory=StrongAugConfig)
    debug: bool = False

    def __post_init__(self):
        if isinstance(self.strong_aug, dict):
            self.strong_aug = StrongAugConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in self.strong_aug.items()})
        self.channels = tuple(self.channels)
        if not 0 < self.ema_alpha < 1:
            raise ValueError("EMA factor must lie in (0, 1)")
        if not 0 < self.threshold <= 1:
            raise ValueError("pseudo-label threshold must lie in (0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PseudoLabelSet:
    detections: list[Detection]
    provenance: str = "vanilla"  # vanilla | adversarial-pass | adversarial-final
    image_id: int = -1

    def __len__(self) -> int:
        return len(self.detections)


class DomainDiscriminator:
    """Per-cell 1x1 projection, ReLU, spatial mean, then a linear domain logit.

    Features pass through gradient reversal before the first layer, so the
    backbone is pushed to confuse the discriminator while the discriminator's
    own weights receive ordinary gradients.
    """

    def __init__(self, in_channels: int, hidden: int = 16, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.params = {
            "disc.fc1.w": Tensor(rng.normal(0, np.sqrt(2 / in_channels), (in_channels, hidden)).astype(dtype), True, "disc.fc1.w"),
            "disc.fc1.b": Tensor(np.zeros(hidden, dtype=dtype), True, "disc.fc1.b"),
            "disc.fc2.w": Tensor(rng.normal(0, np.sqrt(1 / hidden), (hidden, 1)).astype(dtype), True, "disc.fc2.w"),
            "disc.fc2.b": Tensor(np.zeros(1, dtype=dtype), True, "disc.fc2.b"),
        }

    def __call__(self, features: Tensor, lambda_grl: float) -> Tensor:
        p = self.params
        h = ops.grad_reverse(features, lambda_grl)
        h = ops.relu(ops.linear(h, p["disc.fc1.w"], p["disc.fc1.b"]))
        h = ops.mean(h, axis=(1, 2))
        return ops.reshape(ops.linear(h, p["disc.fc2.w"], p["disc.fc2.b"]), (-1,))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}


def discriminator_loss(disc: DomainDiscriminator, source_features: Tensor, target_features: Tensor, lambda_grl: float) -> Tensor:
    """Binary cross-entropy with source labelled 0 and target labelled 1."""
    feats = ops.concat([source_features, target_features], axis=0)
    labels = np.concatenate([np.zeros(source_features.shape[0]), np.ones(target_features.shape[0])])
    return ops.binary_cross_entropy(disc(feats, lambda_grl), labels)


@dataclass
class LossReport:
    iteration: int
    l_s: float = 0.0
    l_t: float = 0.0
    l_t_adv: float = 0.0
    l_dis: float = 0.0
    total: float = 0.0
    pseudo_labels: int = 0
    minority_pseudo_labels: int = 0
    adversarial_labels: int = 0
    bank_fill: int = 0
    pasted: int = 0

    def recomposed(self, lambda_t: float, lambda_dis: float) -> float:
        return self.l_s + lambda_t * (self.l_t + self.l_t_adv) + lambda_dis * self.l_dis


@dataclass
class TrainState:
    student: GridDetector
    teacher: GridDetector
    discriminator: DomainDiscriminator
    optimizer: SGD
    config: TrainConfig
    confusion: ConfusionMatrix
    bank: CropBank
    rng: np.random.Generator
    iteration: int = 0

    def trainable(self) -> dict[str, Tensor]:
        out = {f"student/{k}": p for k, p in self.student.params.items()}
        out.update({f"disc/{k}": p for k, p in self.discriminator.params.items()})
        return out


def new_state(config: TrainConfig, seed: int = 0, dtype=np.float32) -> TrainState:
    student = GridDetector(config.num_classes, config.image_size, config.channels, seed=seed, dtype=dtype)
    return TrainState(
        student=student,
        teacher=student.copy(trainable=False),
        discriminator=DomainDiscriminator(config.channels[-1], seed=seed + 1, dtype=dtype),
        optimizer=SGD(config.lr, config.momentum, config.weight_decay),
        config=config,
        confusion=ConfusionMatrix(config.num_classes, config.cm_momentum),
        bank=CropBank(config.bank_capacity),
        rng=np.random.default_rng(seed + 2),
    )


def ema_update(state: TrainState, alpha: float | None = None) -> TrainState:
    """``teacher <- alpha * teacher + (1 - alpha) * student``, outside any tape."""
    a = state.config.ema_alpha if alpha is None else alpha
    with no_record():
        for name, t in state.teacher.params.items():
            s = state.student.params[name]
            t.data = (a * t.data + (1 - a) * s.data).astype(t.dtype, copy=False)
    return state


def sync_teacher(state: TrainState) -> None:
    state.teacher = state.student.copy(trainable=False)


def teacher_outputs(teacher: GridDetector, images: np.ndarray) -> RawOutputs:
    with no_record():
        return teacher(Tensor(images.astype(teacher.params["head.cls.b"].dtype)))


def _filter(outputs: RawOutputs, threshold: float, nms_iou: float) -> list[list[Detection]]:
    return [nms(d, nms_iou) for d in decode(outputs, threshold)]


def generate_vanilla_pseudo_labels(
    teacher: GridDetector,
    images: np.ndarray,
    threshold: float = 0.8,
    nms_iou: float = 0.5,
    image_ids: Sequence[int] | None = None,
) -> list[PseudoLabelSet]:
    """Teacher prediction, decoding at ``threshold`` and NMS for a batch of images."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    dets = _filter(teacher_outputs(teacher, images), threshold, nms_iou)
    ids = list(image_ids) if image_ids is not None else [-1] * len(dets)
    return [PseudoLabelSet(d, "vanilla", i) for d, i in zip(dets, ids)]


def split_outputs(outputs: RawOutputs, index) -> RawOutputs:
    return RawOutputs(
        ops.take(outputs.logits, index),
        ops.take(outputs.deltas, index),
        ops.take(outputs.features, index),
        outputs.image_size,
        outputs.stride,
    )


def _assign(labels: Sequence[Sequence[Detection]], model: GridDetector):
    return [assign_targets(l, model.num_classes, model.image_size, model.stride) for l in labels]


def target_loss(student_outputs: RawOutputs, pseudo_labels: Sequence[Sequence[Detection]], num_classes: int) -> tuple[Tensor, dict]:
    """Classification-only detection loss against pseudo-labels (no regression term)."""
    g = student_outputs.logits.shape[1]
    assignments = [assign_targets(l, num_classes, student_outputs.image_size, student_outputs.stride) for l in pseudo_labels]
    assert all(a.classes.shape == (g, g) for a in assignments)
    return detection_loss(student_outputs, assignments, include_regression=False)


def source_step_loss(model: GridDetector, images: np.ndarray, labels: Sequence[Sequence[Detection]]) -> tuple[Tensor, dict, RawOutputs]:
    out = model(Tensor(images.astype(model.params["head.cls.b"].dtype)))
    loss, rep = detection_loss(out, _assign(labels, model), include_regression=True)
    return loss, rep, out


def _weak_batch(images: np.ndarray, labels, rng: np.random.Generator):
    xs, ys = [], []
    for img, labs in zip(images, labels):
        x, y, _ = weak_augment(img, labs, rng)
        xs.append(x)
        ys.append(y)
    return np.stack(xs), ys


def _check(name: str, value: float) -> None:
    if not np.isfinite(value):
        raise TrainingDiverged(f"loss term {name} is not finite ({value})")


def _apply(state: TrainState, tape: Tape, loss: Tensor) -> None:
    params = state.trainable()
    grads = tape.backward(loss)
    state.optimizer.step(params, {k: grads[p] for k, p in params.items() if p in grads})


def supervised_step(state: TrainState, images: np.ndarray, labels: Sequence[Sequence[Detection]]) -> LossReport:
    """One SGD step on labelled data only (burn-in, source-only and oracle runs)."""
    x, y = _weak_batch(images, labels, state.rng)
    try:
        with Tape() as tape:
            loss, rep, _ = source_step_loss(state.student, x, y)
    except NumericError as exc:
        raise TrainingDiverged(f"loss term L_s could not be computed: {exc}") from exc
    _check("L_s", rep["total"])
    _apply(state, tape, loss)
    state.iteration += 1
    return LossReport(state.iteration, l_s=rep["total"], total=rep["total"])


def burn_in(source: DetectionDataset, steps: int, config: TrainConfig, seed: int = 0, dtype=np.float32) -> TrainState:
    """Train a fresh student on labelled source data, then copy it into the teacher."""
    state = new_state(config, seed, dtype)
    batch_rng = np.random.default_rng([seed, 7])
    for _ in range(steps):
        idx = batch_rng.choice(len(source), config.batch_source, replace=False)
        supervised_step(state, source.batch(idx), [source.labels[k] for k in idx])
    sync_teacher(state)
    state.optimizer = SGD(config.lr, config.momentum, config.weight_decay)
    return state


def train_step(
    state: TrainState,
    source_batch: tuple[np.ndarray, Sequence[Sequence[Detection]]],
    target_batch: tuple[np.ndarray, Sequence[int]],
    mode: str = "aat",
) -> LossReport:
    """One mutual-learning iteration; ``mode`` is ``"mt-baseline"`` or ``"aat"``.

    In ``aat`` mode the APR and RMO components follow ``state.config.apr``
    and ``state.config.rmo``. ``target_batch`` carries raw target images and
    their ids; target labels are never used here.
    """
    if mode not in ("mt-baseline", "aat"):
        raise ValueError(f"train_step handles mt-baseline and aat, not {mode!r}")
    cfg = state.config
    rng = state.rng
    apr = mode == "aat" and cfg.apr
    rmo = mode == "aat" and cfg.rmo
    teacher, student = state.teacher, state.student

    xs, ys = _weak_batch(*source_batch, rng)
    t_images, t_ids = target_batch
    xw, _ = _weak_batch(t_images, [[] for _ in t_images], rng)

    vanilla = _filter(teacher_outputs(teacher, xw), cfg.threshold, cfg.nms_iou)
    matrix = state.confusion.matrix
    adversarial = None
    if apr:
        adv = fgsm_attack(teacher, xw, vanilla, cfg.beta)
        adv_pass = _filter(teacher_outputs(teacher, adv.image), cfg.threshold, cfg.nms_iou)
        adversarial = [generate_adversarial_pseudo_labels(v, a, matrix) for v, a in zip(vanilla, adv_pass)]

    strong, t_labels, t_adv_labels, pasted = [], [], [], 0
    for k, img in enumerate(xw):
        x_s, _, record = strong_augment(img, [], rng, cfg.strong_aug)
        labs = transfer_labels(vanilla[k], record, cfg.image_size, cfg.strong_aug.erased_fraction)
        adv_labs = transfer_labels(adversarial[k], record, cfg.image_size, cfg.strong_aug.erased_fraction) if apr else []
        if rmo:
            harvest_robust_minority_crops(
                img, vanilla[k], adversarial[k] if apr else None, matrix, state.bank, int(t_ids[k]), state.iteration
            )
            crops = sample_crops_for_oversampling(state.bank, rng, cfg.max_paste)
            if cfg.augment_crops:
                crops = [(augment_patch(p, rng), c) for p, c in crops]
            before = len(labs)
            x_s, labs = paste_crops(x_s, labs, crops, record, rng)
            new = labs[before:]
            pasted += len(new)
            adv_labs = adv_labs + new
        strong.append(x_s)
        t_labels.append(labs)
        t_adv_labels.append(adv_labs)

    ns = len(xs)
    dtype = student.params["head.cls.b"].dtype
    batch = np.concatenate([xs, np.stack(strong)]).astype(dtype)
    lt, ld = cfg.lambda_t, cfg.lambda_dis
    term = "student forward"
    try:
        with Tape() as tape:
            out = student(Tensor(batch))
            src = split_outputs(out, slice(0, ns))
            tgt = split_outputs(out, slice(ns, None))
            src_assign = _assign(ys, student)
            term = "L_s"
            l_s, rep_s = detection_loss(src, src_assign, include_regression=True)
            term = "L_t"
            l_t, rep_t = target_loss(tgt, t_labels, cfg.num_classes)
            terms = [l_s, ops.scale(l_t, lt)]
            rep_adv = {"total": 0.0}
            if apr:
                term = "L_t_adv"
                l_adv, rep_adv = target_loss(tgt, t_adv_labels, cfg.num_classes)
                terms.append(ops.scale(l_adv, lt))
            term = "L_dis"
            l_dis = discriminator_loss(state.discriminator, src.features, tgt.features, cfg.lambda_grl)
            terms.append(ops.scale(l_dis, ld))
            term = "total"
            total = terms[0]
            for t in terms[1:]:
                total = ops.add(total, t)
    except NumericError as exc:
        raise TrainingDiverged(f"loss term {term} could not be computed: {exc}") from exc
    report = LossReport(
        iteration=state.iteration + 1,
        l_s=rep_s["total"],
        l_t=rep_t["total"],
        l_t_adv=rep_adv["total"],
        l_dis=float(l_dis.data),
        total=float(total.data),
        pseudo_labels=sum(len(v) for v in vanilla),
        minority_pseudo_labels=sum(1 for v in vanilla for d in v if d.class_id in state.confusion.minority_classes()),
        adversarial_labels=sum(len(a) for a in adversarial) if apr else 0,
        pasted=pasted,
    )
    for name in ("l_s", "l_t", "l_t_adv", "l_dis", "total"):
        _check(name, getattr(report, name))
    if cfg.debug:
        assert abs(report.total - report.recomposed(lt, ld)) < 1e-4 * max(1.0, abs(report.total))
    _apply(state, tape, total)
    ema_update(state)
    if apr or rmo:
        update_confusion_matrix(state.confusion, src_assign, src.logits.data)
    state.iteration += 1
    report.bank_fill = len(state.bank)
    return report


def report_fields() -> list[str]:
    return [f.name for f in fields(LossReport)]
