"""Running and evaluating the four training modes on the synthetic benchmark."""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from aat.detector import GridDetector, decode, nms
from aat.metrics import EvalReport, evaluate_detections
from aat.synthdata import DetectionDataset, DomainConfig, SceneSpec, TARGET, SOURCE, make_split
from aat.teacher_student import (
    MODES,
    LossReport,
    TrainConfig,
    TrainState,
    burn_in,
    report_fields,
    supervised_step,
    sync_teacher,
    teacher_outputs,
    train_step,
)

log = logging.getLogger(__name__)


@dataclass
class Benchmark:
    source_train: DetectionDataset
    target_train: DetectionDataset
    target_test: DetectionDataset
    spec: SceneSpec

    @property
    def minority_classes(self) -> list[int]:
        return self.spec.minority_classes()


def make_benchmark(
    spec: SceneSpec,
    sizes: tuple[int, int, int] = (2000, 2000, 2000),
    seed: int = 0,
    source: DomainConfig = SOURCE,
    target: DomainConfig = TARGET,
) -> Benchmark:
    return Benchmark(
        make_split(spec, source, sizes[0], seed, "source_train"),
        make_split(spec, target, sizes[1], seed, "target_train"),
        make_split(spec, target, sizes[2], seed, "target_test"),
        spec,
    )


def detect(model: GridDetector, images: np.ndarray, score_threshold: float = 0.05, nms_iou: float = 0.5, chunk: int = 100):
    """Evaluation-time detections for a uint8 or float image array."""
    out = []
    for k in range(0, len(images), chunk):
        x = images[k : k + chunk]
        x = x.astype(np.float32) / 255.0 if x.dtype == np.uint8 else x
        raw = teacher_outputs(model, x)
        out.extend(nms(d, nms_iou) for d in decode(raw, score_threshold, foreground_argmax=False))
    return out


def evaluate_model(model: GridDetector, dataset: DetectionDataset, minority_classes: Sequence[int] = ()) -> EvalReport:
    if len(dataset) == 0:
        raise ValueError(f"split {dataset.name!r} is empty")
    dets = detect(model, dataset.images)
    return evaluate_detections(dets, dataset.labels, model.num_classes, 0.5, minority_classes, dataset.classes)


def experiment_id(config: dict, seed: int) -> str:
    blob = json.dumps({"config": config, "seed": seed}, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class RunResult:
    mode: str
    seed: int
    report: EvalReport
    curve: list[tuple[int, float]] = field(default_factory=list)
    history: list[LossReport] = field(default_factory=list)
    state: TrainState | None = None
    seconds: float = 0.0
    tag: str = ""


def _batches(rng: np.random.Generator, n: int, size: int) -> np.ndarray:
    return rng.choice(n, size, replace=False)


def eval_model_for(state: TrainState, mode: str) -> GridDetector:
    return state.student if mode in ("source-only", "oracle") else state.teacher


def run_mode(
    bench: Benchmark,
    config: TrainConfig,
    mode: str,
    seed: int,
    burned: TrainState | None = None,
    eval_every: int = 0,
    log_path: str | Path | None = None,
    run_id: str = "",
    progress: Callable[[str], None] | None = None,
    callback: Callable[[int, TrainState], None] | None = None,
) -> RunResult:
    """Train from a burned-in state for ``config.adapt_steps`` steps in ``mode``.

    ``burned`` is deep-copied, so one burn-in can seed several modes.
    ``callback(step, state)`` runs after every step (checkpointing hooks).
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    t0 = time.perf_counter()
    state = copy.deepcopy(burned) if burned is not None else burn_in(bench.source_train, config.burn_in_steps, config, seed)
    state.config = config
    batch_rng = np.random.default_rng([seed, 11])
    curve, history = [], []
    writer, fh = None, None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["experiment_id", "mode"] + report_fields() + ["map"])
    minority = bench.minority_classes
    supervised = mode in ("source-only", "oracle")

    def maybe_eval(step: int, rep: LossReport | None):
        m = ""
        if eval_every and (step % eval_every == 0 or step == config.adapt_steps):
            r = evaluate_model(eval_model_for(state, mode), bench.target_test, minority)
            curve.append((step, r.mean_ap))
            m = repr(r.mean_ap)
            if progress:
                progress(f"[{mode} seed={seed}] step {step}: target mAP {100 * r.mean_ap:.1f}")
        if writer is None:
            return
        if rep is not None:
            row = [getattr(rep, f) if f in ("iteration", "l_s", "total") or not supervised else "" for f in report_fields()]
            writer.writerow([run_id, mode] + row + [m])
        elif m:
            # evaluation of the starting point, before any adaptation step
            row = [state.iteration if f == "iteration" else "" for f in report_fields()]
            writer.writerow([run_id, mode] + row + [m])

    maybe_eval(0, None)
    try:
        for step in range(1, config.adapt_steps + 1):
            if mode == "source-only":
                idx = _batches(batch_rng, len(bench.source_train), config.batch_source)
                rep = supervised_step(state, bench.source_train.batch(idx), [bench.source_train.labels[k] for k in idx])
            elif mode == "oracle":
                idx = _batches(batch_rng, len(bench.target_train), config.batch_target)
                rep = supervised_step(state, bench.target_train.batch(idx), [bench.target_train.labels[k] for k in idx])
            else:
                si = _batches(batch_rng, len(bench.source_train), config.batch_source)
                ti = _batches(batch_rng, len(bench.target_train), config.batch_target)
                rep = train_step(
                    state,
                    (bench.source_train.batch(si), [bench.source_train.labels[k] for k in si]),
                    (bench.target_train.batch(ti), ti),
                    mode,
                )
            history.append(rep)
            maybe_eval(step, rep)
            if callback is not None:
                callback(step, state)
    finally:
        if fh is not None:
            fh.close()
    if mode in ("source-only", "oracle"):
        sync_teacher(state)
    final = evaluate_model(eval_model_for(state, mode), bench.target_test, minority)
    final.metadata = {"experiment_id": run_id, "mode": mode, "seed": seed}
    return RunResult(mode, seed, final, curve, history, state, time.perf_counter() - t0)
