"""Command-line entry point: ``aat {gen-data,train,eval,attack-demo,report}``.

Every command exits 0 on success. Failures print one JSON object
``{"error": ..., "message": ..., "command": ...}`` on stderr and exit
nonzero (2 for configuration problems, 1 otherwise).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import sys
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from aat.aat_core import fgsm_attack, generate_adversarial_pseudo_labels, is_minority, label_dispositions
from aat.checkpoint import CheckpointFormatError, load_checkpoint, save_checkpoint
from aat.config import ConfigError, ExperimentConfig, load_config
from aat.detector import GridDetector, detections_to_json
from aat.experiment import Benchmark, evaluate_model, experiment_id, run_mode
from aat.synthdata import load_split, make_split, save_split, spec_to_dict
from aat.teacher_student import MODES, TrainConfig, TrainState, burn_in, generate_vanilla_pseudo_labels, new_state, sync_teacher

log = logging.getLogger("aat")

SPLITS = ("source_train", "target_train", "target_test")


# -- helpers ---------------------------------------------------------------------------


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.output_dir = args.out
    return cfg


def _say(args, msg: str) -> None:
    if not getattr(args, "quiet", False):
        print(msg, file=sys.stderr, flush=True)


def _data_dir(args, cfg: ExperimentConfig) -> Path:
    return Path(args.data) if getattr(args, "data", None) else Path(cfg.output_dir) / "data"


def _load_benchmark(directory: Path, cfg: ExperimentConfig) -> Benchmark:
    splits = {}
    for name in SPLITS:
        path = directory / f"{name}.json"
        if not path.exists():
            raise ConfigError(f"dataset split {path} not found; run `aat gen-data` first or pass --data")
        splits[name] = load_split(path)
    return Benchmark(splits["source_train"], splits["target_train"], splits["target_test"], cfg.data.scene)


def _resolve_split(arg: str, data_dir: Path) -> Path:
    p = Path(arg)
    if p.suffix == ".json":
        return p
    return data_dir / f"{arg}.json"


def _model_from_checkpoint(path: str, which: str) -> tuple[GridDetector, dict, dict]:
    ckpt = load_checkpoint(path)
    meta = ckpt.metadata
    try:
        model = GridDetector(meta["num_classes"], meta["image_size"], tuple(meta["channels"]))
    except KeyError as exc:
        raise CheckpointFormatError(f"metadata lacks {exc.args[0]!r}") from None
    prefix = f"{which}/"
    state = {k[len(prefix) :]: v for k, v in ckpt.params.items() if k.startswith(prefix)}
    missing = sorted(set(model.params) - set(state))
    if missing:
        raise CheckpointFormatError(f"entry {prefix + missing[0]!r} missing from checkpoint")
    model.load_state_dict(state)
    model.set_trainable(False)
    return model, meta, ckpt.params


def _state_arrays(state: TrainState) -> tuple[dict, dict]:
    params = {f"student/{k}": v for k, v in state.student.state_dict().items()}
    params.update({f"teacher/{k}": v for k, v in state.teacher.state_dict().items()})
    params.update({f"disc/{k}": v for k, v in state.discriminator.state_dict().items()})
    params["state/confusion"] = state.confusion.matrix.astype(np.float64)
    return params, dict(state.optimizer.velocity)


def _save_state(path: Path, state: TrainState, meta: dict) -> None:
    params, momentum = _state_arrays(state)
    m = dict(meta)
    m.update(
        iteration=state.iteration,
        num_classes=state.config.num_classes,
        image_size=state.config.image_size,
        channels=list(state.config.channels),
    )
    save_checkpoint(path, params, momentum, m)


def _parse_beta(text: str) -> float:
    try:
        return float(Fraction(text.strip()))
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"--beta-grid: cannot parse {text!r} (use decimals or fractions like 4/255)") from exc


# -- burn-in (cached per output directory) ------------------------------------------------


def _burn_in_id(cfg: ExperimentConfig) -> str:
    t = cfg.train
    keys = ("num_classes", "image_size", "channels", "burn_in_steps", "lr", "momentum", "weight_decay", "batch_source")
    body = {"data": cfg.to_dict()["data"], "train": {k: list(v) if isinstance(v, tuple) else v for k, v in ((k, getattr(t, k)) for k in keys)}}
    return experiment_id(body, cfg.seed)


def _burned_state(cfg: ExperimentConfig, bench: Benchmark, out: Path, args) -> TrainState:
    bid = _burn_in_id(cfg)
    path = out / f"burn-in-{bid}.ckpt"
    if path.exists():
        ckpt = load_checkpoint(path)
        state = new_state(cfg.train, cfg.seed)
        state.student.load_state_dict({k[len("student/") :]: v for k, v in ckpt.params.items() if k.startswith("student/")})
        sync_teacher(state)
        state.rng.bit_generator.state = ckpt.metadata["rng_state"]
        state.iteration = ckpt.metadata["iteration"]
        _say(args, f"reusing burn-in {path}")
        return state
    _say(args, f"burn-in: {cfg.train.burn_in_steps} steps on {len(bench.source_train)} source images")
    state = burn_in(bench.source_train, cfg.train.burn_in_steps, cfg.train, cfg.seed)
    _save_state(path, state, {"experiment_id": bid, "mode": "burn-in", "seed": cfg.seed, "rng_state": state.rng.bit_generator.state})
    return state


# -- commands ------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = _data_dir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    run_id = cfg.identity()
    plan = [
        ("source_train", cfg.data.source, cfg.data.sizes[0]),
        ("target_train", cfg.data.target, cfg.data.sizes[1]),
        ("target_test", cfg.data.target, cfg.data.sizes[2]),
    ]
    for name, domain, size in plan:
        ds = make_split(cfg.data.scene, domain, size, cfg.seed, name)
        extra = {
            "experiment_id": run_id,
            "seed": cfg.seed,
            "scene": spec_to_dict(cfg.data.scene),
            "domain": dataclasses.asdict(domain),
        }
        path = save_split(ds, out, extra)
        hist = ds.class_histogram()
        _say(args, f"{name}: {len(ds)} images, class counts {hist.tolist()} -> {path}")
    (out / "config.json").write_text(cfg.dumps())
    return 0


def _run_one(cfg: ExperimentConfig, bench: Benchmark, burned: TrainState, mode: str, name: str, out: Path, args) -> dict:
    train_cfg = cfg.train
    body = cfg.to_dict()
    body.pop("output_dir")
    run_id = experiment_id({**body, "mode": mode}, cfg.seed)
    meta = {"experiment_id": run_id, "mode": mode, "seed": cfg.seed, "run": name, "config": body}

    def on_step(step: int, state: TrainState) -> None:
        if cfg.checkpoint_every and step % cfg.checkpoint_every == 0 and step != train_cfg.adapt_steps:
            _save_state(out / f"{name}-step{step:06d}.ckpt", state, meta)

    result = run_mode(
        bench,
        train_cfg,
        mode,
        cfg.seed,
        burned,
        eval_every=cfg.eval_every,
        log_path=out / f"{name}.csv",
        run_id=run_id,
        progress=None if args.quiet else (lambda m: print(m, file=sys.stderr, flush=True)),
        callback=on_step,
    )
    _save_state(out / f"{name}.ckpt", result.state, meta)
    report = result.report
    report.metadata.update(run=name, checkpoint=str(out / f"{name}.ckpt"))
    (out / f"{name}.eval.json").write_text(report.dumps())
    summary = {
        "run": name,
        "experiment_id": run_id,
        "mode": mode,
        "seed": cfg.seed,
        "map": report.mean_ap,
        "minority_ap": report.minority_ap,
        "bank_fill": len(result.state.bank),
    }
    print(json.dumps(summary, sort_keys=True))
    return summary


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.no_apr:
        cfg.train.apr = False
    if args.no_rmo:
        cfg.train.rmo = False
    if args.adapt_steps is not None:
        cfg.train.adapt_steps = args.adapt_steps
    if args.burn_in_steps is not None:
        cfg.train.burn_in_steps = args.burn_in_steps
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    bench = _load_benchmark(_data_dir(args, cfg), cfg)
    burned = _burned_state(cfg, bench, out, args)

    if args.beta_grid:
        if args.mode != "aat":
            raise ConfigError("--beta-grid sweeps the aat mode; drop --mode or set it to aat")
        betas = sorted(_parse_beta(b) for b in args.beta_grid.split(",") if b.strip())
        for beta in betas:
            sub = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, beta=beta))
            _run_one(sub, bench, burned, "aat", f"aat-beta{beta:.5f}", out, args)
        return 0

    name = args.mode
    if args.mode == "aat":
        if not cfg.train.apr and not cfg.train.rmo:
            name = "aat-no-apr-no-rmo"
        elif not cfg.train.apr:
            name = "aat-rmo-only"
        elif not cfg.train.rmo:
            name = "aat-apr-only"
    if args.name:
        name = args.name
    _run_one(cfg, bench, burned, args.mode, name, out, args)
    return 0


def cmd_eval(args) -> int:
    which = "student" if args.student else "teacher"
    model, meta, _ = _model_from_checkpoint(args.checkpoint, which)
    split_path = _resolve_split(args.split, Path(args.data) if args.data else Path(args.checkpoint).parent / "data")
    if not split_path.exists():
        raise FileNotFoundError(f"split {split_path} not found")
    ds = load_split(split_path)
    minority = _dataset_minority(split_path)
    report = evaluate_model(model, ds, minority)
    report.metadata = {
        "experiment_id": meta.get("experiment_id", ""),
        "checkpoint": str(args.checkpoint),
        "split": ds.name,
        "model": which,
    }
    print(report.table())
    out = Path(args.out) if args.out else Path(args.checkpoint).with_suffix(f".{ds.name}.{which}.eval.json")
    out.write_text(report.dumps())
    _say(args, f"report -> {out}")
    return 0


def _dataset_minority(split_path: Path) -> list[int]:
    doc = json.loads(split_path.read_text())
    w = doc.get("scene", {}).get("class_weights")
    if not w:
        return []
    w = np.asarray(w, dtype=float)
    return [int(c) for c in np.nonzero(w < w.mean())[0]]


def cmd_attack_demo(args) -> int:
    model, meta, params = _model_from_checkpoint(args.checkpoint, "teacher")
    config = meta.get("config", {}).get("train", {})
    threshold = config.get("threshold", 0.8)
    nms_iou = config.get("nms_iou", 0.5)
    beta = _parse_beta(args.beta) if args.beta is not None else config.get("beta", TrainConfig().beta)
    matrix = params.get("state/confusion", np.eye(model.num_classes))
    split_path = _resolve_split(args.split, Path(args.data) if args.data else Path(args.checkpoint).parent / "data")
    if not split_path.exists():
        raise FileNotFoundError(f"split {split_path} not found")
    ds = load_split(split_path)
    n = min(args.images, len(ds))
    x = ds.images[:n].astype(np.float32) / 255.0
    minority = [c for c in range(model.num_classes) if is_minority(c, matrix)]

    records, totals = [], {k: 0 for k in ("retained", "corrected", "suppressed", "recovered")}
    recovered_by_class = {c: 0 for c in range(model.num_classes)}
    values: dict[float, int] = {}
    for start in range(0, n, 50):
        xb = x[start : start + 50]
        vanilla = [p.detections for p in generate_vanilla_pseudo_labels(model, xb, threshold, nms_iou)]
        adv = fgsm_attack(model, xb, vanilla, beta)
        u, c = np.unique(adv.raw_perturbation, return_counts=True)
        for val, cnt in zip(u.tolist(), c.tolist()):
            values[val] = values.get(val, 0) + cnt
        adv_pass = [p.detections for p in generate_vanilla_pseudo_labels(model, adv.image, threshold, nms_iou)]
        for k in range(len(xb)):
            final = generate_adversarial_pseudo_labels(vanilla[k], adv_pass[k], matrix)
            disp = label_dispositions(vanilla[k], adv_pass[k], final)
            for key, cnt in disp["counts"].items():
                totals[key] += cnt
            for rec in disp["recovered"]:
                recovered_by_class[rec["class"]] += 1
            records.append(
                {
                    "image_id": start + k,
                    "vanilla": disp["vanilla"],
                    "adversarial_pass": detections_to_json(adv_pass[k]),
                    "adversarial": detections_to_json(final),
                    "recovered": disp["recovered"],
                }
            )
    hist = {_support_label(v, beta): cnt for v, cnt in sorted(values.items())}
    doc = {
        "experiment_id": meta.get("experiment_id", ""),
        "checkpoint": str(args.checkpoint),
        "beta": beta,
        "images": records,
        "counts": totals,
        "minority_classes": minority,
        "recovered_by_class": {str(c): v for c, v in recovered_by_class.items()},
        "minority_recovered": sum(recovered_by_class[c] for c in minority),
        "perturbation_histogram": hist,
    }
    text = json.dumps(doc, indent=1, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text)
        _say(args, f"attack demo -> {args.out}")
    else:
        print(text)
    _say(args, f"dispositions {totals}; perturbation support {list(hist)}")
    return 0


def _support_label(value: float, beta: float) -> str:
    if value == 0:
        return "0"
    if math.isclose(abs(value), beta, rel_tol=1e-5):
        return "+beta" if value > 0 else "-beta"
    return repr(value)


def read_log(path: str | Path) -> dict:
    """Parse one per-step training CSV into its run name, identity and mAP curve."""
    path = Path(path)
    curve, ident, mode = [], "", ""
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            ident, mode = row["experiment_id"], row["mode"]
            if row.get("map"):
                curve.append((int(row["iteration"]), float(row["map"])))
    return {"run": path.stem, "experiment_id": ident, "mode": mode, "curve": curve}


def summarize(logs: Sequence[dict], baseline: str | None = None) -> list[dict]:
    """Final mAP per run and its gain over the baseline run (mt-baseline by default)."""
    rows = [{"run": lg["run"], "experiment_id": lg["experiment_id"], "mode": lg["mode"], "map": lg["curve"][-1][1] if lg["curve"] else float("nan")} for lg in logs]
    base = None
    for r in rows:
        if (baseline is not None and r["run"] == baseline) or (baseline is None and r["mode"] == "mt-baseline"):
            base = r["map"]
            break
    if baseline is not None and base is None:
        raise ConfigError(f"baseline run {baseline!r} not among the logs")
    for r in rows:
        r["gain"] = r["map"] - base if base is not None else float("nan")
    return rows


def cmd_report(args) -> int:
    logs = sorted((read_log(p) for p in args.logs), key=lambda lg: lg["run"])
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "learning_curves.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "experiment_id", "mode", "iteration", "map"])
        for lg in logs:
            for it, m in lg["curve"]:
                w.writerow([lg["run"], lg["experiment_id"], lg["mode"], it, m])
    rows = summarize(logs, args.baseline)
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["run", "experiment_id", "mode", "map", "gain"])
        w.writeheader()
        w.writerows(rows)
    print(f"{'run':<24} {'mode':<12} {'mAP':>6} {'gain':>6}")
    for r in rows:
        gain = "" if math.isnan(r["gain"]) else f"{100 * r['gain']:+6.1f}"
        print(f"{r['run']:<24} {r['mode']:<12} {100 * r['map']:6.1f} {gain:>6}")
    _say(args, f"curves -> {out / 'learning_curves.csv'}, table -> {out / 'summary.csv'}")
    return 0


# -- argument parsing ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aat", description="Adversarially attacked teacher on a synthetic shift benchmark.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help="output directory"):
        sp.add_argument("--config", help="experiment JSON (defaults if omitted)")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        sp.add_argument("--out", help=out_help)
        sp.add_argument("--quiet", action="store_true")

    g = sub.add_parser("gen-data", help="render the three dataset splits")
    common(g)
    g.add_argument("--data", help="dataset directory (default OUT/data)")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="burn-in plus one adaptation run")
    common(t)
    t.add_argument("--mode", choices=MODES, default="aat")
    t.add_argument("--data", help="dataset directory (default OUT/data)")
    t.add_argument("--no-apr", action="store_true", help="disable adversarial pseudo-label regularisation")
    t.add_argument("--no-rmo", action="store_true", help="disable robust minority oversampling")
    t.add_argument("--beta-grid", help="comma-separated beta values, e.g. 1/255,2/255,4/255,8/255")
    t.add_argument("--adapt-steps", type=int)
    t.add_argument("--burn-in-steps", type=int)
    t.add_argument("--name", help="run name (default derived from mode and flags)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="AP@0.5 of a checkpoint on a split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", default="target_test", help="split name or annotation JSON path")
    e.add_argument("--data", help="dataset directory (default: CHECKPOINT_DIR/data)")
    e.add_argument("--student", action="store_true", help="evaluate the student instead of the teacher")
    e.add_argument("--out", help="report JSON path")
    e.add_argument("--quiet", action="store_true")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("attack-demo", help="vanilla vs adversarial pseudo-labels on a few images")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--split", default="target_test")
    a.add_argument("--data")
    a.add_argument("--images", type=int, default=100)
    a.add_argument("--beta", help="perturbation size (default: the checkpoint's config)")
    a.add_argument("--out", help="JSON path (default stdout)")
    a.add_argument("--quiet", action="store_true")
    a.set_defaults(func=cmd_attack_demo)

    r = sub.add_parser("report", help="learning curves and a gain table from training logs")
    r.add_argument("logs", nargs="+", help="per-step CSV logs written by train")
    r.add_argument("--out", help="output directory (default .)")
    r.add_argument("--baseline", help="run name used for the gain column (default: the mt-baseline run)")
    r.add_argument("--quiet", action="store_true")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING, stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        code, err = 2, exc
    except (CheckpointFormatError, OSError, ValueError, KeyError) as exc:
        code, err = 1, exc
    print(json.dumps({"error": type(err).__name__, "message": str(err), "command": args.command}), file=sys.stderr)
    return code


if __name__ == "__main__":
    raise SystemExit(main())
