"""Adapt a shared burned-in detector to the hazy target domain in several modes.

This is a shrunken version of the acceptance experiment: smaller splits,
fewer steps and a narrower network, so it finishes in a few minutes. Expect
the ordering to be noisy at this scale; the acceptance suite averages three
seeds at full size.

Run with ``python demos/compare_modes.py [steps]``.
"""

import dataclasses
import sys

from aat.experiment import make_benchmark, run_mode
from aat.synthdata import SceneSpec
from aat.teacher_student import TrainConfig, burn_in

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 600
cfg = TrainConfig(channels=(8, 16, 16, 16), burn_in_steps=1500, adapt_steps=steps)
bench = make_benchmark(SceneSpec(), sizes=(800, 800, 400), seed=0)
burned = burn_in(bench.source_train, cfg.burn_in_steps, cfg, seed=0)

runs = {
    "source-only": ("source-only", {}),
    "mt-baseline": ("mt-baseline", {}),
    "aat (apr only)": ("aat", {"rmo": False}),
    "aat (rmo only)": ("aat", {"apr": False}),
    "aat": ("aat", {}),
    "oracle": ("oracle", {}),
}
print(f"{'run':16s} {'mAP':>6s} {'minority AP':>12s} {'seconds':>8s}")
for name, (mode, overrides) in runs.items():
    r = run_mode(bench, dataclasses.replace(cfg, **overrides), mode, seed=0, burned=burned)
    minority = r.report.minority_ap or 0.0
    print(f"{name:16s} {100 * r.report.mean_ap:6.2f} {100 * minority:12.2f} {r.seconds:8.0f}")
