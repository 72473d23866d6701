"""Walk through one round of adversarial pseudo-labelling on a few target images.

A teacher is trained briefly on source scenes. It then labels hazy target
scenes, is attacked with a one-step sign perturbation, and the attacked
detections are filtered through the class-dominance rule. The script prints
what happened to every label and which crops the bank would keep.

Run with ``python demos/attack_walkthrough.py`` (about a minute on one core).
"""

import numpy as np

from aat.aat_core import (
    ConfusionMatrix,
    CropBank,
    fgsm_attack,
    generate_adversarial_pseudo_labels,
    harvest_robust_minority_crops,
    is_minority,
    label_dispositions,
)
from aat.experiment import make_benchmark
from aat.synthdata import SceneSpec
from aat.teacher_student import TrainConfig, burn_in, generate_vanilla_pseudo_labels

THRESHOLD = 0.5

bench = make_benchmark(SceneSpec(), sizes=(600, 12, 1), seed=0)
names = bench.source_train.classes
cfg = TrainConfig(channels=(8, 16, 16, 16))
print(f"burn-in on {len(bench.source_train)} source scenes ...")
teacher = burn_in(bench.source_train, 1500, cfg, seed=0).teacher

# a matrix that has seen the 10:1 imbalance: the rare classes are the minority
cm = ConfusionMatrix(cfg.num_classes)
cm.matrix[:] = [[0.9, 0.05, 0.03, 0.02], [0.05, 0.9, 0.02, 0.03], [0.3, 0.1, 0.55, 0.05], [0.1, 0.3, 0.05, 0.55]]
print("minority classes:", [names[c] for c in range(cfg.num_classes) if is_minority(c, cm.matrix)])

bank = CropBank(8)
x = bench.target_train.batch(range(12))
vanilla = [p.detections for p in generate_vanilla_pseudo_labels(teacher, x, THRESHOLD, cfg.nms_iou)]
adv = fgsm_attack(teacher, x, vanilla, cfg.beta)
attacked = [p.detections for p in generate_vanilla_pseudo_labels(teacher, adv.image, THRESHOLD, cfg.nms_iou)]
print(f"perturbation values: {sorted({round(v * 255) for v in np.unique(adv.raw_perturbation)})} / 255")

totals = {}
for k in range(len(x)):
    final = generate_adversarial_pseudo_labels(vanilla[k], attacked[k], cm.matrix)
    report = label_dispositions(vanilla[k], attacked[k], final)
    for key, n in report["counts"].items():
        totals[key] = totals.get(key, 0) + n
    before = len(bank)
    harvest_robust_minority_crops(x[k], vanilla[k], final, cm.matrix, bank, image_id=k, iteration=0)
    kept = len(bank) - before
    line = ", ".join(f"{names[d['class']]}:{d['disposition']}" for d in report["vanilla"] + report["recovered"])
    print(f"image {k}: {line or 'no labels'}; crops banked {kept}")

print("label dispositions:", totals)
print("bank fill per class:", {names[c]: len(q) for c, q in bank.queues.items()})
