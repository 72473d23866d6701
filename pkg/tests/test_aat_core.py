import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aat.aat_core import (
    ConfusionMatrix,
    CropBank,
    CropEntry,
    Dominance,
    attack_loss,
    best_match,
    crop_patch,
    dominance_compare,
    fgsm_attack,
    foreground_probabilities,
    generate_adversarial_pseudo_labels,
    harvest_robust_minority_crops,
    is_minority,
    label_dispositions,
    sample_crops_for_oversampling,
    update_confusion_matrix,
)
from aat.detector import Detection, GridDetector, assign_targets
from aat.tensor import Tensor, no_record
from oracles import ReferenceBank, adversarial_labels_reference, random_label_instance

BETA = 4 / 255


@pytest.fixture(scope="module")
def teacher():
    return GridDetector(3, seed=4).copy(trainable=False)


@pytest.fixture(scope="module")
def batch():
    return np.random.default_rng(1).uniform(0, 1, (3, 64, 64, 3)).astype(np.float32)


VANILLA = [
    [Detection((8, 8, 24, 24), 0, 0.9), Detection((40, 30, 60, 50), 2, 0.85)],
    [],
    [Detection((20, 20, 36, 36), 1, 0.95)],
]


class TestFGSM:
    def test_components_quantised(self, teacher, batch):
        adv = fgsm_attack(teacher, batch, VANILLA, BETA)
        assert set(np.unique(adv.raw_perturbation)) <= {np.float32(-BETA), np.float32(0), np.float32(BETA)}
        assert np.abs(adv.perturbation).max() <= BETA + 1e-7
        assert adv.image.min() >= 0 and adv.image.max() <= 1

    def test_unlabelled_image_untouched(self, teacher, batch):
        adv = fgsm_attack(teacher, batch, VANILLA, BETA)
        assert np.array_equal(adv.image[1], batch[1])

    def test_empty_vanilla_returns_input(self, teacher, batch):
        adv = fgsm_attack(teacher, batch, [[], [], []], BETA)
        assert np.array_equal(adv.image, batch) and not adv.perturbation.any()

    def test_zero_beta(self, teacher, batch):
        adv = fgsm_attack(teacher, batch, VANILLA, 0.0)
        assert np.array_equal(adv.image, batch)

    def test_teacher_weights_unchanged(self, batch):
        model = GridDetector(3, seed=9)
        before = {k: p.data.copy() for k, p in model.params.items()}
        fgsm_attack(model, batch, VANILLA, BETA)
        for k, p in model.params.items():
            assert np.array_equal(p.data, before[k])

    def test_sign_of_input_gradient(self, batch):
        # The perturbation is the sign of a central-difference estimate along a few coordinates.
        t64 = GridDetector(3, seed=4, dtype=np.float64).copy(trainable=False)
        adv = fgsm_attack(t64, batch[:1].astype(np.float64), VANILLA[:1], BETA)
        assign = [assign_targets(VANILLA[0], 3)]
        rng = np.random.default_rng(0)
        checked = 0
        for _ in range(40):
            idx = tuple(int(rng.integers(s)) for s in (1, 64, 64, 3))
            s = adv.raw_perturbation[idx]
            if s == 0:
                continue
            e = np.zeros((1, 64, 64, 3))
            e[idx] = 1e-5
            with no_record():
                up = attack_loss(t64, Tensor(batch[:1] + e), assign).data.item()
                dn = attack_loss(t64, Tensor(batch[:1] - e), assign).data.item()
            if abs(up - dn) > 1e-9:
                assert np.sign(up - dn) == np.sign(s)
                checked += 1
        assert checked > 0


class TestConfusionMatrix:
    def test_example_update(self):
        cm = ConfusionMatrix(2, momentum=0.9)
        cm.update([0], np.array([[0.6, 0.4]]))
        np.testing.assert_allclose(cm.matrix[0], [0.96, 0.04])
        np.testing.assert_array_equal(cm.matrix[1], [0, 1])

    def test_no_observation_no_change(self):
        cm = ConfusionMatrix(3)
        a = update_confusion_matrix(cm, [assign_targets([], 3)], np.zeros((1, 8, 8, 4)))
        np.testing.assert_array_equal(a.matrix, np.eye(3))

    def test_background_column_excluded(self):
        logits = np.array([[0.0, 0.0, 100.0]])
        np.testing.assert_allclose(foreground_probabilities(logits), [[0.5, 0.5]])

    def test_update_from_assignment(self):
        cm = ConfusionMatrix(2, momentum=0.5)
        logits = np.zeros((1, 8, 8, 3))
        logits[0, 3, 3] = [np.log(3.0), 0.0, 7.0]  # foreground probs (0.75, 0.25)
        update_confusion_matrix(cm, [assign_targets([Detection((20, 20, 36, 36), 0)], 2)], logits)
        np.testing.assert_allclose(cm.matrix[0], [0.875, 0.125])

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_rows_stay_on_simplex(self, seed):
        rng = np.random.default_rng(seed)
        cm = ConfusionMatrix(4, momentum=float(rng.uniform(0, 0.999)))
        for _ in range(50):
            n = int(rng.integers(1, 5))
            cm.update(rng.integers(0, 4, n), rng.dirichlet(np.ones(4), n))
        np.testing.assert_allclose(cm.matrix.sum(axis=1), 1.0, atol=1e-9)
        assert (cm.matrix >= 0).all() and (cm.matrix <= 1).all()

    def test_bad_momentum(self):
        with pytest.raises(ValueError):
            ConfusionMatrix(2, momentum=1.0)


class TestDominance:
    def test_self_comparison(self):
        assert dominance_compare(1, 1, np.eye(3)) is Dominance.I_LESS_DOMINANT

    def test_example(self):
        m = np.array([[0.9, 0.1], [0.3, 0.7]])
        assert dominance_compare(1, 0, m) is Dominance.I_LESS_DOMINANT
        assert dominance_compare(0, 1, m) is Dominance.J_LESS_DOMINANT

    def test_tie_goes_to_i(self):
        m = np.array([[0.8, 0.2], [0.2, 0.8]])
        assert dominance_compare(0, 1, m) is Dominance.I_LESS_DOMINANT
        assert dominance_compare(1, 0, m) is Dominance.I_LESS_DOMINANT

    def test_minority(self):
        m = np.diag([0.9, 0.9, 0.3])
        assert [is_minority(c, m) for c in range(3)] == [False, False, True]
        assert not any(is_minority(c, np.eye(4)) for c in range(4))
        assert not is_minority(0, np.array([[0.2]]))


class TestAdversarialLabels:
    CAR, TRUCK = 0, 1

    def _m(self, diag=(0.7, 0.7, 0.7)):
        m = np.diag(diag).astype(float)
        m[self.TRUCK, self.CAR], m[self.CAR, self.TRUCK] = 0.3, 0.1
        return m

    def test_fully_robust(self):
        v = [Detection((0, 0, 10, 10), 0, 0.9), Detection((20, 20, 40, 40), 2, 0.9)]
        assert generate_adversarial_pseudo_labels(v, v, self._m()) == v

    def test_biased_label_corrected(self):
        v = [Detection((10, 10, 30, 30), self.CAR, 0.9)]
        a = [Detection((10, 10, 30, 28), self.TRUCK, 0.85)]  # IoU 0.9
        assert generate_adversarial_pseudo_labels(v, a, self._m()) == a

    def test_dominant_flip_rejected(self):
        v = [Detection((10, 10, 30, 30), self.TRUCK, 0.9)]
        a = [Detection((10, 10, 30, 28), self.CAR, 0.85)]
        assert generate_adversarial_pseudo_labels(v, a, self._m()) == []

    @pytest.mark.parametrize("diag,added", [(0.3, True), (0.9, False)])
    def test_unmatched_detection(self, diag, added):
        v = [Detection((0, 0, 10, 10), 0, 0.9)]
        a = [Detection((5, 0, 15, 10), 2, 0.9)]  # IoU 1/3
        m = np.diag([0.9, 0.9, diag]) if added else np.diag([0.6, 0.6, diag])
        assert (generate_adversarial_pseudo_labels(v, a, m) == a) is added

    def test_empty_vanilla_uses_minority_branch(self):
        a = [Detection((0, 0, 10, 10), 0, 0.9), Detection((20, 0, 30, 10), 2, 0.9)]
        assert generate_adversarial_pseudo_labels([], a, np.diag([0.9, 0.9, 0.3])) == [a[1]]

    def test_iou_exactly_half_is_not_a_match(self):
        # IoU 0.5 exactly goes to the minority branch
        v = [Detection((0, 0, 10, 10), 0, 0.9)]
        a = [Detection((0, 0, 10, 5), 0, 0.9)]
        assert generate_adversarial_pseudo_labels(v, a, np.diag([0.9, 0.9, 0.3])) == []

    def test_best_match_tie_breaks(self):
        v = [Detection((0, 0, 10, 10), 0, 0.8), Detection((0, 0, 10, 10), 1, 0.9)]
        assert best_match((0, 0, 10, 10), v) == (1, 1.0)
        assert best_match((0, 0, 1, 1), []) == (-1, 0.0)

    def test_matches_literal_reference(self):
        rng = np.random.default_rng(2024)
        for _ in range(300):
            vanilla, attacked, m = random_label_instance(rng)
            got = generate_adversarial_pseudo_labels(
                [Detection(b, c, s) for b, c, s in vanilla], [Detection(b, c, s) for b, c, s in attacked], m
            )
            want = adversarial_labels_reference(vanilla, attacked, m.tolist())
            assert [(d.box, d.class_id, d.score) for d in got] == want

    @given(st.integers(0, 2**32 - 1))
    def test_classes_come_from_attacked_pass(self, seed):
        vanilla, attacked, m = random_label_instance(np.random.default_rng(seed))
        out = generate_adversarial_pseudo_labels(
            [Detection(*t) for t in vanilla], [Detection(*t) for t in attacked], m
        )
        assert all(d in [Detection(*t) for t in attacked] for d in out)


class TestDispositions:
    def test_all_four(self):
        v = [
            Detection((0, 0, 10, 10), 0, 0.9),
            Detection((20, 0, 30, 10), 0, 0.9),
            Detection((40, 0, 50, 10), 1, 0.9),
        ]
        final = [Detection((0, 0, 10, 10), 0, 0.9), Detection((20, 0, 30, 10), 1, 0.9), Detection((0, 40, 10, 50), 2, 0.9)]
        out = label_dispositions(v, final, final)
        assert [r["disposition"] for r in out["vanilla"]] == ["retained", "corrected", "suppressed"]
        assert out["counts"] == {"retained": 1, "corrected": 1, "suppressed": 1, "recovered": 1}


def _entry(cls, k):
    return CropEntry(np.full((4, 4, 3), k, np.float32), cls, k, k)


class TestCropBank:
    def test_fifo_eviction(self):
        bank = CropBank(capacity=32)
        for k in range(33):
            bank.push(_entry(1, k))
        ids = [e.image_id for e in bank.entries(1)]
        assert len(ids) == 32 and 0 not in ids and ids[-1] == 32

    def test_exhaustive_against_reference(self):
        # every class sequence of length <= 2K over two classes, K = 3
        K = 3
        for n in range(2 * K + 1):
            for seq in itertools.product((0, 1), repeat=n):
                bank, ref = CropBank(K), ReferenceBank(K)
                for k, c in enumerate(seq):
                    bank.push(_entry(c, k))
                    ref.push(c, k)
                    for cls in (0, 1):
                        assert [e.image_id for e in bank.entries(cls)] == ref.items.get(cls, [])
                    assert len(bank) <= 2 * K

    def test_retain_drops_other_classes(self):
        bank = CropBank(4)
        bank.push(_entry(0, 0))
        bank.push(_entry(2, 1))
        bank.retain_classes([2])
        assert bank.class_sizes() == {2: 1}


class TestHarvest:
    M = np.diag([0.9, 0.9, 0.3])  # class 2 is the only minority

    @pytest.fixture
    def image(self):
        return np.random.default_rng(0).uniform(0, 1, (64, 64, 3)).astype(np.float32)

    def test_no_minority_leaves_bank(self, image):
        bank = CropBank()
        v = [Detection((0, 0, 10, 10), 0, 0.9)]
        harvest_robust_minority_crops(image, v, v, np.eye(3), bank)
        assert len(bank) == 0

    def test_robust_minority_admitted_under_adversarial_box(self, image):
        bank = CropBank()
        v = [Detection((10, 10, 30, 30), 2, 0.9)]
        a = [Detection((10, 10, 30, 28), 2, 0.9)]
        harvest_robust_minority_crops(image, v, a, self.M, bank)
        (e,) = bank.entries(2)
        assert np.array_equal(e.patch, image[10:28, 10:30])

    def test_majority_and_fragile_rejected(self, image):
        bank = CropBank()
        v = [Detection((10, 10, 30, 30), 2, 0.9), Detection((40, 40, 60, 60), 0, 0.9)]
        a = [Detection((10, 10, 30, 30), 1, 0.9), Detection((40, 40, 60, 60), 0, 0.9)]
        harvest_robust_minority_crops(image, v, a, self.M, bank)
        assert len(bank) == 0

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=40, deadline=None)
    def test_admission_property(self, seed):
        rng = np.random.default_rng(seed)
        image = rng.uniform(0, 1, (64, 64, 3)).astype(np.float32)
        vanilla, attacked, m = random_label_instance(rng, max_classes=4)
        v = [Detection(*t) for t in vanilla]
        a = generate_adversarial_pseudo_labels(v, [Detection(*t) for t in attacked], m)
        bank = CropBank()
        harvest_robust_minority_crops(image, v, a, m, bank, image_id=7)
        minority = {c for c in range(m.shape[0]) if is_minority(c, m)}
        robust = [
            x for x in a
            if x.class_id in minority and any(y.class_id == x.class_id and best_match(x.box, [y])[1] > 0.5 for y in v)
        ]
        for c, q in bank.queues.items():
            assert c in minority
            for e in q:
                assert any(x.class_id == c and np.array_equal(e.patch, crop_patch(image, x.box)) for x in robust)


class TestSampling:
    def test_empty(self):
        assert sample_crops_for_oversampling(CropBank(), np.random.default_rng(0)) == []

    def test_single_class(self):
        bank = CropBank()
        for k in range(3):
            bank.push(_entry(2, k))
        out = sample_crops_for_oversampling(bank, np.random.default_rng(0), 2)
        assert [c for _, c in out] == [2, 2]

    @pytest.mark.parametrize("seed", range(10))
    def test_round_robin(self, seed):
        bank = CropBank()
        for k in range(5):
            bank.push(_entry(2, k))
        bank.push(_entry(3, 9))
        out = sample_crops_for_oversampling(bank, np.random.default_rng(seed), 2)
        assert sorted(c for _, c in out) == [2, 3]
