import numpy as np
import pytest

from slidemil import labels
from slidemil.errors import DomainError
from slidemil.synthcohort import make_operating_point_cohort


class TestWeightedCopyNumber:
    def test_hand_example(self):
        # (100*4 + 300*6) / 400
        assert labels.weighted_copy_number([(100, 4), (300, 6)]) == 5.5

    def test_single_segment(self):
        assert labels.weighted_copy_number([(50, 2)]) == 2.0

    def test_constant_cn(self):
        assert labels.weighted_copy_number([(10, 3), (30, 3)]) == 3.0

    def test_empty_rejected(self):
        with pytest.raises(DomainError):
            labels.weighted_copy_number([])

    def test_nonpositive_length_rejected(self):
        with pytest.raises(DomainError):
            labels.weighted_copy_number([(0, 2)])

    def test_split_invariance(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            n = int(rng.integers(1, 6))
            segs = [(int(rng.integers(1, 1000)), float(rng.uniform(0, 8)))
                    for _ in range(n)]
            base = labels.weighted_copy_number(segs)
            k = int(rng.integers(0, n))
            length, cn = segs[k]
            if length < 2:
                continue
            cut = int(rng.integers(1, length))
            split = segs[:k] + [(cut, cn), (length - cut, cn)] + segs[k + 1:]
            assert labels.weighted_copy_number(split) == pytest.approx(base, abs=1e-12)


class TestSmoothLabel:
    def test_midpoint(self):
        # log2(256) = 8 exactly
        assert labels.smooth_label(255.0) == 0.5

    def test_zero_tpm(self):
        # sigmoid(-16), high-precision reference 1.1253516205509499e-07
        assert labels.smooth_label(0.0) == pytest.approx(1.1253516205509499e-07, rel=1e-12)

    def test_tpm_1023(self):
        # sigmoid(4), high-precision reference 0.9820137900379084
        assert labels.smooth_label(1023.0) == pytest.approx(0.9820137900379084, rel=1e-12)

    def test_negative_rejected(self):
        with pytest.raises(DomainError):
            labels.smooth_label(-1.0)

    def test_strictly_increasing_and_in_range(self):
        rng = np.random.default_rng(3)
        tpm = np.sort(rng.uniform(0, 5000, size=400))
        tpm = np.unique(tpm)
        vals = labels.smooth_label(tpm)
        assert np.all(np.diff(vals) > 0)
        assert np.all((vals > 0) & (vals < 1))

    def test_binary_consistency(self):
        # binary == 1 exactly when smooth >= 0.5
        rng = np.random.default_rng(4)
        tpm = np.concatenate([rng.uniform(0, 5000, size=500), [255.0, 254.9, 255.1]])
        smooth = labels.smooth_label(tpm)
        binary = labels.binary_label(tpm)
        assert np.array_equal(binary == 1, smooth >= 0.5)


class TestBinaryLabel:
    def test_boundary_positive(self):
        assert labels.binary_label(255.0) == 1

    def test_below(self):
        assert labels.binary_label(200.0) == 0   # log2(201) ~ 7.651

    def test_above(self):
        assert labels.binary_label(300.0) == 1   # log2(301) ~ 8.234


class TestDeriveThreshold:
    def test_perfect_separation(self):
        cohort = ([(2.0 ** 9 - 1, [(100, 6.0)])] * 20
                  + [(2.0 ** 6 - 1, [(100, 2.0)])] * 20)
        rep = labels.derive_threshold(cohort)
        assert rep.sensitivity == 1.0
        assert rep.specificity == 1.0
        assert 6.0 < rep.threshold < 9.0
        assert rep.auc == 1.0

    def test_operating_point_recovery(self):
        cohort = make_operating_point_cohort(n_amplified=100, n_neutral=100, seed=11)
        rep = labels.derive_threshold(cohort)
        assert rep.sensitivity == pytest.approx(0.92)
        assert rep.specificity == pytest.approx(0.80)
        # recovered within one inter-score gap of 8
        scores = np.sort([np.log2(t + 1) for t, _ in cohort])
        gap = np.max(np.diff(scores))
        assert abs(rep.threshold - 8.0) <= gap

    def test_duplication_invariance(self):
        cohort = make_operating_point_cohort(n_amplified=50, n_neutral=50, seed=2)
        rep1 = labels.derive_threshold(cohort)
        rep2 = labels.derive_threshold(cohort + cohort)
        assert rep1.threshold == rep2.threshold

    def test_intermediate_cases_excluded(self):
        cohort = make_operating_point_cohort(n_amplified=30, n_neutral=30, seed=5)
        cohort.append((100.0, [(500, 3.5)]))   # strictly between 2 and 5
        rep = labels.derive_threshold(cohort)
        assert rep.n_excluded == 1
        assert rep.n_amplified == 30 and rep.n_neutral == 30

    def test_single_class_rejected(self):
        with pytest.raises(DomainError):
            labels.derive_threshold([(100.0, [(10, 6.0)])] * 5)
