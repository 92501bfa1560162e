import numpy as np
import pytest

from slidemil import robustness, synthcohort
from slidemil.errors import ConfigurationError, DomainError
from slidemil.robustness import PerturbationSpec


IDENTITY = {"brightness": 1.0, "contrast": 1.0, "saturation": 1.0, "hue_deg": 0.0}


class TestPerturbImage:
    def test_identity_bitwise(self):
        rng = np.random.default_rng(0)
        img = rng.integers(0, 256, (64, 64, 3), dtype=np.uint8)
        out = robustness.perturb_image(img, IDENTITY)
        assert np.array_equal(out, img)

    def test_brightness_float_math(self):
        img = np.full((8, 8, 3), 0.4, dtype=np.float32)
        out = robustness.perturb_image(img, dict(IDENTITY, brightness=2.0))
        assert np.allclose(out, 0.8, atol=1e-6)

    def test_brightness_u8(self):
        img = np.full((8, 8, 3), 102, dtype=np.uint8)   # 0.4 in u8
        out = robustness.perturb_image(img, dict(IDENTITY, brightness=2.0))
        assert np.all(out == 204)

    def test_full_hue_rotation_identity(self):
        rng = np.random.default_rng(1)
        img = rng.integers(0, 256, (32, 32, 3), dtype=np.uint8)
        out = robustness.perturb_image(img, dict(IDENTITY, hue_deg=360.0))
        assert np.max(np.abs(out.astype(int) - img.astype(int))) <= 1

    def test_contrast_preserves_mean(self):
        rng = np.random.default_rng(2)
        img = rng.uniform(0.3, 0.7, (64, 64, 3)).astype(np.float32)
        out = robustness.perturb_image(img, dict(IDENTITY, contrast=1.5))
        assert np.allclose(out.mean(axis=(0, 1)), img.mean(axis=(0, 1)), atol=1e-3)

    def test_range_safety(self):
        rng = np.random.default_rng(3)
        img = rng.uniform(0, 1, (32, 32, 3)).astype(np.float32)
        for factors in ({"brightness": 3.0}, {"contrast": 4.0}, {"saturation": 5.0},
                        {"hue_deg": 123.0}):
            out = robustness.perturb_image(img, dict(IDENTITY, **factors))
            assert out.min() >= 0.0 and out.max() <= 1.0

    def test_nonpositive_factor_rejected(self):
        img = np.zeros((4, 4, 3), dtype=np.uint8)
        with pytest.raises(DomainError):
            robustness.perturb_image(img, dict(IDENTITY, brightness=0.0))


class TestSpec:
    def test_level_zero_degenerate(self):
        spec = PerturbationSpec(seed=5)
        draw = spec.draw(0, 3, 7)
        assert draw == IDENTITY

    def test_widths_grow(self):
        spec = PerturbationSpec()
        w = [spec.intervals(level)["brightness"][1] - spec.intervals(level)["brightness"][0]
             for level in range(11)]
        assert w == sorted(w)
        assert w[0] == 0.0

    def test_draw_deterministic(self):
        spec = PerturbationSpec(seed=9)
        assert spec.draw(4, 1, 2) == spec.draw(4, 1, 2)
        assert spec.draw(4, 1, 2) != spec.draw(4, 2, 2)

    def test_invalid(self):
        with pytest.raises(ConfigurationError):
            PerturbationSpec(repeats=0)
        with pytest.raises(DomainError):
            PerturbationSpec(n_levels=5).intervals(9)


class _Slide:
    def __init__(self, image, slide_id):
        self.slide_id = slide_id
        self.image = image


class TestSweep:
    def _slides(self, n=12, seed=4):
        rng = np.random.default_rng(seed)
        slides = []
        scores = rng.uniform(0.2, 0.8, n)
        labels = (np.arange(n) % 2)
        scores = np.where(labels == 1, scores + 0.15, scores)
        for i in range(n):
            brightness = 80 + int(150 * scores[i])
            img = np.full((64, 64, 3), brightness, dtype=np.uint8)
            slides.append(_Slide(img, f"P{i}"))
        return slides, labels

    def test_level_zero_bitwise_and_row_count(self):
        slides, labels = self._slides()

        def score_fn(images):
            return np.array([img.mean() / 255.0 for img in images])

        spec = PerturbationSpec(n_levels=3, repeats=2, seed=6)
        rows, clean = robustness.run_perturbation_sweep(slides, labels, spec,
                                                        score_fn, threshold=0.5)
        assert len(rows) == (3 + 1) * 2
        clean_auc = rows[0]["roc_auc"]
        for row in rows:
            if row["level"] == 0:
                assert row["roc_auc"] == clean_auc
                assert row["mean_abs_delta_p"] == 0.0

    def test_shift_grows_with_level(self):
        slides, labels = self._slides(16, seed=7)

        def score_fn(images):
            return np.array([img.mean() / 255.0 for img in images])

        spec = PerturbationSpec(n_levels=6, repeats=3, seed=8)
        rows, _ = robustness.run_perturbation_sweep(slides, labels, spec,
                                                    score_fn, threshold=0.5)
        by_level = {}
        for row in rows:
            by_level.setdefault(row["level"], []).append(row["mean_abs_delta_p"])
        means = [np.mean(by_level[lv]) for lv in sorted(by_level)]
        assert means[0] == 0.0
        assert means[-1] > means[0]

    def test_csv_output(self, tmp_path):
        slides, labels = self._slides()
        spec = PerturbationSpec(n_levels=1, repeats=1, seed=9)
        rows, _ = robustness.run_perturbation_sweep(
            slides, labels, spec, lambda imgs: np.array([im.mean() / 255 for im in imgs]),
            threshold=0.5)
        path = tmp_path / "sweep.csv"
        robustness.write_sweep_csv(rows, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "level,repeat,metric,value"
        n_metrics = len(rows[0]) - 2
        assert len(lines) == 1 + len(rows) * n_metrics


class TestScannerShift:
    def test_identity_profile(self):
        rng = np.random.default_rng(10)
        imgs = [rng.integers(0, 256, (32, 32, 3), dtype=np.uint8)]
        out = robustness.simulate_scanner_shift(
            imgs, "identity", synthcohort.default_scanner_profiles())
        assert np.array_equal(out[0], imgs[0])

    def test_warm_profile_changes_pixels(self):
        rng = np.random.default_rng(11)
        imgs = [rng.integers(30, 220, (32, 32, 3), dtype=np.uint8)]
        out = robustness.simulate_scanner_shift(
            imgs, "warm_shift", synthcohort.default_scanner_profiles())
        assert not np.array_equal(out[0], imgs[0])

    def test_unknown_profile_rejected(self):
        with pytest.raises(ConfigurationError):
            robustness.simulate_scanner_shift(
                [], "nope", synthcohort.default_scanner_profiles())
