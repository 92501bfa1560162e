import numpy as np
import pytest

from slidemil import evalstat, harness, milcore
from slidemil.errors import ConfigurationError


def planted_bags(n, seed, dim=16, sep=2.0):
    rng = np.random.default_rng(seed)
    bags, smooth, binary, tpm = [], [], [], []
    for i in range(n):
        K = int(rng.integers(5, 14))
        X = rng.standard_normal((K, dim)) * 0.4
        y = i % 2
        if y:
            X[int(rng.integers(0, K))] += np.concatenate([np.full(4, sep), np.zeros(dim - 4)])
        bags.append(X)
        binary.append(y)
        smooth.append(0.85 if y else 0.15)
        tpm.append(400.0 * y + 50.0 + float(rng.uniform(0, 20)))
    return bags, np.array(smooth), np.array(binary), np.array(tpm)


FAST = milcore.TrainConfig(learning_rate=5e-3, weight_decay=1e-3,
                           max_epochs=12, patience=4, seed=3)


class TestMakeFolds:
    def test_stratified_balance(self):
        y = np.array([0] * 50 + [1] * 50)
        plan = harness.make_folds(y, 5, seed=1)
        for k in range(5):
            fold_labels = y[plan.fold_of == k]
            assert fold_labels.sum() == 10
            assert len(fold_labels) == 20

    def test_deterministic(self):
        y = np.arange(40) % 2
        p1 = harness.make_folds(y, 5, seed=2)
        p2 = harness.make_folds(y, 5, seed=2)
        assert np.array_equal(p1.fold_of, p2.fold_of)

    def test_rotation_union_and_disjoint(self):
        y = np.arange(30) % 2
        plan = harness.make_folds(y, 5, seed=3)
        test_union = []
        for rot in plan.rotations():
            tr = set(rot["train"].tolist())
            se = set(rot["selection"].tolist())
            te = set(rot["test"].tolist())
            assert not (tr & se or tr & te or se & te)
            assert len(tr) + len(se) + len(te) == 30
            test_union.extend(te)
        assert sorted(test_union) == list(range(30))

    def test_too_few_per_class(self):
        with pytest.raises(ConfigurationError):
            harness.make_folds([0, 0, 0, 1, 1, 1], 5)


class TestRunCv:
    def test_planted_signal(self):
        bags, smooth, binary, tpm = planted_bags(60, seed=4)
        plan = harness.make_folds(binary, 5, seed=5)
        folds, summary = harness.run_cv(bags, smooth, binary, tpm, plan, FAST)
        assert len(folds) == 5
        assert summary["mean"] >= 0.8
        lo, hi = summary["percentile_interval_2p5_97p5"]
        assert lo <= summary["mean"] <= hi
        assert summary["min_max"][0] <= lo + 1e-12

    def test_permuted_labels_near_chance(self):
        bags, smooth, binary, tpm = planted_bags(60, seed=6)
        rng = np.random.default_rng(7)
        perm = rng.permutation(60)
        folds, summary = harness.run_cv(
            bags, smooth[perm], binary[perm], tpm[perm],
            harness.make_folds(binary[perm], 5, seed=8), FAST)
        assert 0.3 <= summary["mean"] <= 0.7


class TestCompareConfigs:
    def test_self_comparison_p_one(self):
        bags, smooth, binary, tpm = planted_bags(50, seed=9)
        plan = harness.make_folds(binary, 5, seed=10)
        report = harness.compare_configs(
            [("a", bags, smooth, binary, tpm), ("b", bags, smooth, binary, tpm)],
            plan, FAST)
        pair = report["pairs"][0]
        assert pair["mean_diff"] == 0.0
        assert pair["p"] == 1.0

    def test_pair_count(self):
        bags, smooth, binary, tpm = planted_bags(50, seed=11)
        plan = harness.make_folds(binary, 5, seed=12)
        variants = [(f"v{i}", bags, smooth, binary, tpm) for i in range(3)]
        report = harness.compare_configs(variants, plan, FAST)
        assert len(report["pairs"]) == 3

    def test_signal_vs_noise_detected(self):
        bags, smooth, binary, tpm = planted_bags(60, seed=13, sep=2.5)
        rng = np.random.default_rng(14)
        noise_bags = [rng.standard_normal(b.shape) * 0.4 for b in bags]
        plan = harness.make_folds(binary, 5, seed=15)
        report = harness.compare_configs(
            [("signal", bags, smooth, binary, tpm),
             ("noise", noise_bags, smooth, binary, tpm)], plan, FAST)
        pair = report["pairs"][0]
        assert pair["mean_diff"] > 0.2
        assert pair["p"] < 0.05


class TestPairedT:
    def test_degenerate_zero_variance(self):
        t, p = harness.paired_t_test([0.7, 0.7, 0.7], [0.7, 0.7, 0.7])
        assert p == 1.0
        t, p = harness.paired_t_test([0.8, 0.8], [0.7, 0.7])
        assert p == 0.0

    def test_against_scipy(self):
        from scipy import stats as sps
        rng = np.random.default_rng(16)
        for _ in range(30):
            n = int(rng.integers(3, 20))
            a = rng.standard_normal(n)
            b = a + rng.standard_normal(n) * 0.3 + 0.1
            t, p = harness.paired_t_test(a, b)
            ref = sps.ttest_rel(a, b)
            assert t == pytest.approx(ref.statistic, abs=1e-10)
            assert p == pytest.approx(ref.pvalue, abs=1e-10)


class TestTitration:
    def test_counts_and_fraction_one_reproduces_cv(self):
        bags, smooth, binary, tpm = planted_bags(60, seed=17)
        plan = harness.make_folds(binary, 5, seed=18)
        tplan = harness.TitrationPlan(fractions=(0.5, 1.0), repeats=2, seed=19)
        results, curve = harness.run_titration(bags, smooth, binary, plan, tplan, FAST)
        assert len(results) == 4
        assert len(curve) == 2
        # fraction 1.0 equals the plain rotation-0 training with the same seed
        rot = plan.rotations()[0]
        params, _ = milcore.train([bags[i] for i in rot["train"]], smooth[rot["train"]],
                                  [bags[i] for i in rot["selection"]],
                                  smooth[rot["selection"]], FAST)
        probs, _ = milcore.predict([bags[i] for i in rot["test"]], params)
        auc, _ = evalstat.roc_auc(probs, binary[rot["test"]])
        full = [r for r in results if r["fraction"] == 1.0]
        assert all(r["roc_auc"] == auc for r in full)

    def test_infeasible_fraction(self):
        bags, smooth, binary, tpm = planted_bags(24, seed=20)
        plan = harness.make_folds(binary, 5, seed=21)
        tplan = harness.TitrationPlan(fractions=(0.1, 1.0), repeats=1, seed=22)
        with pytest.raises(ConfigurationError):
            harness.run_titration(bags, smooth, binary, plan, tplan, FAST)

    def test_invalid_plan(self):
        with pytest.raises(ConfigurationError):
            harness.TitrationPlan(fractions=(1.0, 0.5))
        with pytest.raises(ConfigurationError):
            harness.TitrationPlan(repeats=0)


class TestFinalTrain:
    def test_grid_selection(self):
        bags, smooth, binary, _ = planted_bags(50, seed=23)
        params, info = harness.final_train(
            bags, smooth, binary, seed=1, base_config=FAST,
            learning_rates=(5e-3, 1e-3), weight_decays=(1e-3,))
        assert len(info["trials"]) == 2
        assert info["learning_rate"] in (5e-3, 1e-3)
        assert set(info["selection_idx"]).isdisjoint(info["train_idx"])
        probs, _ = milcore.predict(bags, params)
        assert np.all((probs > 0) & (probs < 1))
