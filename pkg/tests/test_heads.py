"""Task configs, metric records, task heads, masking, thresholding, evaluation.

Percentile/metric oracles are recomputed in-test from their definitions.
"""

import numpy as np
import pytest
import torch

from tslab import (
    ClassifyHead,
    ConfigurationError,
    ForecastHead,
    MetricRecord,
    ReconstructHead,
    TaskConfig,
    anomaly_threshold,
    evaluate,
    masked_mse,
    point_adjust_flags,
    precision_recall_f1,
)
from tslab.heads import IMPUTE_RATIOS, TASKS


class TestTaskConfig:
    def test_required_knob(self):
        assert TaskConfig(task="forecast", horizon=96).horizon == (96,)
        assert TaskConfig(task="impute", mask_ratio=[0.125, 0.25]).mask_ratio == (0.125, 0.25)
        assert TaskConfig(task="anomaly", anomaly_ratio=1.0).anomaly_ratio == 1.0
        assert TaskConfig(task="classify", n_classes=3).n_classes == 3

    @pytest.mark.parametrize("task", TASKS)
    def test_missing_knob_rejected(self, task):
        with pytest.raises(ConfigurationError, match="requires"):
            TaskConfig(task=task)

    def test_foreign_knob_rejected(self):
        with pytest.raises(ConfigurationError, match="does not take"):
            TaskConfig(task="forecast", horizon=96, n_classes=2)
        with pytest.raises(ConfigurationError, match="does not take"):
            TaskConfig(task="classify", n_classes=2, mask_ratio=0.25)

    def test_value_ranges(self):
        with pytest.raises(ConfigurationError):
            TaskConfig(task="forecast", horizon=0)
        with pytest.raises(ConfigurationError):
            TaskConfig(task="impute", mask_ratio=1.0)
        with pytest.raises(ConfigurationError):
            TaskConfig(task="anomaly", anomaly_ratio=0.0)
        with pytest.raises(ConfigurationError):
            TaskConfig(task="anomaly", anomaly_ratio=100.0)
        with pytest.raises(ConfigurationError):
            TaskConfig(task="classify", n_classes=1)
        with pytest.raises(ConfigurationError):
            TaskConfig(task="routing")

    def test_parse(self):
        cfg = TaskConfig.parse({"task": "impute", "mask_ratio": 0.25, "point_adjust": False})
        assert cfg.mask_ratio == (0.25,) and cfg.point_adjust is False
        assert TaskConfig.parse(cfg) is cfg

    def test_standard_ratios_are_valid(self):
        cfg = TaskConfig(task="impute", mask_ratio=list(IMPUTE_RATIOS))
        assert cfg.mask_ratio == IMPUTE_RATIOS


class TestMetricRecord:
    def test_json_always_has_all_keys(self):
        d = MetricRecord(task="forecast", mse=1.0, mae=0.5, horizon=96).to_json_dict()
        assert list(d) == ["task", "mse", "mae", "precision", "recall", "f1", "accuracy", "horizon"]
        assert d["precision"] is None and d["mse"] == 1.0

    def test_rejects_non_finite(self):
        with pytest.raises(ConfigurationError):
            MetricRecord(task="forecast", mse=float("nan"))
        with pytest.raises(ConfigurationError):
            MetricRecord(task="forecast", mae=-0.1)

    def test_f1_consistency_enforced(self):
        MetricRecord(task="anomaly", precision=1.0, recall=0.5, f1=2.0 / 3.0)
        with pytest.raises(ConfigurationError, match="inconsistent"):
            MetricRecord(task="anomaly", precision=1.0, recall=0.5, f1=0.9)
        MetricRecord(task="anomaly", precision=0.0, recall=0.0, f1=0.0)


class TestAnomalyThreshold:
    @staticmethod
    def _percentile_oracle(values, q):
        # [DERIVED: the linear-interpolation percentile definition]
        a = np.sort(np.asarray(values, dtype=np.float64))
        h = (q / 100.0) * (len(a) - 1)
        lo = int(np.floor(h))
        hi = min(lo + 1, len(a) - 1)
        return a[lo] + (h - lo) * (a[hi] - a[lo])

    def test_hand_value_1_to_100(self):
        # combined = 1..100, r=1 -> 99th percentile = 99.01
        train = np.arange(1.0, 51.0)
        test = np.arange(51.0, 101.0)
        tau = anomaly_threshold(train, test, r=1.0)
        assert tau == pytest.approx(99.01)
        combined = np.concatenate([train, test])
        assert np.sum(combined > tau) == 1  # top 1% strictly above

    def test_matches_oracle_on_random_data(self):
        rng = np.random.default_rng(0)
        for r in (0.5, 1.0, 5.0, 25.0):
            tr = rng.exponential(size=137)
            te = rng.exponential(size=83)
            tau = anomaly_threshold(tr, te, r)
            assert tau == pytest.approx(
                self._percentile_oracle(np.concatenate([tr, te]), 100.0 - r), abs=1e-12
            )

    def test_small_hand_case(self):
        # combined [0,1,2,3], r=25 -> h = 0.75*3 = 2.25 -> 2.25
        assert anomaly_threshold([0.0, 1.0], [2.0, 3.0], r=25.0) == pytest.approx(2.25)

    def test_validation(self):
        with pytest.raises(ConfigurationError):
            anomaly_threshold([], [1.0], r=1.0)
        with pytest.raises(ConfigurationError):
            anomaly_threshold([1.0], [1.0], r=0.0)


class TestPointAdjust:
    def test_canonical_example(self):
        # [DERIVED: hand computation] one hit inside a 2-long segment credits both
        labels = np.array([0, 1, 1, 0])
        flags = np.array([0, 1, 0, 0])
        p, r, f1 = precision_recall_f1(flags, labels)
        assert (p, r) == (1.0, 0.5) and f1 == pytest.approx(2.0 / 3.0)
        adjusted = point_adjust_flags(flags, labels)
        np.testing.assert_array_equal(adjusted, [0, 1, 1, 0])
        p, r, f1 = precision_recall_f1(adjusted, labels)
        assert (p, r, f1) == (1.0, 1.0, 1.0)

    def test_unhit_segment_stays_unflagged(self):
        labels = np.array([1, 1, 0, 1, 1])
        flags = np.array([1, 0, 0, 0, 0])
        np.testing.assert_array_equal(point_adjust_flags(flags, labels), [1, 1, 0, 0, 0])

    def test_false_positives_survive(self):
        labels = np.array([0, 0, 1, 1])
        flags = np.array([1, 0, 0, 1])
        np.testing.assert_array_equal(point_adjust_flags(flags, labels), [1, 0, 1, 1])

    def test_no_labels_no_change(self):
        flags = np.array([1, 0, 1])
        np.testing.assert_array_equal(point_adjust_flags(flags, np.zeros(3)), flags)

    def test_shape_mismatch(self):
        with pytest.raises(ConfigurationError):
            point_adjust_flags(np.zeros(3), np.zeros(4))

    def test_empty_denominator_conventions(self):
        assert precision_recall_f1(np.zeros(4), np.zeros(4)) == (0.0, 0.0, 0.0)
        assert precision_recall_f1(np.zeros(4), np.ones(4)) == (0.0, 0.0, 0.0)


class TestMaskedMse:
    def test_hand_value(self):
        # [DERIVED: hand computation] missing cells carry (2^2 + 3^2)/2
        pred = torch.tensor([[1.0, 2.0], [3.0, 4.0]])
        target = torch.zeros(2, 2)
        observed = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
        assert masked_mse(pred, target, observed).item() == pytest.approx((4.0 + 9.0) / 2)

    def test_gradient_zero_at_observed_cells(self):
        # [DERIVED: calculus] d/dp of masked MSE is 2(p-t)/n_missing on missing, 0 on observed
        pred = torch.tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
        target = torch.zeros(2, 2)
        observed = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
        masked_mse(pred, target, observed).backward()
        expected = torch.tensor([[0.0, 2 * 2.0 / 2], [2 * 3.0 / 2, 0.0]])
        assert torch.allclose(pred.grad, expected)

    def test_all_observed_returns_connected_zero(self):
        pred = torch.randn(3, 3, requires_grad=True)
        loss = masked_mse(pred, torch.zeros(3, 3), torch.ones(3, 3))
        assert loss.item() == 0.0
        loss.backward()  # must stay on the graph
        assert torch.equal(pred.grad, torch.zeros(3, 3))


class TestHeads:
    def test_forecast_head_shape_and_linearity(self):
        gen = torch.Generator().manual_seed(0)
        head = ForecastHead(n_tokens=5, width=8, horizon=3, gen=gen)
        x = torch.randn(2, 5, 8)
        out = head(x)
        assert out.shape == (2, 3)
        # zero bias at init -> exact homogeneity
        assert torch.allclose(head(2 * x), 2 * out, atol=1e-6)

    def test_reconstruct_head_length(self):
        gen = torch.Generator().manual_seed(0)
        head = ReconstructHead(n_tokens=4, width=8, length=32, gen=gen)
        assert head(torch.randn(4, 8)).shape == (32,)

    def test_classify_head_matches_manual_pooling(self):
        # [DERIVED: recompute pool + concat + linear by hand]
        gen = torch.Generator().manual_seed(1)
        head = ClassifyHead(width=6, n_channels=2, n_classes=3, gen=gen)
        tokens = torch.randn(4, 2, 5, 6)  # B x V x S x D
        out = head(tokens)
        pooled = tokens.mean(dim=2).reshape(4, 12)
        manual = pooled @ head.proj.weight.T + head.proj.bias
        assert torch.allclose(out, manual, atol=1e-6)

    def test_seeded_init_deterministic(self):
        a = ForecastHead(3, 4, 2, torch.Generator().manual_seed(7))
        b = ForecastHead(3, 4, 2, torch.Generator().manual_seed(7))
        assert torch.equal(a.proj.weight, b.proj.weight)
        assert torch.equal(a.proj.bias, torch.zeros(2))

    def test_classify_head_validation(self):
        with pytest.raises(ConfigurationError):
            ClassifyHead(4, 1, 1, torch.Generator())


class TestEvaluate:
    def test_forecast_hand_values(self):
        # [DERIVED: hand computation]
        pred = np.array([[1.0, 2.0]])
        target = np.array([[0.0, 4.0]])
        rec = evaluate(pred, target, "forecast", horizon=2)
        assert rec.mse == pytest.approx((1 + 4) / 2)
        assert rec.mae == pytest.approx((1 + 2) / 2)
        assert rec.horizon == 2

    def test_impute_restricted_to_missing(self):
        pred = np.array([[5.0, 2.0], [3.0, 9.0]])
        target = np.zeros((2, 2))
        mask = np.array([[1, 0], [0, 1]])  # 5.0 and 9.0 are observed -> excluded
        rec = evaluate(pred, target, "impute", mask=mask)
        assert rec.mse == pytest.approx((4.0 + 9.0) / 2)
        assert rec.mae == pytest.approx((2.0 + 3.0) / 2)

    def test_impute_needs_missing_cells(self):
        with pytest.raises(ConfigurationError):
            evaluate(np.ones((2, 2)), np.ones((2, 2)), "impute", mask=np.ones((2, 2)))

    def test_anomaly_respects_task_config_point_adjust(self):
        labels = np.array([0, 1, 1, 0])
        flags = np.array([0, 1, 0, 0])
        on = TaskConfig(task="anomaly", anomaly_ratio=1.0, point_adjust=True)
        off = TaskConfig(task="anomaly", anomaly_ratio=1.0, point_adjust=False)
        assert evaluate(flags, labels, on).f1 == pytest.approx(1.0)
        assert evaluate(flags, labels, off).f1 == pytest.approx(2.0 / 3.0)
        # explicit argument overrides the config
        assert evaluate(flags, labels, on, point_adjust=False).f1 == pytest.approx(2.0 / 3.0)

    def test_classify_tie_goes_to_lower_class(self):
        scores = np.array([[0.5, 0.5], [0.1, 0.9]])
        rec = evaluate(scores, np.array([0, 1]), "classify")
        assert rec.accuracy == 1.0
        rec2 = evaluate(scores, np.array([1, 1]), "classify")
        assert rec2.accuracy == 0.5

    def test_classify_accepts_class_ids(self):
        rec = evaluate(np.array([0, 1, 1]), np.array([0, 1, 0]), "classify")
        assert rec.accuracy == pytest.approx(2.0 / 3.0)

    def test_shape_mismatch(self):
        with pytest.raises(ConfigurationError):
            evaluate(np.ones((2, 2)), np.ones((2, 3)), "forecast")

    def test_unknown_task(self):
        with pytest.raises(ConfigurationError):
            evaluate(np.ones(2), np.ones(2), "cluster")
