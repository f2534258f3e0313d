import csv
import io
import json

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from cubemix.objectives import (
    METRIC_COLUMNS,
    MetricError,
    MetricReport,
    acc2_f1,
    acc7,
    ccc_loss,
    ccc_metric,
    evaluate,
    mae_loss,
    mse_loss,
    pearson,
    sentiment_class,
)

from conftest import fd_grad

series = st.lists(st.floats(-3, 3, allow_nan=False), min_size=2, max_size=12)


class TestMAE:
    def test_equal(self):
        assert mae_loss([1.0, 2.0], [1.0, 2.0])[0] == 0.0

    def test_single(self):
        loss, g = mae_loss([0.0], [2.0])
        assert loss == 2.0 and g.tolist() == [-1.0]

    def test_two(self):
        loss, g = mae_loss([0.0, 0.0], [1.0, -1.0])
        assert loss == 1.0 and g.tolist() == [-0.5, 0.5]

    def test_tie_subgradient(self):
        assert mae_loss([1.0, 3.0], [1.0, 2.0])[1].tolist() == [0.0, 0.5]

    def test_empty(self):
        with pytest.raises(MetricError):
            mae_loss([], [])

    @settings(max_examples=50, deadline=None)
    @given(y=series, c=st.floats(-10, 10))
    def test_translation(self, y, c):
        y = np.array(y)
        y_hat = y[::-1] * 0.5
        assert mae_loss(y_hat + c, y + c)[0] == pytest.approx(mae_loss(y_hat, y)[0], abs=1e-12)


class TestCCC:
    def test_perfect(self):
        assert ccc_loss([1.0, 2.0, 4.0], [1.0, 2.0, 4.0])[0] == pytest.approx(0.0, abs=1e-15)
        assert ccc_metric([1.0, 2.0, 4.0], [1.0, 2.0, 4.0]) == pytest.approx(1.0, abs=1e-15)

    def test_opposite(self):
        assert ccc_loss([-1.0, 1.0], [1.0, -1.0])[0] == 2.0
        assert ccc_metric([-1.0, 1.0], [1.0, -1.0]) == -1.0

    def test_degenerate(self):
        loss, g = ccc_loss([2.0, 2.0, 2.0], [2.0, 2.0, 2.0])
        assert loss == 1.0 and not np.any(g)

    def test_shift(self):
        assert abs(ccc_metric([5.0, 6.0], [0.0, 1.0]) - 0.5 / 25.5) < 1e-12

    def test_singleton(self):
        with pytest.raises(MetricError):
            ccc_loss([1.0], [1.0])

    @settings(max_examples=50, deadline=None)
    @given(y=series, seed=st.integers(0, 10**6))
    def test_loss_is_one_minus_metric(self, y, seed):
        y = np.array(y)
        y_hat = np.random.default_rng(seed).normal(size=y.size)
        assert ccc_loss(y_hat, y)[0] == 1.0 - ccc_metric(y_hat, y)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 10**6), n=st.integers(3, 10))
    def test_equals_pearson_when_moments_match(self, seed, n):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=n), rng.normal(size=n)
        a = (a - a.mean()) / a.std()
        b = (b - b.mean()) / b.std()
        assert ccc_metric(a + 1, b + 1) == pytest.approx(pearson(a + 1, b + 1), abs=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10**6), n=st.integers(2, 10))
    def test_range(self, seed, n):
        rng = np.random.default_rng(seed)
        c = ccc_metric(rng.normal(size=n), rng.normal(size=n))
        assert -1.0 <= c <= 1.0


@pytest.mark.parametrize("loss", [mae_loss, ccc_loss, mse_loss])
@pytest.mark.parametrize("seed", range(5))
def test_gradient_matches_fd(loss, seed):
    rng = np.random.default_rng(seed)
    y_hat, y = rng.normal(size=7), rng.normal(size=7)
    analytic = loss(y_hat, y)[1]
    numeric = fd_grad(lambda: loss(y_hat, y)[0], y_hat, h=1e-6)
    np.testing.assert_allclose(analytic, numeric, rtol=1e-5, atol=1e-9)


class TestPearson:
    def test_affine(self):
        y = np.array([0.3, -1.0, 2.0, 0.1])
        assert pearson(2 * y + 3, y) == pytest.approx(1.0, abs=1e-12)
        assert pearson(-y, y) == pytest.approx(-1.0, abs=1e-12)

    def test_hand_value(self):
        assert abs(pearson([1.0, 3.0, 2.0], [1.0, 2.0, 3.0]) - 0.5) < 1e-12

    def test_constant(self):
        with pytest.raises(MetricError):
            pearson([1.0, 1.0], [1.0, 2.0])

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 10**6), a=st.floats(0.1, 10), b=st.floats(-10, 10))
    def test_positive_affine_invariance(self, seed, a, b):
        rng = np.random.default_rng(seed)
        p, y = rng.normal(size=6), rng.normal(size=6)
        assert pearson(a * p + b, y) == pytest.approx(pearson(p, y), abs=1e-9)
        assert pearson(p, a * y + b) == pytest.approx(pearson(p, y), abs=1e-9)


class TestClassification:
    def test_perfect(self):
        assert acc2_f1([-1.0, 2.0], [-1.0, 2.0]) == (1.0, 1.0)

    def test_zero_excluded(self):
        assert acc2_f1([2.0, 3.0, 9.0], [1.0, -1.0, 0.0])[0] == 0.5

    def test_f1_two_thirds(self):
        _, f1 = acc2_f1([1.0, 1.0, 1.0, 1.0], [1.0, 2.0, -1.0, -2.0])
        assert abs(f1 - 2 / 3) < 1e-12

    def test_all_zero_labels(self):
        with pytest.raises(MetricError):
            acc2_f1([1.0], [0.0])

    def test_no_positive_predictions(self):
        assert acc2_f1([-1.0, -1.0], [1.0, -1.0]) == (0.5, 0.0)

    def test_classes(self):
        assert sentiment_class(1.8) == 2
        assert sentiment_class(4.2) == 3
        assert sentiment_class(-4.2) == -3
        assert sentiment_class([0.5, -0.5, 2.5, -1.49]).tolist() == [1, -1, 3, -1]

    def test_acc7_equal(self):
        assert acc7([1.0, -2.4], [1.0, -2.4]) == 1.0

    def test_class_idempotent(self):
        k = np.arange(-3, 4)
        np.testing.assert_array_equal(sentiment_class(k), k)
        np.testing.assert_array_equal(sentiment_class(sentiment_class(k * 1.3)), sentiment_class(k * 1.3))


class TestEvaluate:
    def test_perfect(self):
        y = np.array([-2.0, -0.4, 1.0, 2.6])
        r = evaluate(y, y)
        assert (r.mae, r.acc2, r.f1, r.acc7) == (0.0, 1.0, 1.0, 1.0)
        assert r.pearson_r == pytest.approx(1.0, abs=1e-12) and r.ccc == pytest.approx(1.0, abs=1e-12)
        assert r.undefined == ()

    def test_opposite(self):
        r = evaluate([1.0, -1.0], [-1.0, 1.0])
        assert (r.mae, r.acc2) == (2.0, 0.0)
        assert r.pearson_r == pytest.approx(-1.0) and r.ccc == pytest.approx(-1.0)

    def test_constant_predictions(self):
        r = evaluate([0.5, 0.5, 0.5], [1.0, -1.0, 2.0])
        assert r.undefined == ("pearson_r",) and r.pearson_r == 0.0
        assert r.mae == pytest.approx(7 / 6) and r.acc2 == pytest.approx(2 / 3)
        assert all(np.isfinite(r.row()))

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 10**6), n=st.integers(2, 20))
    def test_ranges(self, seed, n):
        rng = np.random.default_rng(seed)
        y = np.clip(rng.normal(size=n) * 2, -3, 3)
        assume(np.any(y != 0))
        r = evaluate(rng.normal(size=n), y)
        assert 0 <= r.acc2 <= 1 and 0 <= r.f1 <= 1 and 0 <= r.acc7 <= 1
        assert -1 <= r.ccc <= 1 and -1 <= r.pearson_r <= 1

    def test_serialization(self):
        r = evaluate([0.1, -0.3, 2.0], [0.0, -1.0, 1.5])
        assert MetricReport.from_dict(json.loads(r.to_json())) == r
        rows = list(csv.reader(io.StringIO(r.to_csv())))
        assert tuple(rows[0]) == METRIC_COLUMNS
        assert [float(v) for v in rows[1]] == r.row()
