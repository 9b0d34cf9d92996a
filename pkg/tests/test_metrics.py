import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats

from ensphere import metrics as m
from ensphere.grid import LatLonGrid, cell_area_weights


def crps_integral(members, y):
    """Exact integral of (F_ens(t) - 1{t >= y})^2 over piecewise-constant segments."""
    members = np.sort(np.asarray(members, dtype=float))
    knots = np.sort(np.append(members, y))
    total = 0.0
    for a, b in zip(knots[:-1], knots[1:]):
        t = 0.5 * (a + b)
        F = np.mean(members <= t)
        H = float(t >= y)
        total += (F - H) ** 2 * (b - a)
    return total


# -- CRPS ---------------------------------------------------------------------


def test_crps_examples():
    assert m.crps(np.array([[[3.0]]]), np.array([[5.0]])) == pytest.approx(2.0)
    assert m.crps(np.array([[[0.0]], [[2.0]]]), np.array([[1.0]])) == pytest.approx(0.5)
    y = np.random.default_rng(0).normal(size=(3, 4))
    assert m.crps(np.stack([y] * 5), y) == pytest.approx(0.0, abs=1e-15)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 16), elements=st.floats(-50, 50)), st.floats(-60, 60))
def test_crps_matches_empirical_cdf_integral(members, y):
    got = m.crps_pointwise(members[:, None], np.array([y]))[0]
    assert got == pytest.approx(crps_integral(members, y), abs=1e-9)


def test_crps_permutation_and_translation_invariance():
    rng = np.random.default_rng(1)
    ens, tgt = rng.normal(size=(7, 3, 5, 6)), rng.normal(size=(3, 5, 6))
    w = rng.uniform(0.5, 1.5, size=(5, 6))
    base = m.crps(ens, tgt, w)
    assert m.crps(ens[rng.permutation(7)], tgt, w) == pytest.approx(base, abs=1e-12)
    assert m.crps(ens + 4.2, tgt + 4.2, w) == pytest.approx(base, abs=1e-12)
    assert m.ensemble_mean_rmse(ens + 4.2, tgt + 4.2, w) == pytest.approx(m.ensemble_mean_rmse(ens, tgt, w), abs=1e-12)


def test_crps_shape_mismatch():
    with pytest.raises(ValueError):
        m.crps(np.zeros((2, 3, 4)), np.zeros((3, 5)))


def test_crps_area_weighting():
    g = LatLonGrid(5, 4)
    w = cell_area_weights(g)
    ens = np.zeros((1, 1) + g.shape)
    tgt = np.ones((1,) + g.shape)
    tgt[0, 0] = 11.0  # the polar row has a tiny weight
    want = np.mean(w * np.abs(tgt[0]))
    assert m.crps(ens, tgt, w) == pytest.approx(want)


def test_masked_init_times_are_excluded():
    ens = np.zeros((2, 3, 1))
    tgt = np.array([[1.0], [3.0], [100.0]])
    assert m.crps(ens, tgt, mask=[True, True, False]) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        m.crps(ens, tgt, mask=[False] * 3)


# -- RMSE, spread/skill, bias, wind speed -----------------------------------------


def test_rmse_examples():
    assert m.ensemble_mean_rmse(np.array([[[0.0]], [[2.0]]]), np.array([[0.0]])) == pytest.approx(1.0)
    ens = np.array([[[1.0, 2.0]], [[3.0, 4.0]]])
    assert m.ensemble_mean_rmse(ens, ens.mean(axis=0)) == 0.0


def test_spread_skill_examples_and_errors():
    rng = np.random.default_rng(2)
    tgt = rng.normal(size=(4, 10))
    ens = np.stack([tgt + 1.0] * 3)
    assert m.spread_skill_ratio(ens, tgt) == pytest.approx(0.0, abs=1e-12)
    ens = rng.normal(size=(5, 4, 10))
    r = m.spread_skill_ratio(ens, tgt)
    assert m.spread_skill_ratio(2 * ens, 2 * tgt) == pytest.approx(r)
    with pytest.raises(ValueError):
        m.spread_skill_ratio(ens[:1], tgt)
    with pytest.raises(ValueError):
        m.spread_skill_ratio(np.array([[[0.0]], [[2.0]]]), np.array([[1.0]]))


def test_spread_skill_is_one_for_exchangeable_ensembles():
    rng = np.random.default_rng(3)
    ens = rng.standard_normal((50, 100, 10_000))
    tgt = rng.standard_normal((100, 10_000))
    assert m.spread_skill_ratio(ens, tgt) == pytest.approx(1.0, abs=0.01)


def test_bias_examples():
    assert m.bias(np.array([[[0.0]], [[4.0]]]), np.array([[1.0]])) == pytest.approx(1.0)
    rng = np.random.default_rng(4)
    ens, tgt = rng.normal(size=(3, 2, 5)), rng.normal(size=(2, 5))
    assert m.bias(np.stack([tgt] * 3), tgt) == 0.0
    assert m.bias(ens + 2.5, tgt) == pytest.approx(m.bias(ens, tgt) + 2.5)


def test_wind_speed():
    assert m.derive_wind_speed(3.0, 4.0) == 5.0
    assert m.derive_wind_speed(0.0, 0.0) == 0.0
    rng = np.random.default_rng(5)
    u, v = rng.normal(size=(2, 10, 50))
    # speed of the ensemble-mean wind never exceeds the mean speed
    assert np.all(m.derive_wind_speed(u.mean(0), v.mean(0)) <= m.derive_wind_speed(u, v).mean(0) + 1e-12)
    with pytest.raises(ValueError):
        m.derive_wind_speed(u, v[:3])


# -- rank histogram ---------------------------------------------------------------


def test_truth_rank_examples():
    assert m.truth_ranks(np.array([[1.0], [3.0]]), np.array([2.0]))[0] == 2
    assert m.truth_ranks(np.array([[1.0], [3.0]]), np.array([0.0]))[0] == 1
    h = m.rank_histogram(np.ones((4, 1000)), np.ones(1000), seed=1)
    # every position is tied: ranks uniform over 1..5
    assert h.sum() == 1000 and stats.chisquare(h).pvalue > 0.01


def test_rank_histogram_uniform_for_exchangeable_ensemble():
    rng = np.random.default_rng(6)
    h = m.rank_histogram(rng.normal(size=(10, 100, 1000)), rng.normal(size=(100, 1000)))
    assert h.sum() == 100_000
    assert stats.chisquare(h).pvalue > 0.01


def test_rank_tie_break_depends_only_on_seed_and_position():
    ens = np.zeros((3, 6, 7))
    tgt = np.zeros((6, 7))
    full = m.truth_ranks(ens, tgt, seed=9)
    assert np.array_equal(full, m.truth_ranks(ens, tgt, seed=9))
    assert not np.array_equal(full, m.truth_ranks(ens, tgt, seed=10))


# -- Brier ------------------------------------------------------------------------


def test_brier_examples():
    y = (np.random.default_rng(7).random((5, 30)) < 0.3).astype(float)
    assert m.brier(np.stack([y] * 4), y) == (0.0, 1.0)
    # BS alone is defined even when the event always occurs
    assert m.brier_series(np.array([[[1.0]], [[0.0]]]), np.array([[1.0]]))[0, 0] == 0.25


def test_brier_skill_zero_for_climatological_forecast():
    # 4 members, 25% event rate, forecast probability 0.25 everywhere
    y = np.zeros((1, 8))
    y[0, :2] = 1
    ens = np.zeros((4, 1, 8))
    ens[0] = 1
    bs, bss = m.brier(ens, y)
    assert bs == pytest.approx(0.25 * 0.75) and bss == pytest.approx(0.0, abs=1e-12)


def test_brier_errors():
    with pytest.raises(ValueError):
        m.brier(np.full((2, 1, 3), 0.5), np.zeros((1, 3)))
    with pytest.raises(ValueError):
        m.brier(np.zeros((2, 1, 3)), np.zeros((1, 3)))


# -- REV ----------------------------------------------------------------------------


def rev_by_enumeration(prob, y, w, q, alpha):
    """Mean expense per cell by direct bookkeeping of the cost/loss game."""
    act = prob > q
    expense = np.where(act, alpha, np.where(y == 1, 1.0, 0.0))
    e_fc = np.average(expense, weights=w)
    base = np.average(y, weights=w)
    e_clim = min(alpha, base)
    return (e_clim - e_fc) / (e_clim - base * alpha)


def test_rev_from_confusion_matches_enumeration():
    # TP=0.1, FN=0.1, FP=0.1, TN=0.7 built from 10 equal-weight cells
    y = np.array([1, 0, 1, 0, 0, 0, 0, 0, 0, 0])
    p = np.array([1, 1, 0, 0, 0, 0, 0, 0, 0, 0], dtype=float)
    conf = m.ConfusionMatrix(tn=0.7, fn=0.1, fp=0.1, tp=0.1)
    got = m.rev_from_confusion(conf.as_array()[None], [0.05, 0.2, 0.5])[0]
    want = [rev_by_enumeration(p, y, np.ones(10), 0.5, a) for a in (0.05, 0.2, 0.5)]
    np.testing.assert_allclose(got, want, atol=1e-12)
    # hand value at C/L = 0.05: E_clim = 0.05, E_fc = 0.2*0.05 + 0.1, E_perf = 0.01
    assert got[0] == pytest.approx((0.05 - 0.11) / 0.04)


def test_rev_star_matches_enumeration_over_thresholds():
    rng = np.random.default_rng(8)
    M, n = 6, 400
    y = (rng.random(n) < 0.3).astype(float)
    ens = ((rng.random((M, n)) < 0.2 + 0.5 * y)).astype(float)
    w = rng.uniform(0.5, 1.5, n)
    w /= w.mean()
    ratios = np.linspace(0.05, 0.95, 19)
    got = m.rev_curve(ens[:, None], y[None], w, ratios)
    want = [max(rev_by_enumeration(ens.mean(0), y, w, q, a) for q in m.rev_thresholds(M)) for a in ratios]
    np.testing.assert_allclose(got, want, atol=1e-12)
    assert np.all(got >= 0) and np.all(got <= 1)


def test_rev_perfect_and_uninformative():
    rng = np.random.default_rng(9)
    y = (rng.random((2, 200)) < 0.4).astype(float)
    ratios = [0.1, 0.4, 0.8]
    np.testing.assert_allclose(m.rev_curve(np.stack([y] * 5), y, None, ratios), 1.0)
    # same probability at every cell: only always/never act strategies differ
    ens = np.zeros((5, 2, 200))
    ens[:2] = 1
    np.testing.assert_allclose(m.rev_curve(ens, y, None, ratios), 0.0, atol=1e-12)


def test_rev_monotone_when_members_are_corrected():
    rng = np.random.default_rng(10)
    y = (rng.random((1, 300)) < 0.25).astype(float)
    ens = (rng.random((8, 1, 300)) < 0.25).astype(float)
    ratios = np.linspace(0.05, 0.95, 19)
    prev = m.rev_curve(ens, y, None, ratios)
    for k in range(8):
        ens[k] = y
        cur = m.rev_curve(ens, y, None, ratios)
        assert np.all(cur >= prev - 1e-12)
        prev = cur


def test_confusion_sums_to_one_and_label_swap():
    rng = np.random.default_rng(11)
    prob = rng.random((3, 40))
    y = (rng.random((3, 40)) < 0.5).astype(float)
    w = rng.uniform(0.2, 2, 40)
    w /= w.mean()
    conf = m.confusion_series(prob, y, w, thresholds=[0.3, 0.6])
    np.testing.assert_allclose(conf.sum(-1), 1.0, atol=1e-12)
    # flip the predictions: positives and negatives exchange
    flipped = m.confusion_series(1 - prob, y, w, thresholds=[0.7, 0.4])
    np.testing.assert_allclose(flipped[..., [2, 3, 0, 1]], conf, atol=1e-12)


def test_rev_star_stays_in_unit_interval_under_roundoff():
    # unclipped, several of these scenarios give REV* of order -1e-15
    rng = np.random.default_rng(103)
    for _ in range(300):
        M, n = int(rng.integers(1, 11)), int(rng.integers(4, 40))
        y = (rng.random((1, n)) < rng.uniform(0.05, 0.95)).astype(float)
        y[0, :2] = [0.0, 1.0]
        ens = (rng.random((M, 1, n)) < 0.5).astype(float)
        w = rng.uniform(0.1, 2, n)
        rev = m.rev_curve(ens, y, w / w.mean(), rng.uniform(0.01, 0.99, 5))
        assert np.all(rev >= 0.0) and np.all(rev <= 1.0)


def test_rev_errors():
    with pytest.raises(ValueError):
        m.rev_curve(np.zeros((2, 1, 4)), np.zeros((1, 4)), None, [0.5])
    with pytest.raises(ValueError):
        m.rev_curve(np.zeros((2, 1, 4)), np.array([[0, 1, 0, 1.0]]), None, [0.0])


# -- climatological percentiles -------------------------------------------------------


def test_percentile_examples():
    hist = np.arange(1, 101, dtype=float)[:, None, None] * np.ones((1, 2, 3))
    cp = m.climatology_percentiles(hist, [1, 50, 99])
    np.testing.assert_allclose(cp.threshold(99), 99.01)
    assert np.all(np.diff(cp.thresholds, axis=0) >= 0)
    const = m.climatology_percentiles(np.full((7, 4), 2.5), [0.01, 99.99])
    np.testing.assert_array_equal(const.thresholds, 2.5)
    with pytest.raises(ValueError):
        m.climatology_percentiles(np.zeros((0, 3)), [50])
    with pytest.raises(KeyError):
        cp.threshold(42)


def test_exceedance_is_strict():
    thr = np.array([[1.0, 2.0]])
    vals = np.array([[[1.0, 2.5]], [[0.5, 2.0]]])
    assert m.exceedance_binarize(vals, thr, "above").tolist() == [[[0, 1]], [[0, 0]]]
    assert m.exceedance_binarize(vals, thr, "below").tolist() == [[[0, 0]], [[1, 0]]]
    with pytest.raises(ValueError):
        m.exceedance_binarize(vals, np.zeros((3, 3)))


def test_extreme_event_rev_pipeline_matches_one_pass_oracle():
    rng = np.random.default_rng(12)
    g = LatLonGrid(7, 12)
    w = cell_area_weights(g)
    hist = rng.gamma(2.0, size=(60,) + g.shape)
    ens = rng.gamma(2.0, size=(4, 5) + g.shape)
    tgt = rng.gamma(2.0, size=(5,) + g.shape)
    thr = m.climatology_percentiles(hist, [90]).threshold(90)
    ratios = [0.1, 0.3]
    got = m.rev_curve(m.exceedance_binarize(ens, thr), m.exceedance_binarize(tgt, thr), w, ratios)
    # one pass: probabilities and outcomes straight from the raw fields, weights tiled over time
    prob = (ens > thr).mean(0).ravel()
    y = (tgt > thr).ravel().astype(float)
    ww = np.tile(w.ravel(), 5)
    want = [max(rev_by_enumeration(prob, y, ww, q, a) for q in m.rev_thresholds(4)) for a in ratios]
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_metric_record():
    rec = m.metric_record("2t", None, 24, "crps", np.float64(0.5))
    assert rec == {"variable": "2t", "level": None, "lead_time_h": 24, "metric": "crps", "value": 0.5}
