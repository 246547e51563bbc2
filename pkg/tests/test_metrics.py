import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from slowflow.data import CHANNELS, PROGNOSTIC, ClimatologyTable, FieldState, NormStats, denormalize, normalize
from slowflow.metrics import (SPEED, Contingency, MetricError, MetricReport, MetricRow, Verifier, acc, csi,
                              evaluate_rollouts, extreme_threshold, false_alarm, hit_rate, lat_weights, rmse, sedi,
                              sedi_from_rates, with_speed)

LAT4 = np.array([67.5, 22.5, -22.5, -67.5])


# ---------------------------------------------------------------- weights


def test_lat_weight_examples():
    assert lat_weights([10.0]) == pytest.approx([1.0])
    np.testing.assert_allclose(lat_weights([0.0, 60.0]), [4 / 3, 2 / 3], rtol=1e-12)
    w = lat_weights(np.linspace(-80, 80, 17))
    assert abs(w.mean() - 1.0) < 1e-12 and np.all(w > 0)


def test_lat_weight_errors():
    with pytest.raises(MetricError):
        lat_weights([90.0, 0.0])
    with pytest.raises(MetricError):
        lat_weights([])


# ---------------------------------------------------------------- rmse / acc oracles


def _brute_rmse(pred, truth, lat, mask):
    c = [math.cos(math.radians(x)) for x in lat]
    total, count = 0.0, 0
    for i in range(pred.shape[0]):
        li = len(lat) * c[i] / sum(c)
        for j in range(pred.shape[1]):
            if mask[i, j]:
                total += li * (pred[i, j] - truth[i, j]) ** 2
                count += 1
    return math.sqrt(total / count)


def _brute_acc(pred, truth, clim, lat, mask):
    c = [math.cos(math.radians(x)) for x in lat]
    num = sp = st_ = 0.0
    for i in range(pred.shape[0]):
        li = len(lat) * c[i] / sum(c)
        for j in range(pred.shape[1]):
            if mask[i, j]:
                a_hat, a = pred[i, j] - clim[i, j], truth[i, j] - clim[i, j]
                num += li * a_hat * a
                sp += li * a_hat * a_hat
                st_ += li * a * a
    return num / math.sqrt(sp * st_)


def test_rmse_and_acc_match_double_loop_on_20_fields():
    rng = np.random.default_rng(0)
    w = lat_weights(LAT4)
    for _ in range(20):
        pred, truth, clim = rng.normal(size=(3, 4, 8))
        mask = rng.random((4, 8)) > 0.25
        mask[0, 0] = True
        assert abs(rmse(pred, truth, w, mask) - _brute_rmse(pred, truth, LAT4, mask)) < 1e-6
        assert abs(acc(pred, truth, clim, w, mask) - _brute_acc(pred, truth, clim, LAT4, mask)) < 1e-6


def test_rmse_examples():
    rng = np.random.default_rng(1)
    t = rng.normal(size=(4, 8))
    w = lat_weights(LAT4)
    assert rmse(t, t, w) == 0.0
    assert rmse(t + 0.7, t, w) == pytest.approx(0.7, rel=1e-12)
    with pytest.raises(MetricError, match="empty"):
        rmse(t, t, w, np.zeros((4, 8), bool))
    with pytest.raises(MetricError):
        rmse(t[:3], t, w)


def test_rmse_excludes_masked_cells_from_denominator():
    w = lat_weights(LAT4)
    truth = np.zeros((4, 8))
    pred = np.zeros((4, 8))
    pred[1, 2] = 2.0
    mask = np.zeros((4, 8), bool)
    mask[1, :] = True
    assert rmse(pred, truth, w, mask) == pytest.approx(math.sqrt(w[1] * 4 / 8))


def test_acc_examples():
    rng = np.random.default_rng(2)
    clim, anom = rng.normal(size=(2, 4, 8))
    w = lat_weights(LAT4)
    truth = clim + anom
    assert acc(truth, truth, clim, w) == pytest.approx(1.0)
    assert acc(clim - anom, truth, clim, w) == pytest.approx(-1.0)
    assert acc(clim + 2 * anom, truth, clim, w) == pytest.approx(1.0)
    with pytest.raises(MetricError, match="zero anomaly variance"):
        acc(clim, truth, clim, w)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 10.0))
def test_acc_scale_invariance_and_antisymmetry(seed, k):
    rng = np.random.default_rng(seed)
    clim, a_hat, a = rng.normal(size=(3, 4, 8))
    w = lat_weights(LAT4)
    base = acc(clim + a_hat, clim + a, clim, w)
    assert acc(clim + k * a_hat, clim + a, clim, w) == pytest.approx(base, abs=1e-9)
    assert acc(clim - a_hat, clim + a, clim, w) == pytest.approx(-base, abs=1e-9)
    assert -1.0 <= base <= 1.0


# ---------------------------------------------------------------- events


def test_threshold_examples():
    rng = np.random.default_rng(3)
    u = rng.random((10000, 2, 2))
    np.testing.assert_allclose(extreme_threshold(u, 0.95), 0.95, atol=0.01)
    assert np.all(extreme_threshold(np.full((50, 2, 3), 4.0)) == 4.0)
    x = rng.normal(size=(501, 3))
    np.testing.assert_allclose(extreme_threshold(np.exp(x), 0.9), np.exp(extreme_threshold(x, 0.9)), rtol=1e-12)
    for bad in (0.0, 1.0, 1.5):
        with pytest.raises(MetricError):
            extreme_threshold(u, bad)


def test_contingency_counts_cover_evaluated_cells():
    rng = np.random.default_rng(4)
    p, t = rng.random((2, 4, 8)) > 0.6
    mask = rng.random((4, 8)) > 0.3
    c = Contingency.from_masks(p, t, mask)
    assert c.total == mask.sum()
    assert c.tp == np.sum(p & t & mask)
    assert (c + c).total == 2 * c.total


def test_csi_examples():
    assert csi(Contingency(1, 1, 2, 100)) == 0.25
    assert csi(Contingency(5, 0, 0, 3)) == 1.0
    assert csi(Contingency(0, 3, 1, 0)) == 0.0
    assert csi(Contingency(0, 0, 0, 9)) is None


def test_false_alarm_definitions():
    c = Contingency(tp=6, fp=2, fn=4, tn=88)
    assert hit_rate(c) == 0.6
    assert false_alarm(c) == 0.25
    assert false_alarm(c, conventional=True) == pytest.approx(2 / 90)
    assert hit_rate(Contingency(0, 1, 0, 1)) is None


def test_sedi_hand_value_and_antisymmetry():
    num = 2 * (math.log(0.2) - math.log(0.8))
    den = 2 * (math.log(0.2) + math.log(0.8))
    v = sedi_from_rates(0.8, 0.2)
    assert v == pytest.approx(num / den, rel=1e-12) and v > 0
    assert v == pytest.approx(0.756471, abs=1e-6)
    assert sedi_from_rates(0.2, 0.8) == pytest.approx(-v, rel=1e-12)
    assert sedi_from_rates(0.3, 0.3) == 0.0


def test_sedi_antisymmetry_on_25_pairs():
    grid = np.linspace(0.1, 0.9, 5)
    for h in grid:
        for f in grid:
            assert sedi_from_rates(h, f) == pytest.approx(-sedi_from_rates(f, h), abs=1e-12)


def test_sedi_undefined_cases():
    for h, f in ((0.0, 0.3), (1.0, 0.3), (0.4, 0.0), (0.4, 1.0)):
        assert sedi_from_rates(h, f) is None
    assert sedi(Contingency(0, 0, 0, 5)) is None
    assert sedi(Contingency(6, 2, 4, 88)) == pytest.approx(sedi_from_rates(0.6, 0.25))
    assert sedi(Contingency(6, 2, 4, 88), conventional=True) == pytest.approx(sedi_from_rates(0.6, 2 / 90))


# ---------------------------------------------------------------- evaluation


def _world(n_days=12, h=4, w=8, seed=5, period=4):
    rng = np.random.default_rng(seed)
    mask = np.zeros((h, w), bool)
    mask[0, :2] = True
    clim = rng.normal(size=(period, len(PROGNOSTIC), h, w))
    clim[:, :, mask] = 0
    states = []
    for d in range(n_days):
        v = np.zeros((len(CHANNELS), h, w))
        v[:len(PROGNOSTIC)] = clim[d % period] + rng.normal(size=(len(PROGNOSTIC), h, w))
        v[len(PROGNOSTIC):] = rng.normal(size=(len(CHANNELS) - len(PROGNOSTIC), h, w))
        v[:, mask] = 0
        states.append(FieldState(d, CHANNELS, v.astype(np.float32), mask))
    table = ClimatologyTable(period, PROGNOSTIC, clim.astype(np.float32))
    ver = Verifier.fit(states, table, LAT4)
    return states, ver


def _truth_forecaster(states):
    def f(i, horizon):
        return np.stack([s.values[:len(PROGNOSTIC)] for s in states[i + 1:i + horizon + 1]]).astype(np.float64)
    return f


def test_with_speed_appends_current_speed():
    x = np.zeros((2, len(PROGNOSTIC), 2, 2))
    x[:, PROGNOSTIC.index("u_vel")] = 3.0
    x[:, PROGNOSTIC.index("v_vel")] = -4.0
    out, names = with_speed(x)
    assert names[-1] == SPEED and out.shape == (2, len(PROGNOSTIC) + 1, 2, 2)
    assert np.all(out[:, -1] == 5.0)


def test_verifier_requires_full_climatology():
    states, ver = _world()
    with pytest.raises(MetricError, match="lacks"):
        Verifier.fit(states, ver.climatology.subset(PROGNOSTIC[:3]), LAT4)


def test_perfect_oracle_scores():
    states, ver = _world()
    rep = evaluate_rollouts(_truth_forecaster(states), states, ver, [1, 3], n_ics=4)
    assert len(rep.rows) == (len(PROGNOSTIC) + 1) * 2
    for r in rep.rows:
        assert r.rmse == 0.0 and r.acc == pytest.approx(1.0) and r.n_ics == 4
        assert r.csi in (None, 1.0)


def test_climatology_forecast_has_undefined_acc():
    states, ver = _world()

    def clim_forecast(i, horizon):
        return np.stack([ver.climatology.for_day(states[i + k].day).astype(np.float64) for k in range(1, horizon + 1)])

    rep = evaluate_rollouts(clim_forecast, states, ver, [2], n_ics=3)
    for v in PROGNOSTIC:
        r = rep.get(v, 2)
        assert r.acc is None and r.n_undefined >= 3 and r.rmse > 0


def test_two_ic_report_is_mean_of_single_ic_reports():
    states, ver = _world()
    rng = np.random.default_rng(9)
    noise = rng.normal(scale=0.5, size=(len(states), len(PROGNOSTIC), 4, 8))

    def noisy(offset):
        def f(i, horizon):
            j = i + offset
            return np.stack([states[j + k].values[:len(PROGNOSTIC)] + noise[j + k] for k in range(1, horizon + 1)])
        return f

    both = evaluate_rollouts(noisy(0), states, ver, [1, 2], n_ics=2)
    first = evaluate_rollouts(noisy(0), states, ver, [1, 2], n_ics=1)
    second = evaluate_rollouts(noisy(1), states[1:], ver, [1, 2], n_ics=1)
    for r in both.rows:
        a, b = first.get(r.variable, r.lead_days), second.get(r.variable, r.lead_days)
        for key in ("rmse", "acc", "csi", "sedi"):
            va, vb, vr = getattr(a, key), getattr(b, key), getattr(r, key)
            if va is None or vb is None:
                continue
            assert vr == pytest.approx((va + vb) / 2, rel=1e-12, abs=1e-15)


def test_diverged_rollout_counts_undefined():
    states, ver = _world()

    class Diverged(RuntimeError):
        def __init__(self, partial):
            super().__init__("diverged")
            self.partial = partial

    good = _truth_forecaster(states)

    def f(i, horizon):
        if i == 1:
            raise Diverged(good(i, horizon)[:1])
        return good(i, horizon)

    rep = evaluate_rollouts(f, states, ver, [1, 3], n_ics=2)
    r1, r3 = rep.get("height", 1), rep.get("height", 3)
    assert r1.rmse == 0.0 and r1.n_ics == 2
    assert r3.rmse == 0.0 and r3.n_undefined >= 4


def test_evaluate_argument_errors():
    states, ver = _world()
    with pytest.raises(MetricError):
        evaluate_rollouts(_truth_forecaster(states), states, ver, [0], n_ics=1)
    with pytest.raises(MetricError, match="truth states"):
        evaluate_rollouts(_truth_forecaster(states), states, ver, [5], n_ics=8)


def test_scores_are_invariant_to_normalisation_round_trip():
    states, ver = _world()
    stats = NormStats.from_states(states)
    rng = np.random.default_rng(11)
    pred_states = [s.with_values(s.values + rng.normal(scale=0.3, size=s.values.shape).astype(np.float32))
                   for s in states]
    round_trip = [denormalize(normalize(s, stats), stats) for s in pred_states]
    n = len(PROGNOSTIC)
    a = ver.score(pred_states[3].values[:n], states[3].values[:n], 3)
    b = ver.score(round_trip[3].values[:n], states[3].values[:n], 3)
    for (r1, a1, _), (r2, a2, _) in zip(a, b):
        assert abs(r1 - r2) < 1e-5 and abs(a1 - a2) < 1e-5


def test_report_csv_round_trip(tmp_path):
    rep = MetricReport([MetricRow("height", 1, 0.1234567891234, 0.9, None, -0.25, 3, 1),
                        MetricRow(SPEED, 10, 2.0, None, 0.5, None, 3, 4)])
    rep.write(tmp_path / "m.csv")
    text = (tmp_path / "m.csv").read_text()
    assert text.splitlines()[0] == "variable,lead_days,rmse,acc,csi,sedi,n_ics,n_undefined"
    back = MetricReport.read(tmp_path / "m.csv")
    assert back.rows == rep.rows
    assert back.to_csv() == text
    with pytest.raises(MetricError):
        MetricReport.from_csv("a,b\n1,2\n")
