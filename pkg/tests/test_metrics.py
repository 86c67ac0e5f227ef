import math

import numpy as np
import pytest

from glyrag import metrics, tables
from glyrag.metrics import MetricError


def test_rmse_mae_examples():
    assert metrics.rmse([0, 0], [3, 4]) == pytest.approx(math.sqrt(12.5), abs=1e-15)
    assert metrics.mae([0, 0], [3, 4]) == 3.5
    v = [100.0, 150.0, 60.0]
    assert metrics.rmse(v, v) == 0.0 and metrics.mae(v, v) == 0.0


def test_rmse_dominates_mae():
    rng = np.random.default_rng(0)
    for _ in range(50):
        r, p = rng.uniform(40, 400, 30), rng.uniform(40, 400, 30)
        assert metrics.rmse(r, p) >= metrics.mae(r, p)


def test_pearson_affine_and_constant():
    rng = np.random.default_rng(1)
    r = rng.normal(size=40)
    assert metrics.pearson(r, 2 * r + 5) == pytest.approx(1.0, abs=1e-12)
    p = rng.normal(size=40)
    base = metrics.pearson(r, p)
    assert metrics.pearson(3 * r + 1, 0.5 * p - 7) == pytest.approx(base, abs=1e-12)
    assert math.isnan(metrics.pearson([100, 100, 100], [1, 2, 3]))


def test_empty_and_mismatch():
    with pytest.raises(MetricError):
        metrics.rmse([], [])
    with pytest.raises(MetricError):
        metrics.mae([1, 2], [1])
    with pytest.raises(MetricError):
        metrics.tir([])


def test_tir_examples_and_oracle():
    assert metrics.tir([60, 100, 200, 150]) == 50.0
    assert metrics.tir([70, 180]) == 100.0
    assert metrics.tir_deviation([90, 300], [90, 300]) == 0.0
    rng = np.random.default_rng(2)
    for _ in range(20):
        r, p = rng.uniform(40, 300, 25).round(), rng.uniform(40, 300, 25).round()
        cnt = lambda s: sum(1 for v in s if 70 <= v <= 180) / len(s) * 100  # noqa: E731
        assert metrics.tir_deviation(r, p) == pytest.approx(abs(cnt(r) - cnt(p)), abs=1e-12)


def test_event_sensitivity():
    ref = [60, 65, 120, 200, 250]
    assert metrics.event_sensitivity(ref, ref, "hypo") == (100.0, 2)
    assert metrics.event_sensitivity(ref, ref, "hyper") == (100.0, 2)
    assert metrics.event_sensitivity(ref, [120] * 5, "hypo") == (0.0, 2)
    s, n = metrics.event_sensitivity([100, 120], [100, 120], "hypo")
    assert math.isnan(s) and n == 0
    rng = np.random.default_rng(3)
    r, p = rng.uniform(40, 300, 200), rng.uniform(40, 300, 200)
    pos = [i for i in range(200) if r[i] >= 180]
    hits = sum(1 for i in pos if p[i] >= 180)
    assert metrics.event_sensitivity(r, p, "hyper") == (pytest.approx(100 * hits / len(pos)), len(pos))


def test_clarke_examples():
    assert metrics.clarke_zone(100, 100) == "A"
    assert metrics.clarke_zone(190, 60) == "E"
    assert metrics.clarke_zone(75, 95) == "B"
    with pytest.raises(MetricError):
        metrics.clarke_zone(0, 100)


def test_clarke_lattice_matches_table_oracle():
    g = np.arange(20, 401)
    ref, pred = np.meshgrid(g, g, indexing="ij")
    table = tables.clarke_table()
    oracle = tables.classify(table, ref, pred)
    fast = metrics.clarke_zones(ref, pred)
    assert np.array_equal(fast, oracle)
    assert set(np.unique(fast)) <= set(metrics.ZONES)
    assert tables.zone_match_counts(table, ref, pred).max() <= 1
    assert np.all(metrics.clarke_zones(g, g) == "A")


def test_clarke_report_sums_to_100():
    rng = np.random.default_rng(4)
    rep = metrics.clarke_report(rng.uniform(40, 400, 333), rng.uniform(40, 400, 333))
    assert sum(rep.values()) == pytest.approx(100.0, abs=1e-9)


def test_rate_grid_matches_table():
    # eighths are exact in binary, so the float classifier and the integer oracle see the same points
    u = np.arange(-48, 49)
    x, y = np.meshgrid(u / 8, u / 8, indexing="ij")
    scaled = [tables.Predicate(p.zone, p.pid, p.text, tuple(tables.Atom(a.a, a.b, a.c * 8, a.op) for a in p.atoms))
              for p in tables.rate_table()]
    uu, vv = np.meshgrid(u, u, indexing="ij")
    assert np.array_equal(metrics.rate_zones(x, y), tables.classify(scaled, uu, vv))
    assert tables.zone_match_counts(scaled, uu, vv).max() <= 1


def test_table_grammar():
    atoms = tables.parse_inequality("ref > 130 and pred < 7/5*ref - 182", ("ref", "pred"))
    assert atoms[1] == tables.Atom(-7, 5, 910, "<")
    with pytest.raises(tables.TableError):
        tables.parse_inequality("ref >> 3", ("ref", "pred"))
    with pytest.raises(tables.TableError):
        tables.parse_inequality("bogus < 3", ("ref", "pred"))


def test_cg_ega_identity_is_all_ap():
    rng = np.random.default_rng(5)
    ref = np.clip(120 + np.cumsum(rng.normal(0, 8, 300)), 40, 400)
    rep = metrics.cg_ega(ref, ref)
    assert rep
    for band in rep.values():
        assert band["AP"] == 100.0


def test_cg_ega_constant_offset():
    rep = metrics.cg_ega([100.0] * 10, [101.0] * 10)
    assert list(rep) == ["eu"] and rep["eu"]["AP"] == 100.0 and rep["eu"]["n"] == 9


def test_cg_ega_trace_inverted_rate():
    """Reference climbs 2 mg/dL/min, prediction falls 1 mg/dL/min, all within 20 %."""
    ref = [140.0, 150.0, 160.0, 170.0]
    pred = [160.0, 155.0, 150.0, 145.0]
    pts = metrics.cg_ega_points(ref, pred)
    # x = +2 triggers the lower 10 mg/dL expansion, point stays A; (x=2, y=-1) hits RE1
    assert [(p["band"], p["p_zone"], p["r_zone"], p["outcome"]) for p in pts] == [("eu", "A", "E", "EP")] * 3
    assert metrics.cg_ega(ref, pred) == {"eu": {"AP": 0.0, "BE": 0.0, "EP": 100.0, "n": 3}}


def test_cg_ega_trace_expansion_rescues_lagging_prediction():
    """Falling hypo reference at -3 mg/dL/min; the prediction lags 14 mg/dL above."""
    ref, pred = [75.0, 60.0], [89.0, 74.0]
    assert metrics.clarke_zone(60, 74) == "D"  # unexpanded: D2
    (pt,) = metrics.cg_ega_points(ref, pred)
    # upper limit moves by 20 for x < -2, so 74 -> max(60, 54) = 60: zone A; rates equal: RA1
    assert (pt["band"], pt["p_zone"], pt["r_zone"], pt["outcome"]) == ("hypo", "A", "A", "AP")


def test_cg_ega_trace_hyper_rate_d():
    """Hyper reference rising 3 mg/dL/min while the prediction is flat: RD1, and hyper D is EP."""
    ref, pred = [200.0, 215.0], [210.0, 210.0]
    (pt,) = metrics.cg_ega_points(ref, pred)
    assert (pt["band"], pt["p_zone"], pt["r_zone"], pt["outcome"]) == ("hyper", "A", "D", "EP")


def test_cg_ega_gap_aware():
    t = np.array([0, 300, 900, 1200])
    pts = metrics.cg_ega_points([100, 110, 120, 130], [100, 110, 120, 130], t)
    assert [p["index"] for p in pts] == [1, 3]
    with pytest.raises(MetricError):
        metrics.cg_ega([100.0], [100.0])


def test_cg_ega_band_totality_random():
    rng = np.random.default_rng(6)
    for _ in range(100):
        n = int(rng.integers(2, 80))
        ref = np.clip(130 + np.cumsum(rng.normal(0, 12, n)), 40, 400)
        pred = np.clip(ref + rng.normal(0, 25, n), 40, 400)
        for band, row in metrics.cg_ega(ref, pred).items():
            assert band in metrics.BANDS and row["n"] > 0
            assert row["AP"] + row["BE"] + row["EP"] == pytest.approx(100.0, abs=1e-9)


def test_combination_table_is_total():
    combo = tables.combination_table()
    for b in metrics.BANDS:
        for p in metrics.ZONES:
            for r in metrics.ZONES:
                assert combo[(b, p, r)] in metrics.OUTCOMES
