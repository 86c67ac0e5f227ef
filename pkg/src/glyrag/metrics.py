"""Accuracy and clinical metrics on paired reference/prediction series (mg/dL)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from glyrag import tables

HYPO = 70.0
HYPER = 180.0
ZONES = ("A", "B", "C", "D", "E")
BANDS = ("hypo", "eu", "hyper")
OUTCOMES = ("AP", "BE", "EP")
STEP_MIN = 5.0


class MetricError(ValueError):
    pass


def _pair(ref, pred) -> tuple[np.ndarray, np.ndarray]:
    r = np.asarray(ref, dtype=np.float64).reshape(-1)
    p = np.asarray(pred, dtype=np.float64).reshape(-1)
    if r.size == 0:
        raise MetricError("empty series")
    if r.shape != p.shape:
        raise MetricError(f"length mismatch {r.size} vs {p.size}")
    return r, p


def rmse(ref, pred) -> float:
    r, p = _pair(ref, pred)
    return float(np.sqrt(np.mean((p - r) ** 2)))


def mae(ref, pred) -> float:
    r, p = _pair(ref, pred)
    return float(np.mean(np.abs(p - r)))


def pearson(ref, pred) -> float:
    """Pearson r; ``nan`` when either series is constant."""
    r, p = _pair(ref, pred)
    dr, dp = r - r.mean(), p - p.mean()
    den = math.sqrt(float(dr @ dr) * float(dp @ dp))
    if den == 0.0:
        return float("nan")
    return float(np.clip((dr @ dp) / den, -1.0, 1.0))


def tir(series) -> float:
    v = np.asarray(series, dtype=np.float64).reshape(-1)
    if v.size == 0:
        raise MetricError("empty series")
    return float(100.0 * np.mean((v >= HYPO) & (v <= HYPER)))


def tir_deviation(ref, pred) -> float:
    r, p = _pair(ref, pred)
    return abs(tir(r) - tir(p))


def event_sensitivity(ref, pred, band: str) -> tuple[float, int]:
    """Pointwise sensitivity and the number of reference events; ``nan`` if there are none."""
    r, p = _pair(ref, pred)
    if band == "hypo":
        pos, hit = r <= HYPO, p <= HYPO
    elif band == "hyper":
        pos, hit = r >= HYPER, p >= HYPER
    else:
        raise ValueError(f"unknown band {band!r}")
    n = int(pos.sum())
    return (float(100.0 * hit[pos].mean()) if n else float("nan")), n


# Clarke error grid ------------------------------------------------------------

def clarke_zones(ref, pred) -> np.ndarray:
    """Vectorised Clarke zones; the inequalities mirror ``data/clarke_zones.csv``."""
    r = np.asarray(ref, dtype=np.float64)
    p = np.asarray(pred, dtype=np.float64)
    if np.any(~np.isfinite(r)) or np.any(~np.isfinite(p)) or np.any(r <= 0) or np.any(p <= 0):
        raise MetricError("Clarke grid needs positive finite values")
    a = ((5 * p <= 6 * r) & (5 * p >= 4 * r)) | ((r < 70) & (p < 70))
    e = ((r >= 180) & (p <= 70)) | ((r <= 70) & (p >= 180))
    c = ((r > 70) & (r < 290) & (p >= r + 110)) | ((r > 130) & (r < 180) & (5 * p < 7 * r - 910))
    d = ((r > 240) & (p > 70) & (p <= 180)) | ((r < 70) & (p >= 70) & (p < 180) & (5 * p > 6 * r))
    out = np.full(r.shape, "B", dtype="<U1")
    for mask, z in ((d, "D"), (c, "C"), (e, "E"), (a, "A")):  # reverse precedence
        out[mask] = z
    return out


def clarke_zone(ref: float, pred: float) -> str:
    return str(clarke_zones(np.array([ref]), np.array([pred]))[0])


def clarke_report(ref, pred) -> dict[str, float]:
    r, p = _pair(ref, pred)
    z = clarke_zones(r, p)
    return {k: float(100.0 * np.mean(z == k)) for k in ZONES}


# CG-EGA --------------------------------------------------------------------------

def band_of(ref) -> np.ndarray:
    r = np.asarray(ref, dtype=np.float64)
    return np.where(r <= HYPO, "hypo", np.where(r >= HYPER, "hyper", "eu"))


def rate_zones(x, y) -> np.ndarray:
    """Rate-grid zone of (reference rate, predicted rate) in mg/dL/min."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    a = np.abs(y - x) <= 1
    e = ((x >= 1) & (y <= -1)) | ((x <= -1) & (y >= 1))
    d = (np.abs(x) > 2) & (np.abs(y) < 1)
    c = (np.abs(x) < 1) & (np.abs(y) > 2)
    out = np.full(x.shape, "B", dtype="<U1")
    for mask, z in ((c, "C"), (d, "D"), (e, "E"), (a, "A")):
        out[mask] = z
    return out


def _expanded_pred(ref: np.ndarray, pred: np.ndarray, ref_rate: np.ndarray) -> np.ndarray:
    """Shift the prediction toward the diagonal when the reference moves fast.

    Falling references widen the upper zone limits, rising ones the lower
    limits (``data/pega_expansion.csv``); moving the point by the shift is the
    same as moving the limits.
    """
    out = pred.copy()
    for side, lo, hi, shift in tables.pega_expansion():
        if side == "upper":
            m = (ref_rate >= lo) & (ref_rate < hi) & (pred > ref)
            out[m] = np.maximum(ref[m], pred[m] - shift)
        else:
            m = (ref_rate > lo) & (ref_rate <= hi) & (pred < ref)
            out[m] = np.minimum(ref[m], pred[m] + shift)
    return out


@dataclass
class CgEgaCounts:
    counts: dict = field(default_factory=lambda: {b: {o: 0 for o in OUTCOMES} for b in BANDS})

    def add(self, other: "CgEgaCounts") -> "CgEgaCounts":
        for b in BANDS:
            for o in OUTCOMES:
                self.counts[b][o] += other.counts[b][o]
        return self

    def percentages(self) -> dict:
        """``{band: {AP, BE, EP, n}}`` for occupied bands only."""
        out = {}
        for b in BANDS:
            n = sum(self.counts[b].values())
            if n:
                out[b] = {o: 100.0 * self.counts[b][o] / n for o in OUTCOMES}
                out[b]["n"] = n
        return out


def cg_ega_points(ref, pred, times=None) -> list[dict]:
    """Per-point trace: band, P-zone, R-zone and outcome for every point with a rate."""
    r, p = _pair(ref, pred)
    if r.size < 2:
        raise MetricError("CG-EGA needs at least two consecutive points")
    if times is None:
        ok = np.ones(r.size - 1, dtype=bool)
    else:
        t = np.asarray(times, dtype=np.int64).reshape(-1)
        ok = np.diff(t) == int(STEP_MIN * 60)
    idx = np.nonzero(ok)[0] + 1
    x = (r[idx] - r[idx - 1]) / STEP_MIN
    y = (p[idx] - p[idx - 1]) / STEP_MIN
    pz = clarke_zones(r[idx], _expanded_pred(r[idx], p[idx], x))
    rz = rate_zones(x, y)
    bands = band_of(r[idx])
    combo = tables.combination_table()
    return [
        {"index": int(i), "band": str(b), "p_zone": str(a), "r_zone": str(c),
         "ref_rate": float(xr), "pred_rate": float(yr), "outcome": combo[(str(b), str(a), str(c))]}
        for i, b, a, c, xr, yr in zip(idx, bands, pz, rz, x, y)
    ]


def cg_ega_counts(ref, pred, times=None) -> CgEgaCounts:
    out = CgEgaCounts()
    for pt in cg_ega_points(ref, pred, times):
        out.counts[pt["band"]][pt["outcome"]] += 1
    return out


def cg_ega(ref, pred, times=None) -> dict:
    return cg_ega_counts(ref, pred, times).percentages()
