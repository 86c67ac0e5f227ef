"""CGM ingestion, gap imputation, windowing and per-patient normalisation."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SAMPLE_SECONDS = 300
HISTORY = 36
HORIZON = 12
HORIZON_STEPS = (1, 6, 12)
DEVICE_MODES = ("regular", "sleep", "exercise", "unknown")
CSV_COLUMNS = (
    "patient_id",
    "timestamp",
    "glucose_mg_dl",
    "carbs_g",
    "bolus_total_u",
    "bolus_food_u",
    "bolus_correction_u",
    "bolus_other_u",
    "device_mode",
)
REQUIRED_COLUMNS = CSV_COLUMNS[:3]
THERAPY_FIELDS = ("carbs", "bolus_total", "bolus_food", "bolus_correction", "bolus_other")


class IngestError(ValueError):
    def __init__(self, message: str, row: int | None = None):
        super().__init__(message)
        self.row = row


class DegenerateSeriesError(ValueError):
    pass


class ProvenanceError(RuntimeError):
    """Raised when test-split data leaks into a train-only step."""


@dataclass(frozen=True)
class CgmRecord:
    timestamp: int
    glucose: float | None  # None marks a missing reading awaiting imputation
    carbs: float = 0.0
    bolus_total: float = 0.0
    bolus_food: float = 0.0
    bolus_correction: float = 0.0
    bolus_other: float = 0.0
    device_mode: str = "unknown"


@dataclass(frozen=True)
class NormStats:
    mean: float
    std: float
    split: str = "train"

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std, "split": self.split}


@dataclass
class PatientSeries:
    patient_id: str
    records: list[CgmRecord]
    split: str = "train"
    norm_stats: NormStats | None = None
    # (start, stop) record index ranges of gap-free segments; None until imputed
    segments: list[tuple[int, int]] | None = None

    def glucose(self) -> np.ndarray:
        return np.array([np.nan if r.glucose is None else r.glucose for r in self.records])


@dataclass
class CgmWindow:
    patient_id: str
    start_time: int
    x: np.ndarray
    trajectory: np.ndarray
    therapy: dict[str, np.ndarray]
    split: str = "train"
    segment: int = 0

    @property
    def targets(self) -> dict[int, float]:
        return {h: float(self.trajectory[h - 1]) for h in HORIZON_STEPS}

    @property
    def trajectory_12(self) -> np.ndarray:
        return self.trajectory

    @property
    def ref(self) -> str:
        return f"{self.patient_id}@{self.start_time}"

    @cached_property
    def features(self):
        from glyrag.context import extract_prompt_features

        return extract_prompt_features(self)


# CSV ---------------------------------------------------------------------------

def _parse_float(text: str, what: str, row: int, default: float | None = 0.0) -> float | None:
    text = text.strip() if text is not None else ""
    if text == "":
        return default
    try:
        value = float(text)
    except ValueError:
        raise IngestError(f"row {row}: non-numeric {what} {text!r}", row) from None
    if not math.isfinite(value):
        raise IngestError(f"row {row}: non-numeric {what} {text!r}", row)
    return value


def ingest_csv(path: str | Path, split: str = "train") -> list[PatientSeries]:
    """Read a cohort CSV into one sorted :class:`PatientSeries` per patient.

    Rows are numbered from 1 (the first data row after the header). An empty
    glucose cell is a missing reading; any other unparsable or non-positive
    value is rejected.
    """
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    path = Path(path)
    by_patient: dict[str, list[CgmRecord]] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in REQUIRED_COLUMNS if c not in header]
        if missing:
            raise IngestError(f"missing required column(s): {', '.join(missing)}")
        unknown = [c for c in header if c not in CSV_COLUMNS]
        if unknown:
            raise IngestError(f"unknown column(s): {', '.join(unknown)}")
        for row_no, row in enumerate(reader, start=1):
            pid = (row.get("patient_id") or "").strip()
            if not pid:
                raise IngestError(f"row {row_no}: empty patient_id", row_no)
            ts = _parse_float(row.get("timestamp"), "timestamp", row_no, default=None)
            if ts is None:
                raise IngestError(f"row {row_no}: empty timestamp", row_no)
            glucose = _parse_float(row.get("glucose_mg_dl"), "glucose", row_no, default=None)
            if glucose is not None and glucose <= 0:
                raise IngestError(f"row {row_no}: glucose must be positive, got {glucose}", row_no)
            mode = (row.get("device_mode") or "").strip() or "unknown"
            if mode not in DEVICE_MODES:
                raise IngestError(f"row {row_no}: unknown device_mode {mode!r}", row_no)
            therapy = {}
            for name, col in zip(THERAPY_FIELDS, CSV_COLUMNS[3:8]):
                v = _parse_float(row.get(col), col, row_no)
                if v < 0:
                    raise IngestError(f"row {row_no}: negative {col}", row_no)
                therapy[name] = v
            records = by_patient.setdefault(pid, [])
            if records and ts <= records[-1].timestamp:
                raise IngestError(f"row {row_no}: non-monotone timestamp for patient {pid}", row_no)
            records.append(CgmRecord(int(ts), glucose, device_mode=mode, **therapy))
    return [PatientSeries(pid, recs, split=split) for pid, recs in by_patient.items()]


def _fmt(v: float) -> str:
    return repr(float(v)) if v != int(v) else str(int(v))


def write_csv(series: Iterable[PatientSeries], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for s in series:
            for r in s.records:
                w.writerow([
                    s.patient_id,
                    r.timestamp,
                    "" if r.glucose is None else _fmt(round(r.glucose, 4)),
                    *(_fmt(round(getattr(r, f), 4)) for f in THERAPY_FIELDS),
                    r.device_mode,
                ])


# imputation and windowing --------------------------------------------------------

def impute_gaps(series: PatientSeries, max_gap_steps: int = 6) -> PatientSeries:
    """Place records on the 5-minute grid and fill short gaps.

    Interior gaps of at most ``max_gap_steps`` missing samples are filled by
    linear interpolation; short leading/trailing gaps take the nearest
    value. Longer gaps split the series into separate segments.
    """
    recs = sorted(series.records, key=lambda r: r.timestamp)
    if not recs:
        return replace(series, records=[], segments=[])
    t0 = recs[0].timestamp
    idx = [int(round((r.timestamp - t0) / SAMPLE_SECONDS)) for r in recs]
    n = idx[-1] + 1
    glucose = np.full(n, np.nan)
    therapy = {f: np.zeros(n) for f in THERAPY_FIELDS}
    modes = ["unknown"] * n
    for k, r in zip(idx, recs):
        if r.glucose is not None and np.isnan(glucose[k]):
            glucose[k] = r.glucose
        for f in THERAPY_FIELDS:
            therapy[f][k] += getattr(r, f)
        modes[k] = r.device_mode

    valid = ~np.isnan(glucose)
    filled = glucose.copy()
    keep = valid.copy()
    # walk runs of missing samples
    k = 0
    while k < n:
        if valid[k]:
            k += 1
            continue
        j = k
        while j < n and not valid[j]:
            j += 1
        run = j - k
        if run <= max_gap_steps:
            if k > 0 and j < n:
                left, right = glucose[k - 1], glucose[j]
                for m in range(k, j):
                    filled[m] = left + (right - left) * (m - k + 1) / (run + 1)
                keep[k:j] = True
            elif k == 0 and j < n:
                filled[k:j] = glucose[j]
                keep[k:j] = True
            elif j == n and k > 0:
                filled[k:j] = glucose[k - 1]
                keep[k:j] = True
        k = j

    carried, last = [], modes[0]
    for m in modes:
        last = m if m != "unknown" else last
        carried.append(last)

    out: list[CgmRecord] = []
    segments: list[tuple[int, int]] = []
    start = None
    for k in range(n):
        if keep[k]:
            if start is None:
                start = len(out)
            out.append(CgmRecord(
                t0 + k * SAMPLE_SECONDS, float(filled[k]),
                **{f: float(therapy[f][k]) for f in THERAPY_FIELDS}, device_mode=carried[k],
            ))
        elif start is not None:
            segments.append((start, len(out)))
            start = None
    if start is not None:
        segments.append((start, len(out)))
    return replace(series, records=out, segments=segments)


def make_windows(series: PatientSeries, stride: int = 1, history: int = HISTORY,
                 horizon: int = HORIZON) -> list[CgmWindow]:
    """Slide a ``history + horizon`` window over each gap-free segment."""
    if series.segments is None:
        raise ValueError("series must be imputed before windowing")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    g = series.glucose()
    times = np.array([r.timestamp for r in series.records], dtype=np.int64)
    ther = {f: np.array([getattr(r, f) for r in series.records]) for f in THERAPY_FIELDS}
    windows = []
    for seg_no, (a, b) in enumerate(series.segments):
        for s in range(a, b - history - horizon + 1, stride):
            windows.append(CgmWindow(
                patient_id=series.patient_id,
                start_time=int(times[s]),
                x=g[s: s + history].copy(),
                trajectory=g[s + history: s + history + horizon].copy(),
                therapy={f: v[s: s + history].copy() for f, v in ther.items()},
                split=series.split,
                segment=seg_no,
            ))
    return windows


# normalisation -------------------------------------------------------------------

def fit_norm(series: PatientSeries) -> NormStats:
    """Population mean/std of one patient's training glucose."""
    if series.split != "train":
        raise ProvenanceError(f"normalisation must be fit on training data, got split={series.split!r}")
    g = series.glucose()
    g = g[~np.isnan(g)]
    if g.size == 0:
        raise DegenerateSeriesError(f"patient {series.patient_id}: no glucose readings")
    std = float(g.std())
    if std == 0.0:
        raise DegenerateSeriesError(f"patient {series.patient_id}: constant glucose series")
    return NormStats(float(g.mean()), std, "train")


def _check_stats(stats: NormStats) -> None:
    if stats.split != "train":
        raise ProvenanceError("normalisation statistics must come from the training split")


def normalize(x, stats: NormStats) -> np.ndarray:
    _check_stats(stats)
    return (np.asarray(x, dtype=np.float64) - stats.mean) / stats.std


def denormalize(z, stats: NormStats) -> np.ndarray:
    _check_stats(stats)
    return np.asarray(z, dtype=np.float64) * stats.std + stats.mean


@dataclass
class WindowSet:
    """Windows plus the train-split statistics used to normalise them."""

    windows: list[CgmWindow]
    stats: dict[str, NormStats] = field(default_factory=dict)

    def inputs(self) -> np.ndarray:
        return np.stack([normalize(w.x, self.stats[w.patient_id]) for w in self.windows])

    def targets(self) -> np.ndarray:
        return np.stack([normalize(w.trajectory, self.stats[w.patient_id]) for w in self.windows])


def prepare(series: Sequence[PatientSeries], stride: int = 1, max_gap_steps: int = 6,
            stats: dict[str, NormStats] | None = None) -> WindowSet:
    """Impute, window and attach normalisation statistics.

    With ``stats`` omitted the series must be training data and statistics
    are fitted here; test data must pass the training statistics in.
    """
    fitted = dict(stats or {})
    windows: list[CgmWindow] = []
    for s in series:
        imputed = impute_gaps(s, max_gap_steps)
        if stats is None:
            fitted[s.patient_id] = fit_norm(imputed)
        elif s.patient_id not in fitted:
            raise KeyError(f"no training statistics for patient {s.patient_id}")
        imputed.norm_stats = fitted[s.patient_id]
        windows.extend(make_windows(imputed, stride))
    return WindowSet(windows, fitted)
