"""Synthetic type-1 diabetes CGM cohorts.

The generator superimposes, on a per-patient basal level, carbohydrate
excursions, meal and correction insulin effects, slow drift, occasional
overnight dips and sensor noise. All constants live in :data:`CONSTANTS`
(mirrored in the README table).
"""

from __future__ import annotations

import numpy as np

from glyrag.data import SAMPLE_SECONDS, CgmRecord, PatientSeries

EPOCH = 1_704_067_200  # 2024-01-01T00:00:00Z
STEPS_PER_DAY = 86_400 // SAMPLE_SECONDS

CONSTANTS = {
    "basal_range": (110.0, 150.0),  # mg/dL, uniform per patient
    "meal_hours": (7.5, 12.5, 18.5),  # nominal meal times
    "meal_jitter_min": 30.0,  # std of meal-time jitter
    "meal_archetypes": 3,  # distinct carb/timing profiles per patient
    "carb_range": (30.0, 90.0),  # grams
    "carb_gain": (2.6, 3.6),  # peak mg/dL per gram, per patient
    "meal_peak_min": (35.0, 55.0),  # time-to-peak of excursion
    "bolus_coverage": (0.25, 0.45),  # fraction of a meal covered by the food bolus
    "carb_ratio": 10.0,  # grams per unit
    "insulin_peak_min": 75.0,
    "correction_threshold": 250.0,  # mg/dL
    "correction_drop": 70.0,  # peak mg/dL lowering of a correction bolus
    "correction_units": 2.0,
    "correction_refractory_min": 180.0,
    "dip_probability": 0.4,  # per night
    "dip_nadir": (48.0, 62.0),  # mg/dL reached at the bottom of a dip
    "drift_sd": 1.2,  # AR(1) innovation, mg/dL per step
    "drift_phi": 0.985,
    "noise_sd": 5.0,  # sensor noise
    "clamp": (40.0, 400.0),
}


def _kernel(peak_min: float, steps: int) -> np.ndarray:
    """Gamma-like response ``(t/p) exp(1 - t/p)``: rises to 1 at ``p`` then decays."""
    t = np.arange(steps) * SAMPLE_SECONDS / 60.0
    u = t / peak_min
    return u * np.exp(1.0 - u)


def _simulate(rng: np.random.Generator, days: int):
    c = CONSTANTS
    n = days * STEPS_PER_DAY
    basal = rng.uniform(*c["basal_range"])
    gain = rng.uniform(*c["carb_gain"])
    coverage = rng.uniform(*c["bolus_coverage"])
    meal_peak = rng.uniform(*c["meal_peak_min"])
    span = int(6 * 60 / 5)
    meal_k = _kernel(meal_peak, span)
    ins_k = _kernel(c["insulin_peak_min"], span)

    # a few recurring meal archetypes give the cohort repeated regimes
    archetypes = [
        (rng.uniform(*c["carb_range"]), rng.normal(0.0, c["meal_jitter_min"]))
        for _ in range(c["meal_archetypes"])
    ]

    drift = np.zeros(n)
    eps = rng.normal(0.0, c["drift_sd"], size=n)
    for t in range(1, n):
        drift[t] = c["drift_phi"] * drift[t - 1] + eps[t]

    effect = np.zeros(n + span)
    carbs = np.zeros(n)
    bolus_food = np.zeros(n)
    bolus_corr = np.zeros(n)
    for day in range(days):
        for hour in c["meal_hours"]:
            grams, offset = archetypes[rng.integers(len(archetypes))]
            grams *= rng.uniform(0.85, 1.15)
            minute = hour * 60 + offset + rng.normal(0.0, 10.0)
            k = day * STEPS_PER_DAY + int(round(minute / 5))
            if not 0 <= k < n:
                continue
            carbs[k] += round(grams)
            effect[k: k + span] += gain * grams * meal_k
            units = round(grams / c["carb_ratio"], 1)
            bolus_food[k] += units
            effect[k: k + span] -= coverage * gain * grams * ins_k

        if rng.random() < c["dip_probability"]:
            k = day * STEPS_PER_DAY + int(rng.uniform(1.0, 4.5) * 12)
            drift_at_night = drift[min(k + 12, n - 1)] + effect[k + 12]
            depth = basal + drift_at_night - rng.uniform(*c["dip_nadir"])
            effect[k: k + span] -= max(depth, 0.0) * _kernel(60.0, span)

    glucose = np.zeros(n)
    refractory = int(c["correction_refractory_min"] / 5)
    last_corr = -refractory
    for t in range(n):
        g = basal + drift[t] + effect[t]
        if g > c["correction_threshold"] and t - last_corr >= refractory:
            bolus_corr[t] += c["correction_units"]
            effect[t: t + span] -= c["correction_drop"] * ins_k
            last_corr = t
        glucose[t] = g
    glucose += rng.normal(0.0, c["noise_sd"], size=n)
    glucose = np.clip(glucose, *c["clamp"])
    return glucose, carbs, bolus_food, bolus_corr


def generate_synthetic_cohort(n_patients: int, days: int, seed: int) -> list[PatientSeries]:
    """Deterministic synthetic cohort: ``n_patients`` series of ``days`` days each."""
    if n_patients < 1 or days < 1:
        raise ValueError("n_patients and days must be >= 1")
    root = np.random.default_rng(seed)
    child_seeds = root.integers(0, 2**63 - 1, size=n_patients)
    cohort = []
    for p in range(n_patients):
        rng = np.random.default_rng(int(child_seeds[p]))
        glucose, carbs, food, corr = _simulate(rng, days)
        records = []
        for t in range(glucose.size):
            minute_of_day = (t % STEPS_PER_DAY) * 5
            mode = "sleep" if minute_of_day < 6 * 60 or minute_of_day >= 23 * 60 else "regular"
            total = food[t] + corr[t]
            records.append(CgmRecord(
                timestamp=EPOCH + t * SAMPLE_SECONDS,
                glucose=round(float(glucose[t]), 1),
                carbs=float(carbs[t]),
                bolus_total=round(float(total), 1),
                bolus_food=float(food[t]),
                bolus_correction=float(corr[t]),
                bolus_other=0.0,
                device_mode=mode,
            ))
        cohort.append(PatientSeries(f"synth{p:03d}", records))
    return cohort


def split_chronological(cohort: list[PatientSeries], test_fraction: float = 0.2):
    """Split each series in time: the last ``test_fraction`` becomes the test split."""
    train, test = [], []
    for s in cohort:
        cut = int(round(len(s.records) * (1.0 - test_fraction)))
        train.append(PatientSeries(s.patient_id, s.records[:cut], split="train"))
        test.append(PatientSeries(s.patient_id, s.records[cut:], split="test"))
    return train, test
