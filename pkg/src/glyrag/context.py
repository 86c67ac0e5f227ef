"""Window summaries: prompt features, the chat prompt, rule-based text and text embeddings."""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass

import numpy as np

from glyrag import autodiff as ad
from glyrag.autodiff import Tensor

TEXT_DIM = 768
TREND_THRESHOLD = 10.0  # mg/dL change over the last 30 minutes
LOOKBACK = 6  # samples = 30 minutes

# Prompt wording is our own; only the section layout and the injected slots are fixed.
SYSTEM_ROLE = (
    "Act as a clinical assistant for people with type 1 diabetes. You read continuous glucose "
    "monitor traces together with carbohydrate and insulin records and describe where glucose "
    "is heading."
)
USER_TASK = (
    "Below are three hours of sensor glucose sampled every five minutes, plus the meals and "
    "insulin doses logged during the most recent half hour."
)
OUTPUT_REQUIREMENTS = (
    "Write at most five sentences. Cover, in order: how glucose has moved so far; what the recent "
    "carbohydrates and insulin are doing; which way glucose should go over the coming hour "
    "(twelve readings); any hypoglycemia or hyperglycemia risk; and a short remark on active "
    "insulin and carbohydrate.\n"
    "Describe levels and changes in words, without quoting exact numbers."
)


@dataclass(frozen=True)
class WindowSummaryFeatures:
    carbs_30min: float
    bolus_total_30min: float
    bolus_food_30min: float
    bolus_correction_30min: float
    bolus_other_30min: float
    current_bgl: float
    tir_window: float
    trend: str
    max_slope: float = 0.0  # largest |step change| in mg/dL/min over the window


@dataclass(frozen=True)
class ContextSummary:
    text: str
    backend: str  # "rule_based" or "remote"
    window_ref: str = ""

    @property
    def sentence_count(self) -> int:
        return len(split_sentences(self.text))


def split_sentences(text: str) -> list[str]:
    return [s for s in re.split(r"(?<=[.!?])\s+", text.strip()) if s]


def classify_trend(delta: float, threshold: float = TREND_THRESHOLD) -> str:
    if delta > threshold:
        return "rising"
    if delta < -threshold:
        return "falling"
    return "stable"


def extract_prompt_features(window, threshold: float = TREND_THRESHOLD) -> WindowSummaryFeatures:
    """Therapy sums over the final six samples plus level, time-in-range and trend."""
    x = np.asarray(window.x, dtype=np.float64)
    th = window.therapy
    last = slice(-LOOKBACK, None)
    in_range = (x >= 70) & (x <= 180)
    return WindowSummaryFeatures(
        carbs_30min=float(th["carbs"][last].sum()),
        bolus_total_30min=float(th["bolus_total"][last].sum()),
        bolus_food_30min=float(th["bolus_food"][last].sum()),
        bolus_correction_30min=float(th["bolus_correction"][last].sum()),
        bolus_other_30min=float(th["bolus_other"][last].sum()),
        current_bgl=float(x[-1]),
        tir_window=float(100.0 * in_range.mean()),
        trend=classify_trend(float(x[-1] - x[-1 - LOOKBACK]), threshold),
        max_slope=float(np.abs(np.diff(x)).max() / 5.0) if x.size > 1 else 0.0,
    )


def _num(v: float) -> str:
    return f"{v:.1f}"


def build_prompt(features: WindowSummaryFeatures, x) -> tuple[str, str]:
    """Return the ``(system, user)`` messages for one window."""
    summary = ", ".join([
        f"carbs {_num(features.carbs_30min)} g",
        f"bolus total {_num(features.bolus_total_30min)} U",
        f"bolus food {_num(features.bolus_food_30min)} U",
        f"bolus correction {_num(features.bolus_correction_30min)} U",
        f"bolus other {_num(features.bolus_other_30min)} U",
        f"current glucose {_num(features.current_bgl)} mg/dL",
        f"in range {_num(features.tir_window)}%",
        f"trend {features.trend}",
    ])
    history = "|".join(_num(v) for v in np.asarray(x, dtype=np.float64))
    user = (
        f"Task: {USER_TASK}\n\n"
        f"Last 30 minutes: {summary}\n\n"
        f"Glucose history, oldest first (mg/dL): {history}\n\n"
        f"Instructions: {OUTPUT_REQUIREMENTS}"
    )
    return f"Role: {SYSTEM_ROLE}", user


def prompt_text(system: str, user: str) -> str:
    return system + "\n\n" + user


def prompt_key(system: str, user: str) -> str:
    return hashlib.sha256(prompt_text(system, user).encode("utf-8")).hexdigest()


# rule-based summariser -------------------------------------------------------------

def _tir_phrase(tir: float) -> str:
    if tir >= 100.0:
        return "the whole window stayed within the target range"
    if tir >= 70.0:
        return "most of the window stayed within the target range"
    if tir >= 30.0:
        return "only part of the window stayed within the target range"
    return "little of the window stayed within the target range"


def _slope_phrase(slope: float) -> str:
    if slope > 2.0:
        return "rapid"
    if slope >= 1.0:
        return "moderate"
    return "gradual"


def risk_level(f: WindowSummaryFeatures) -> str:
    if f.current_bgl < 90 and f.trend == "falling":
        return "hypo"
    if f.current_bgl > 200 and f.trend == "rising":
        return "hyper"
    return "low"


def summarize_rule_based(features: WindowSummaryFeatures, x=None, window_ref: str = "") -> ContextSummary:
    """Deterministic stand-in for the language-model agent (at most five sentences)."""
    f = features
    carbs = f.carbs_30min > 0
    correction = f.bolus_correction_30min > 0
    other_insulin = (f.bolus_total_30min > 0 or f.bolus_food_30min > 0 or f.bolus_other_30min > 0)
    therapy = carbs or correction or other_insulin

    motion = {"rising": "rising", "falling": "falling", "stable": "stable"}[f.trend]
    sentences = [
        f"Glucose has been {motion} over the last half hour with {_slope_phrase(f.max_slope)} "
        f"changes across the three hours, and {_tir_phrase(f.tir_window)}."
    ]

    if therapy:
        if carbs and correction:
            s = "Recent carbohydrate intake is pushing glucose up while a correction bolus works to bring it down."
        elif carbs and other_insulin:
            s = "Recent carbohydrate intake was covered by a meal bolus, so a moderate rise is expected before insulin takes hold."
        elif carbs:
            s = "Recent carbohydrate intake without matching insulin is likely to push glucose upward."
        elif correction:
            s = "A recent correction bolus should pull glucose downward over the coming hour."
        else:
            s = "Recent insulin delivery without carbohydrate should gradually lower glucose."
        sentences.append(s)

    push_up = carbs and not correction
    push_down = (correction or other_insulin) and not carbs
    if f.trend == "rising":
        direction = "keep rising before levelling off" if push_down else "continue to rise"
    elif f.trend == "falling":
        direction = "keep falling" if not push_up else "slow its fall and turn upward"
    else:
        direction = "drift upward" if push_up else "drift downward" if push_down else "remain stable"
    sentences.append(f"Over the next hour glucose is likely to {direction}.")

    risk = risk_level(f)
    if risk == "hypo":
        sentences.append("There is a meaningful risk of hypoglycemia if the decline continues.")
    elif risk == "hyper":
        sentences.append("There is a meaningful risk of hyperglycemia if the rise continues.")
    else:
        sentences.append("The short-term risk of hypoglycemia or hyperglycemia appears low.")

    if therapy:
        if correction or other_insulin:
            note = "Insulin on board will continue to act for several hours"
        else:
            note = "No insulin is on board to offset the meal"
        note += ", and absorbed carbohydrate should fade within a few hours." if carbs else "."
        sentences.append(note)

    return ContextSummary(" ".join(sentences), "rule_based", window_ref)


# text embedding ------------------------------------------------------------------

_TOKEN = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


def _hash64(token: str) -> int:
    return int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest(), "little")


def embed_text(text: str, dim: int = TEXT_DIM) -> np.ndarray:
    """Signed hashed bag-of-words, scaled to unit Euclidean norm.

    Each token hashes (64-bit BLAKE2b) to bucket ``h mod dim``; the top bit of
    the hash picks the sign.
    """
    tokens = tokenize(text)
    if not tokens:
        raise ValueError("cannot embed empty text")
    v = np.zeros(dim)
    for tok in tokens:
        h = _hash64(tok)
        v[h % dim] += -1.0 if (h >> 63) & 1 else 1.0
    norm = np.linalg.norm(v)
    if norm == 0.0:
        raise ValueError("text embedding cancelled to zero")
    return v / norm


def project_context(raw, w_text: Tensor) -> Tensor:
    """``raw @ w_text``; ``raw`` is ``(dim,)`` or ``(B, dim)``."""
    raw = ad.as_tensor(raw)
    squeeze = raw.ndim == 1
    if squeeze:
        raw = ad.reshape(raw, (1, -1))
    out = ad.matmul(raw, w_text)
    return ad.reshape(out, (w_text.shape[1],)) if squeeze else out
