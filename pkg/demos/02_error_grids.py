"""Clinical accuracy on a hand-made trace: Clarke zones, then the point-plus-rate grid."""

# %%
import numpy as np

from glyrag import metrics

t = np.arange(24) * 300  # two hours at 5-minute spacing
ref = 110 + 60 * np.sin(np.linspace(0, 2.2 * np.pi, 24))
lagged = np.concatenate([[ref[0]] * 3, ref[:-3]])  # a forecaster that is 15 minutes late
print("reference range", ref.min().round(1), ref.max().round(1))

# %% point accuracy
print("RMSE", round(metrics.rmse(ref, lagged), 2), "MAE", round(metrics.mae(ref, lagged), 2))
print("Clarke", {k: round(v, 1) for k, v in metrics.clarke_report(ref, lagged).items()})

# %% a lag hurts rates more than values; CG-EGA sees it
for band, row in metrics.cg_ega(ref, lagged, t).items():
    print(f"{band:>5}  AP {row['AP']:5.1f}  BE {row['BE']:5.1f}  EP {row['EP']:5.1f}  n={row['n']}")

# %% one point in detail: a falling hypo reading, prediction 14 mg/dL high
(pt,) = metrics.cg_ega_points([75.0, 60.0], [89.0, 74.0])
print("plain Clarke zone:", metrics.clarke_zone(60, 74))
print("rate-aware zone:", pt["p_zone"], "rate zone:", pt["r_zone"], "->", pt["outcome"])

# %% a missing sample breaks the rate chain rather than inventing a slope
gap_t = t.copy()
gap_t[10:] += 600
print("points scored with a gap:", len(metrics.cg_ega_points(ref, lagged, gap_t)), "of", len(ref) - 1)
