"""End to end on a synthetic cohort: windows, summaries, training, retrieval and evaluation.

Takes about half a minute on a laptop.
"""

# %%
import numpy as np

from glyrag import data, metrics, trainer
from glyrag.config import toy_config
from glyrag.retrieval import query_top_k
from glyrag.synth import generate_synthetic_cohort, split_chronological

cfg = toy_config(seed=42)
cohort = generate_synthetic_cohort(4, 10, seed=42)
train, test = split_chronological(cohort, cfg.test_fraction)
ws = data.prepare(train, cfg.window_stride)
wt = data.prepare(test, cfg.eval_stride, stats=ws.stats)
print(len(ws.windows), "training windows,", len(wt.windows), "test windows")

# %% each window gets a short text summary of its shape
summaries = trainer.contextualize(ws.windows + wt.windows)
print(summaries[wt.windows[0].ref].text)

# %% pretrain, freeze, index, fine-tune
run = trainer.train_pipeline(cfg, ws.windows, ws.stats, summaries)
print("pretrain loss", [round(float(r[1]), 4) for r in run.pretrain_log[::10]])
print("validation RMSE, head vs retrieval:", np.round(run.validation["pretrain_head_rmse"], 2),
      np.round(run.validation["rag_rmse"], 2))

# %% what does a query retrieve?
test_arr = trainer.assemble(wt.windows, ws.stats, summaries, cfg)
z = run.encoder.embed_windows(test_arr.x[:1], test_arr.ctx[:1])[0]
hit = query_top_k(run.index, z, cfg.adapter.k)
for j, s in zip(hit.indices, hit.similarities):
    print(f"  {run.index.refs[j]:<28} cosine {s:.3f}")

# %% score the held-out split
pred = run.predict(test_arr)
ref = trainer.to_mgdl(test_arr.y, test_arr.patients, ws.stats)
base = trainer.last_value_baseline(test_arr, ws.stats)
for h in (1, 6, 12):
    print(f"{5 * h:>2} min  model {metrics.rmse(ref[:, h - 1], pred[:, h - 1]):6.2f}"
          f"  last value {metrics.rmse(ref[:, h - 1], base[:, h - 1]):6.2f}")
report = trainer.evaluate(pred, ref, test_arr.patients, test_arr.last_times)
print("60-min Clarke:", {k: round(v, 1) for k, v in report["horizons"][2]["pooled"]["clarke"].items()})
