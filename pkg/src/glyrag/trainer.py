"""Two-stage training: pretrain the encoder, freeze and index it, fine-tune the adapter.

Everything is driven by a :class:`~glyrag.config.TrainConfig`; given the same
config, data and seed every artifact is byte-identical.
"""

from __future__ import annotations

import csv
import io as _io
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from glyrag import autodiff as ad
from glyrag import io, metrics, nn
from glyrag.config import TrainConfig, config_hash, from_dict
from glyrag.context import ContextSummary, embed_text, summarize_rule_based
from glyrag.data import HORIZON_STEPS, SAMPLE_SECONDS, CgmWindow, NormStats, denormalize, normalize
from glyrag.encoder import GlyRAGEncoder, forward_pretrain, last_value_anchor
from glyrag.retrieval import RetrievalAdapter, RetrievalIndex, build_index, embed_inputs, query_batch

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("epoch", "loss_total", "loss_forecast", "loss_trans")
ABLATIONS = (
    ("full", True, True, True),
    ("rag_ca", True, True, False),
    ("rag_ctl", True, False, True),
    ("ca_ctl_no_rag", False, True, True),
    ("bgl_only", False, False, False),
)


class MissingSummaryError(KeyError):
    pass


class StageError(RuntimeError):
    pass


# data assembly -----------------------------------------------------------------

@dataclass
class Arrays:
    """Model-ready arrays aligned with a list of windows."""

    x: np.ndarray  # (n, 36) normalised
    y: np.ndarray  # (n, 12) normalised
    ctx: np.ndarray | None  # (n, text_dim) summary embeddings
    refs: list[str]
    patients: list[str]
    splits: list[str]
    last_times: np.ndarray  # timestamp of the final input sample

    def __len__(self) -> int:
        return len(self.refs)

    def subset(self, idx) -> "Arrays":
        idx = np.asarray(idx, dtype=int)
        return Arrays(self.x[idx], self.y[idx], None if self.ctx is None else self.ctx[idx],
                      [self.refs[i] for i in idx], [self.patients[i] for i in idx],
                      [self.splits[i] for i in idx], self.last_times[idx])


def contextualize(windows: list[CgmWindow], backend: str = "rule", endpoint=None) -> dict[str, ContextSummary]:
    """One summary per window, keyed by window ref."""
    if backend == "rule":
        return {w.ref: summarize_rule_based(w.features, w.x, w.ref) for w in windows}
    if backend == "remote":
        from glyrag.remote import EndpointConfig, summarize_many

        cfg = endpoint or EndpointConfig.from_env()
        out = summarize_many([(w.features, w.x, w.ref) for w in windows], cfg)
        return {s.window_ref: s for s in out}
    raise ValueError(f"unknown backend {backend!r}")


def context_matrix(windows: list[CgmWindow], summaries: dict, dim: int = 768) -> np.ndarray:
    """Stack the text embeddings of each window's summary; embeddings are memoised per text."""
    memo: dict[str, np.ndarray] = {}
    rows = []
    for w in windows:
        s = summaries.get(w.ref)
        if s is None:
            raise MissingSummaryError(f"no summary for window {w.ref}")
        text = s.text if isinstance(s, ContextSummary) else s["text"]
        if text not in memo:
            memo[text] = embed_text(text, dim)
        rows.append(memo[text])
    return np.stack(rows) if rows else np.zeros((0, dim))


def assemble(windows: list[CgmWindow], stats: dict[str, NormStats], summaries: dict | None,
             cfg: TrainConfig) -> Arrays:
    if not windows:
        raise ValueError("no windows")
    x = np.stack([normalize(w.x, stats[w.patient_id]) for w in windows])
    y = np.stack([normalize(w.trajectory, stats[w.patient_id]) for w in windows])
    ctx = None
    if cfg.use_context:
        if summaries is None:
            raise MissingSummaryError("this configuration needs window summaries")
        ctx = context_matrix(windows, summaries, cfg.encoder.text_dim)
    last = np.array([w.start_time + (len(w.x) - 1) * SAMPLE_SECONDS for w in windows], dtype=np.int64)
    return Arrays(x, y, ctx, [w.ref for w in windows], [w.patient_id for w in windows],
                  [w.split for w in windows], last)


def split_validation(patients: list[str], fraction: float) -> tuple[np.ndarray, np.ndarray]:
    """Chronological split: the last ``fraction`` of each patient's windows validates."""
    fit, val = [], []
    by_patient: dict[str, list[int]] = {}
    for i, p in enumerate(patients):
        by_patient.setdefault(p, []).append(i)
    for idx in by_patient.values():
        cut = len(idx) - int(round(len(idx) * fraction))
        fit.extend(idx[:cut])
        val.extend(idx[cut:])
    return np.array(sorted(fit), dtype=int), np.array(sorted(val), dtype=int)


def _batches(n: int, size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for s in range(0, n, size):
        yield perm[s: s + size]


def write_loss_log(rows, path) -> None:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOSS_COLUMNS)
    for r in rows:
        w.writerow([r[0]] + [f"{v:.10g}" for v in r[1:]])
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


# stage 1 ---------------------------------------------------------------------------

def pretrain(data: Arrays, cfg: TrainConfig, epochs: int | None = None,
             steps: int | None = None) -> tuple[GlyRAGEncoder, list[tuple]]:
    """Mini-batch Adam on ``huber + lambda * L_trans``.

    Returns the model and the per-epoch loss log
    ``(epoch, total, forecast, trans)``. ``steps`` caps the number of
    optimiser updates (used by smoke tests).
    """
    if cfg.use_context and data.ctx is None:
        raise MissingSummaryError("summaries required for a context-aware model")
    model = GlyRAGEncoder(cfg)
    model.train()
    opt = nn.Adam(model.parameters(), lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 1])
    epochs = cfg.epochs_pretrain if epochs is None else epochs
    rows, done = [], 0
    for epoch in range(1, epochs + 1):
        sums = np.zeros(3)
        seen = 0
        for b in _batches(len(data), cfg.batch_size, rng):
            opt.zero_grad()
            ctx = None if data.ctx is None else data.ctx[b]
            _, loss = forward_pretrain(model, data.x[b], ctx, data.y[b])
            loss.total.backward()
            opt.step()
            sums += len(b) * np.array([float(loss.total.data), loss.forecast, loss.trans])
            seen += len(b)
            done += 1
            if steps is not None and done >= steps:
                break
        rows.append((epoch, *(sums / seen)))
        if steps is not None and done >= steps:
            break
    model.eval()
    model.zero_grad()
    return model, rows


def pretrain_loss(model: GlyRAGEncoder, data: Arrays) -> float:
    """Full-batch eval-mode total loss."""
    was = model.training
    model.eval()
    with ad.no_grad():
        _, loss = forward_pretrain(model, data.x, data.ctx, data.y)
    model.train(was)
    return float(loss.total.data)


# stage 2 -------------------------------------------------------------------------

def freeze_and_index(model: GlyRAGEncoder, data: Arrays) -> RetrievalIndex:
    before = model.checksum()
    model.eval()
    model.requires_grad_(False)
    index = build_index(model, data.x, data.ctx, data.y, data.refs, data.splits)
    if model.checksum() != before or index.encoder_checksum != before:
        raise StageError("encoder changed while building the index")
    return index


def _anchor(cfg: TrainConfig, x: np.ndarray):
    return last_value_anchor(x, cfg.encoder.horizon) if cfg.encoder.anchor_last else None


def neighbours(model: GlyRAGEncoder, index: RetrievalIndex, data: Arrays, k: int,
               exclude_self: bool) -> tuple[np.ndarray, np.ndarray]:
    """Query embeddings and their neighbour embeddings ``(n, K', d)``."""
    zq = embed_inputs(model, data.x, data.ctx if model.cfg.use_context else None)
    order, _ = query_batch(index, zq, k, data.refs if exclude_self else None)
    return zq, index.z[order]


def finetune_adapter(model: GlyRAGEncoder, index: RetrievalIndex, data: Arrays, cfg: TrainConfig,
                     epochs: int | None = None) -> tuple[RetrievalAdapter, list[tuple]]:
    """Train the retrieval adapter and MLP head with the encoder frozen."""
    if index.encoder_checksum != model.checksum():
        raise io.HashMismatchError("index does not belong to this encoder")
    before = model.checksum()
    model.requires_grad_(False)
    zq, nb = neighbours(model, index, data, cfg.adapter.k, cfg.adapter.exclude_self_finetune)
    adapter = RetrievalAdapter(cfg.encoder.d_model, cfg.adapter, cfg.encoder.horizon,
                               np.random.default_rng([cfg.seed, 3]))
    opt = nn.Adam(adapter.parameters(), lr=cfg.lr)
    anchor = _anchor(cfg, data.x)
    rng = np.random.default_rng([cfg.seed, 2])
    rows = []
    epochs = cfg.epochs_finetune if epochs is None else epochs
    for epoch in range(1, epochs + 1):
        total, seen = 0.0, 0
        for b in _batches(len(data), cfg.batch_size, rng):
            opt.zero_grad()
            pred = adapter(zq[b], nb[b], None if anchor is None else anchor[b])
            loss = ad.huber_loss(pred, data.y[b], cfg.huber_delta)
            loss.backward()
            opt.step()
            total += len(b) * float(loss.data)
            seen += len(b)
        rows.append((epoch, total / seen, total / seen, 0.0))
    if model.checksum() != before:
        raise StageError("encoder parameters changed during adapter fine-tuning")
    adapter.eval()
    adapter.zero_grad()
    return adapter, rows


# inference ---------------------------------------------------------------------------

def predict_normalised(model: GlyRAGEncoder, adapter: RetrievalAdapter | None, index: RetrievalIndex | None,
                       data: Arrays, cfg: TrainConfig, exclude_self: bool | None = None,
                       batch: int = 512) -> np.ndarray:
    model.eval()
    if cfg.use_rag:
        if adapter is None or index is None:
            raise StageError("retrieval model needs an adapter and an index")
        if index.encoder_checksum != model.checksum():
            raise io.HashMismatchError("index does not belong to this encoder")
        ex = cfg.adapter.exclude_self_eval if exclude_self is None else exclude_self
        zq, nb = neighbours(model, index, data, cfg.adapter.k, ex)
        anchor = _anchor(cfg, data.x)
        with ad.no_grad():
            return np.concatenate([
                adapter(zq[s: s + batch], nb[s: s + batch], None if anchor is None else anchor[s: s + batch]).data
                for s in range(0, len(data), batch)
            ])
    out = []
    with ad.no_grad():
        for s in range(0, len(data), batch):
            ctx = None if data.ctx is None else data.ctx[s: s + batch]
            out.append(model(data.x[s: s + batch], ctx).yhat.data)
    return np.concatenate(out)


def to_mgdl(values: np.ndarray, patients: list[str], stats: dict[str, NormStats]) -> np.ndarray:
    return np.stack([denormalize(v, stats[p]) for v, p in zip(values, patients)])


# evaluation -------------------------------------------------------------------------

def _nan_to_none(v):
    if isinstance(v, float) and not np.isfinite(v):
        return None
    if isinstance(v, dict):
        return {k: _nan_to_none(x) for k, x in v.items()}
    if isinstance(v, list):
        return [_nan_to_none(x) for x in v]
    return v


def _block(ref, pred, times_by_patient):
    r = np.concatenate([v[0] for v in times_by_patient.values()]) if ref is None else ref
    p = np.concatenate([v[1] for v in times_by_patient.values()]) if pred is None else pred
    counts = metrics.CgEgaCounts()
    for rr, pp, tt in times_by_patient.values():
        if len(rr) >= 2:
            counts.add(metrics.cg_ega_counts(rr, pp, tt))
    sens_hypo, n_hypo = metrics.event_sensitivity(r, p, "hypo")
    sens_hyper, n_hyper = metrics.event_sensitivity(r, p, "hyper")
    r_pearson = metrics.pearson(r, p)
    return {
        "n": int(len(r)),
        "rmse": metrics.rmse(r, p),
        "mae": metrics.mae(r, p),
        "pearson": r_pearson,
        "pearson_defined": bool(np.isfinite(r_pearson)),
        "clarke": metrics.clarke_report(r, p),
        "cg_ega": counts.percentages(),
        "tir_dev": metrics.tir_deviation(r, p),
        "sens_hypo": sens_hypo,
        "n_hypo": n_hypo,
        "sens_hyper": sens_hyper,
        "n_hyper": n_hyper,
    }


def evaluate(pred_mgdl: np.ndarray, ref_mgdl: np.ndarray, patients: list[str], last_times,
             meta: dict | None = None) -> dict:
    """Metrics at the 5/30/60-minute horizons, per patient and pooled."""
    pred_mgdl = np.asarray(pred_mgdl, dtype=np.float64)
    ref_mgdl = np.asarray(ref_mgdl, dtype=np.float64)
    last_times = np.asarray(last_times, dtype=np.int64)
    blocks = []
    for h in HORIZON_STEPS:
        series = {}
        for pid in sorted(set(patients)):
            idx = np.array([i for i, p in enumerate(patients) if p == pid])
            t = last_times[idx] + h * SAMPLE_SECONDS
            order = np.argsort(t, kind="stable")
            idx, t = idx[order], t[order]
            series[pid] = (ref_mgdl[idx, h - 1], pred_mgdl[idx, h - 1], t)
        per_patient = [{"patient_id": pid, **_block(v[0], v[1], {pid: v})} for pid, v in series.items()]
        pooled = _block(None, None, series)
        blocks.append({"horizon_min": h * 5, "per_patient": per_patient, "pooled": pooled})
    return _nan_to_none({**(meta or {}), "horizons": blocks})


REPORT_CSV_COLUMNS = ("horizon_min", "scope", "n", "rmse", "mae", "pearson", "clarke_A", "clarke_B",
                      "clarke_C", "clarke_D", "clarke_E", "tir_dev", "sens_hypo", "sens_hyper")


def _fmt(v) -> str:
    return "" if v is None else (f"{v:.6f}" if isinstance(v, float) else str(v))


def report_csv(report: dict) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_CSV_COLUMNS)
    for block in report["horizons"]:
        rows = [(p["patient_id"], p) for p in block["per_patient"]] + [("pooled", block["pooled"])]
        for scope, m in rows:
            w.writerow([block["horizon_min"], scope, m["n"], _fmt(m["rmse"]), _fmt(m["mae"]), _fmt(m["pearson"]),
                        *[_fmt(m["clarke"][z]) for z in metrics.ZONES],
                        _fmt(m["tir_dev"]), _fmt(m["sens_hypo"]), _fmt(m["sens_hyper"])])
    return buf.getvalue()


def write_report(report: dict, json_path, csv_path=None) -> None:
    io.write_json(json_path, report)
    if csv_path is not None:
        Path(csv_path).write_text(report_csv(report), encoding="utf-8")


# predictions files -------------------------------------------------------------------

PRED_COLUMNS = ("window_ref", "patient_id", "last_time", *[f"h{i}" for i in range(1, 13)])


def write_predictions(path, refs, patients, last_times, values) -> None:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PRED_COLUMNS)
    for r, p, t, v in zip(refs, patients, last_times, values):
        w.writerow([r, p, int(t), *[f"{x:.4f}" for x in v]])
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_predictions(path) -> tuple[list[str], list[str], np.ndarray, np.ndarray]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise io.ArtifactError(f"missing predictions file {path}") from exc
    rows = list(csv.DictReader(text.splitlines()))
    if not rows or tuple(rows[0]) != PRED_COLUMNS:
        raise io.ArtifactError(f"{path}: expected columns {','.join(PRED_COLUMNS)}")
    refs = [r["window_ref"] for r in rows]
    patients = [r["patient_id"] for r in rows]
    times = np.array([int(r["last_time"]) for r in rows], dtype=np.int64)
    vals = np.array([[float(r[f"h{i}"]) for i in range(1, 13)] for r in rows])
    return refs, patients, times, vals


# bundled run ---------------------------------------------------------------------------

@dataclass
class TrainedRun:
    cfg: TrainConfig
    encoder: GlyRAGEncoder
    stats: dict[str, NormStats]
    index: RetrievalIndex | None = None
    adapter: RetrievalAdapter | None = None
    pretrain_log: list | None = None
    finetune_log: list | None = None
    validation: dict | None = None

    def predict(self, data: Arrays) -> np.ndarray:
        """Denormalised ``(n, 12)`` forecasts in mg/dL."""
        return to_mgdl(predict_normalised(self.encoder, self.adapter, self.index, data, self.cfg),
                       data.patients, self.stats)

    # persistence ------------------------------------------------------------

    def save(self, out_dir) -> dict:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        h = config_hash(self.cfg)
        stats = {p: [s.mean, s.std] for p, s in sorted(self.stats.items())}
        io.save_checkpoint(out / "encoder.ckpt", self.encoder.state_dict(), {
            "config": self.cfg.to_dict(), "config_hash": h, "seed": self.cfg.seed,
            "encoder_checksum": self.encoder.checksum(), "norm_stats": stats,
        })
        files = {"encoder": "encoder.ckpt"}
        if self.pretrain_log is not None:
            write_loss_log(self.pretrain_log, out / "loss_pretrain.csv")
            files["loss_pretrain"] = "loss_pretrain.csv"
        if self.index is not None:
            self.index.meta = {"config_hash": h}
            self.index.save(out / "index.bin")
            files["index"] = "index.bin"
        if self.adapter is not None:
            io.save_checkpoint(out / "adapter.ckpt", self.adapter.state_dict(), {
                "config_hash": h, "seed": self.cfg.seed, "encoder_checksum": self.encoder.checksum(),
            })
            files["adapter"] = "adapter.ckpt"
            write_loss_log(self.finetune_log or [], out / "loss_finetune.csv")
            files["loss_finetune"] = "loss_finetune.csv"
        if self.validation is not None:
            io.write_json(out / "validation.json", _nan_to_none(self.validation))
            files["validation"] = "validation.json"
        return files

    @classmethod
    def load(cls, out_dir) -> "TrainedRun":
        out = Path(out_dir)
        state, meta = io.load_checkpoint(out / "encoder.ckpt")
        cfg = from_dict(meta["config"])
        if config_hash(cfg) != meta["config_hash"]:
            raise io.HashMismatchError("encoder sidecar config does not match its hash")
        enc = GlyRAGEncoder(cfg)
        enc.load_state_dict(state)
        enc.eval()
        enc.requires_grad_(False)
        if enc.checksum() != meta["encoder_checksum"]:
            raise io.HashMismatchError("encoder checksum mismatch")
        stats = {p: NormStats(m, s, "train") for p, (m, s) in meta["norm_stats"].items()}
        run = cls(cfg, enc, stats)
        if cfg.use_rag:
            run.index = RetrievalIndex.load(out / "index.bin", expect_checksum=enc.checksum())
            if run.index.meta.get("config_hash") != meta["config_hash"]:
                raise io.HashMismatchError("index config hash differs from the encoder's")
            a_state, a_meta = io.load_checkpoint(out / "adapter.ckpt")
            if a_meta.get("config_hash") != meta["config_hash"] or a_meta.get("encoder_checksum") != enc.checksum():
                raise io.HashMismatchError("adapter does not belong to this encoder")
            run.adapter = RetrievalAdapter(cfg.encoder.d_model, cfg.adapter, cfg.encoder.horizon,
                                           np.random.default_rng(0))
            run.adapter.load_state_dict(a_state)
            run.adapter.eval()
        return run


def train_pipeline(cfg: TrainConfig, windows: list[CgmWindow], stats: dict[str, NormStats],
                   summaries: dict | None) -> TrainedRun:
    """pretrain -> freeze and index -> fine-tune, with a chronological validation split."""
    data = assemble(windows, stats, summaries, cfg)
    fit_idx, val_idx = split_validation(data.patients, cfg.val_fraction)
    fit = data.subset(fit_idx)
    model, p_log = pretrain(fit, cfg)
    run = TrainedRun(cfg, model, stats, pretrain_log=p_log)
    validation = {"n_fit": len(fit), "n_val": int(len(val_idx))}
    if cfg.use_rag:
        run.index = freeze_and_index(model, fit)
        run.adapter, run.finetune_log = finetune_adapter(model, run.index, fit, cfg)
    if len(val_idx):
        val = data.subset(val_idx)
        ref = to_mgdl(val.y, val.patients, stats)
        head = to_mgdl(predict_normalised(model, None, None, val, cfg.replace(use_rag=False)), val.patients, stats)
        validation["pretrain_head_rmse"] = [metrics.rmse(ref[:, h - 1], head[:, h - 1]) for h in HORIZON_STEPS]
        validation["pretrain_head_rmse_all_steps"] = metrics.rmse(ref, head)
        if cfg.use_rag:
            rag = run.predict(val)
            validation["rag_rmse"] = [metrics.rmse(ref[:, h - 1], rag[:, h - 1]) for h in HORIZON_STEPS]
            validation["rag_rmse_all_steps"] = metrics.rmse(ref, rag)
    run.validation = validation
    return run


def last_value_baseline(data: Arrays, stats: dict[str, NormStats]) -> np.ndarray:
    last = to_mgdl(data.x[:, -1:], data.patients, stats)
    return np.repeat(last, 12, axis=1)


# ablations ---------------------------------------------------------------------------------

ABLATION_COLUMNS = ("config", "rag", "ca", "ctl", "rmse_5", "rmse_30", "rmse_60", "mae_5", "mae_30", "mae_60")


def run_ablation_suite(base_cfg: TrainConfig, train_windows, stats, test_windows, summaries) -> list[dict]:
    """Train and evaluate the five canonical flag combinations with a shared seed."""
    rows = []
    for name, rag, ca, ctl in ABLATIONS:
        cfg = base_cfg.replace(use_rag=rag, use_context_attention=ca, use_translation_loss=ctl)
        need = summaries if cfg.use_context else None
        run = train_pipeline(cfg, train_windows, stats, need)
        test = assemble(test_windows, stats, need, cfg)
        pred = run.predict(test)
        ref = to_mgdl(test.y, test.patients, stats)
        row = {"config": name, "rag": int(rag), "ca": int(ca), "ctl": int(ctl)}
        for h in HORIZON_STEPS:
            row[f"rmse_{h * 5}"] = metrics.rmse(ref[:, h - 1], pred[:, h - 1])
            row[f"mae_{h * 5}"] = metrics.mae(ref[:, h - 1], pred[:, h - 1])
        rows.append(row)
        log.info("ablation %s: rmse_60=%.3f", name, row["rmse_60"])
    return rows


def ablation_csv(rows: list[dict]) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATION_COLUMNS)
    for r in rows:
        w.writerow([r[c] if c in ("config", "rag", "ca", "ctl") else f"{r[c]:.4f}" for c in ABLATION_COLUMNS])
    return buf.getvalue()


def dumps(obj) -> str:
    return json.dumps(_nan_to_none(obj), indent=2, sort_keys=True)
