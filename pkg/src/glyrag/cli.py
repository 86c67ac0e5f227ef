"""Command-line entry point: every pipeline stage reads and writes plain files.

Exit codes::

    0  success
    2  bad command-line usage
    3  missing artifact
    4  hash mismatch between artifacts
    5  malformed config
    6  invalid input data
    7  remote backend failure

On failure a single JSON line ``{"error": ..., "exit_code": ..., "message": ...}``
goes to stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from glyrag import data, io, trainer
from glyrag.config import ConfigError, config_hash, from_dict, load_config
from glyrag.context import ContextSummary
from glyrag.synth import generate_synthetic_cohort

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_HASH = 4
EXIT_CONFIG = 5
EXIT_DATA = 6
EXIT_REMOTE = 7

EXIT_CODES_HELP = """exit codes:
  0  success
  2  bad command-line usage
  3  missing artifact
  4  hash mismatch between artifacts
  5  malformed config
  6  invalid input data
  7  remote backend failure
on failure one JSON line {"error", "exit_code", "message"} is written to stderr"""

SUMMARY_STORE_VERSION = 1
STAGES = (("pretrain", "encoder.ckpt"), ("index", "index.bin"), ("finetune", "adapter.ckpt"))

log = logging.getLogger("glyrag")


class CliError(Exception):
    def __init__(self, kind: str, code: int, message: str):
        super().__init__(message)
        self.kind = kind
        self.code = code


# shared plumbing ---------------------------------------------------------------

def _split_series(series, test_fraction: float, split: str):
    """Chronological per-patient split of an ingested cohort file."""
    from glyrag.synth import split_chronological

    train, test = split_chronological(series, test_fraction)
    if split == "train":
        return train
    if split == "test":
        return test
    return [data.PatientSeries(s.patient_id, s.records, split="test") for s in series]


def _ingest(path):
    if not Path(path).exists():
        raise CliError("missing_artifact", EXIT_MISSING, f"missing data file {path}")
    return data.ingest_csv(path)


def _train_windows(cfg, series):
    return data.prepare(_split_series(series, cfg.test_fraction, "train"), cfg.window_stride, cfg.max_gap_steps)


def _eval_windows(cfg, series, stats, split: str):
    return data.prepare(_split_series(series, cfg.test_fraction, split), cfg.eval_stride, cfg.max_gap_steps, stats)


def _load_config(path, overrides=(), seed=None):
    cfg = load_config(path)
    if not overrides and seed is None:
        return cfg
    d = cfg.to_dict()
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not KEY=VALUE")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = d
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"unknown config section {p!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = value
    if seed is not None:
        d["seed"] = seed
    return from_dict(d)


def _text_key(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def write_summary_store(path, summaries: dict[str, ContextSummary]) -> None:
    """``{"texts": {sha256: text}, "windows": {ref: {"text_key", "backend"}}}``."""
    texts, windows = {}, {}
    for ref in sorted(summaries):
        s = summaries[ref]
        k = _text_key(s.text)
        texts[k] = s.text
        windows[ref] = {"text_key": k, "backend": s.backend}
    io.write_json(path, {"version": SUMMARY_STORE_VERSION, "texts": texts, "windows": windows})


def read_summary_store(path) -> dict[str, ContextSummary]:
    store = io.read_json(path)
    if store.get("version") != SUMMARY_STORE_VERSION:
        raise CliError("invalid_data", EXIT_DATA, f"{path}: unsupported summary store version")
    out = {}
    for ref, entry in store["windows"].items():
        text = store["texts"].get(entry["text_key"])
        if text is None or _text_key(text) != entry["text_key"]:
            raise CliError("hash_mismatch", EXIT_HASH, f"{path}: summary text for {ref} fails its content hash")
        out[ref] = ContextSummary(text, entry["backend"], ref)
    return out


def _summaries_for(cfg, path):
    if not cfg.use_context:
        return None
    if path is None:
        raise CliError("missing_artifact", EXIT_MISSING, "this configuration needs --summaries")
    return read_summary_store(path)


def _write_manifest(out: Path, config_path, cfg, done: dict[str, bool]) -> None:
    stages = []
    for name, artifact in STAGES:
        if name in ("index", "finetune") and not cfg.use_rag:
            continue
        complete = done.get(name, False) and (out / artifact).exists()
        stages.append({"stage": name, "artifact": artifact, "complete": complete})
    io.write_json(out / "manifest.json", {
        "config_path": str(config_path),
        "artifact_dir": str(out),
        "config_hash": config_hash(cfg),
        "stages": stages,
    })


# commands ------------------------------------------------------------------------

def cmd_synth(args) -> None:
    data.write_csv(generate_synthetic_cohort(args.patients, args.days, args.seed), args.out)


def cmd_contextualize(args) -> None:
    series = _ingest(args.data)
    windows = data.prepare(series, 1, args.max_gap_steps).windows
    endpoint = None
    if args.backend == "remote":
        from glyrag.remote import EndpointConfig

        endpoint = EndpointConfig.from_env(cache_dir=args.cache_dir, fail_hard=args.fail_hard)
    write_summary_store(args.out, trainer.contextualize(windows, args.backend, endpoint))


def cmd_train(args) -> None:
    cfg = _load_config(args.config, args.set, args.seed)
    series = _ingest(args.data)
    summaries = _summaries_for(cfg, args.summaries)
    ws = _train_windows(cfg, series)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_manifest(out, args.config, cfg, {})
    run = trainer.train_pipeline(cfg, ws.windows, ws.stats, summaries)
    run.save(out)
    _write_manifest(out, args.config, cfg, {name: True for name, _ in STAGES})


def _load_run(run_dir) -> trainer.TrainedRun:
    run_dir = Path(run_dir)
    if not (run_dir / "manifest.json").exists():
        raise CliError("missing_artifact", EXIT_MISSING, f"{run_dir}: no manifest.json")
    manifest = io.read_json(run_dir / "manifest.json")
    pending = [s["stage"] for s in manifest["stages"] if not s["complete"]]
    if pending:
        raise CliError("missing_artifact", EXIT_MISSING, f"{run_dir}: stages not complete: {', '.join(pending)}")
    run = trainer.TrainedRun.load(run_dir)
    if config_hash(run.cfg) != manifest["config_hash"]:
        raise CliError("hash_mismatch", EXIT_HASH, f"{run_dir}: manifest config hash differs from the checkpoint's")
    return run


def cmd_forecast(args) -> None:
    run = _load_run(args.run)
    cfg = run.cfg
    series = _ingest(args.data)
    missing = sorted({s.patient_id for s in series} - set(run.stats))
    if missing:
        raise CliError("invalid_data", EXIT_DATA, f"no training statistics for patient(s) {', '.join(missing)}")
    ws = _eval_windows(cfg, series, run.stats, args.split)
    summaries = _summaries_for(cfg, args.summaries)
    arrays = trainer.assemble(ws.windows, run.stats, summaries, cfg)
    pred = run.predict(arrays)
    trainer.write_predictions(args.out, arrays.refs, arrays.patients, arrays.last_times, pred)
    ref_path = args.references or str(Path(args.out).with_name(Path(args.out).stem + "_references.csv"))
    ref = np.stack([w.trajectory for w in ws.windows])
    trainer.write_predictions(ref_path, arrays.refs, arrays.patients, arrays.last_times, ref)


def _paired(pred_path, ref_path):
    p_refs, patients, times, pred = trainer.read_predictions(pred_path)
    r_refs, _, r_times, ref = trainer.read_predictions(ref_path)
    if p_refs != r_refs or not np.array_equal(times, r_times):
        raise CliError("invalid_data", EXIT_DATA, "predictions and references list different windows")
    return p_refs, patients, times, pred, ref


def cmd_eval(args) -> None:
    _, patients, times, pred, ref = _paired(args.predictions, args.references)
    report = trainer.evaluate(pred, ref, patients, times, {
        "predictions": Path(args.predictions).name, "references": Path(args.references).name,
        "n_windows": int(len(patients)),
    })
    trainer.write_report(report, args.out, args.csv)


def cmd_ablate(args) -> None:
    cfg = _load_config(args.config, args.set, args.seed)
    series = _ingest(args.data)
    ws = _train_windows(cfg, series)
    test = _eval_windows(cfg, series, ws.stats, "test")
    summaries = read_summary_store(args.summaries) if args.summaries else None
    if summaries is None and any(ca or ctl for _, _, ca, ctl in trainer.ABLATIONS):
        raise CliError("missing_artifact", EXIT_MISSING, "the ablation suite needs --summaries")
    rows = trainer.run_ablation_suite(cfg, ws.windows, ws.stats, test.windows, summaries)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(trainer.ablation_csv(rows), encoding="utf-8")


def _svg(times, ref, pred, title: str) -> str:
    w, h, pad = 480, 240, 40
    lo, hi = 40.0, 400.0
    t0, t1 = times[0], times[-1]

    def px(t, v):
        x = pad + (t - t0) / max(t1 - t0, 1) * (w - 2 * pad)
        y = h - pad - (min(max(v, lo), hi) - lo) / (hi - lo) * (h - 2 * pad)
        return f"{x:.1f},{y:.1f}"

    def band(v):
        a, b = px(t0, v), px(t1, v)
        return f'<line x1="{a.split(",")[0]}" y1="{a.split(",")[1]}" x2="{b.split(",")[0]}" y2="{b.split(",")[1]}" ' \
               f'stroke="#999" stroke-dasharray="4 3"/>'

    ref_pts = " ".join(px(t, v) for t, v in zip(times, ref))
    pred_pts = " ".join(px(t, v) for t, v in zip(times, pred))
    return "\n".join([
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<text x="{pad}" y="20" font-family="sans-serif" font-size="12">{title}</text>',
        band(70.0),
        band(180.0),
        f'<polyline points="{ref_pts}" fill="none" stroke="black" stroke-width="1.5"/>',
        f'<polyline points="{pred_pts}" fill="none" stroke="#c0392b" stroke-width="1.5" stroke-dasharray="5 2"/>',
        f'<text x="{w - pad - 110}" y="20" font-family="sans-serif" font-size="11">black: reference</text>',
        f'<text x="{w - pad - 110}" y="34" font-family="sans-serif" font-size="11" fill="#c0392b">'
        "red: forecast</text>",
        "</svg>",
        "",
    ])


def cmd_plot(args) -> None:
    refs, _, times, pred, ref = _paired(args.predictions, args.references)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, wref in enumerate(refs[: args.limit] if args.limit else refs):
        t = [int(times[i]) + 300 * k for k in range(1, 13)]
        minutes = [5 * k for k in range(1, 13)]
        rows = ["time,minutes_ahead,ref,pred,band_low,band_high"]
        rows += [f"{tt},{m},{r:.4f},{p:.4f},70,180" for tt, m, r, p in zip(t, minutes, ref[i], pred[i])]
        stem = wref.replace("@", "_")
        (out / f"{stem}.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
        (out / f"{stem}.svg").write_text(_svg(minutes, ref[i], pred[i], wref), encoding="utf-8")


# argument parsing ------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", EXIT_USAGE, message)


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    p = _Parser(prog="glyrag", description="Retrieval-augmented glucose forecasting pipeline.",
                epilog=EXIT_CODES_HELP, formatter_class=fmt)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, help_text):
        return sub.add_parser(name, help=help_text, description=help_text, epilog=EXIT_CODES_HELP,
                              formatter_class=fmt)

    s = command("synth", "write a synthetic cohort CSV")
    s.add_argument("--patients", type=int, required=True, help="number of patients")
    s.add_argument("--days", type=int, required=True, help="days of data per patient")
    s.add_argument("--seed", type=int, required=True, help="generator seed")
    s.add_argument("--out", required=True, help="output CSV path")
    s.set_defaults(func=cmd_synth)

    c = command("contextualize", "summarize every window of a cohort into a content-addressed store")
    c.add_argument("--data", required=True, help="cohort CSV")
    c.add_argument("--backend", choices=("rule", "remote"), default="rule", help="summary backend")
    c.add_argument("--out", required=True, help="summary store JSON path")
    c.add_argument("--max-gap-steps", type=int, default=6, help="longest gap (samples) filled by interpolation")
    c.add_argument("--cache-dir", default="cache", help="response cache for the remote backend")
    c.add_argument("--fail-hard", action="store_true", help="remote backend: fail instead of falling back to rules")
    c.set_defaults(func=cmd_contextualize)

    def run_flags(q):
        q.add_argument("--config", required=True, help="run configuration JSON")
        q.add_argument("--data", required=True, help="cohort CSV")
        q.add_argument("--summaries", help="summary store from contextualize")
        q.add_argument("--seed", type=int, help="override the configured seed")
        q.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config field (dotted key, JSON value); repeatable")

    t = command("train", "pretrain, freeze and index, then fine-tune the adapter")
    run_flags(t)
    t.add_argument("--out", required=True, help="artifact directory")
    t.set_defaults(func=cmd_train)

    f = command("forecast", "write 12-step forecasts (mg/dL) for every window of a split")
    f.add_argument("--run", required=True, help="artifact directory written by train")
    f.add_argument("--data", required=True, help="cohort CSV")
    f.add_argument("--summaries", help="summary store from contextualize")
    f.add_argument("--split", choices=("test", "train", "all"), default="test", help="which windows to forecast")
    f.add_argument("--out", required=True, help="predictions CSV")
    f.add_argument("--references", help="reference CSV (default: <out>_references.csv)")
    f.set_defaults(func=cmd_forecast)

    e = command("eval", "metrics report from predictions and references")
    e.add_argument("--predictions", required=True, help="predictions CSV")
    e.add_argument("--references", required=True, help="references CSV")
    e.add_argument("--out", required=True, help="report JSON path")
    e.add_argument("--csv", help="optional CSV mirror of the report")
    e.set_defaults(func=cmd_eval)

    a = command("ablate", "train and evaluate the five component ablations")
    run_flags(a)
    a.add_argument("--out", required=True, help="ablation CSV path")
    a.set_defaults(func=cmd_ablate)

    g = command("plot", "per-window plot data (CSV) and SVG renderings")
    g.add_argument("--predictions", required=True, help="predictions CSV")
    g.add_argument("--references", required=True, help="references CSV")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--limit", type=int, default=0, help="only the first N windows (0 = all)")
    g.set_defaults(func=cmd_plot)
    return p


def _classify(exc: BaseException) -> CliError:
    from glyrag.remote import RemoteError

    if isinstance(exc, CliError):
        return exc
    if isinstance(exc, io.HashMismatchError):
        return CliError("hash_mismatch", EXIT_HASH, str(exc))
    if isinstance(exc, (io.ArtifactError, FileNotFoundError)):
        return CliError("missing_artifact", EXIT_MISSING, str(exc))
    if isinstance(exc, ConfigError):
        return CliError("malformed_config", EXIT_CONFIG, str(exc))
    if isinstance(exc, RemoteError):
        return CliError("remote_failure", EXIT_REMOTE, str(exc))
    if isinstance(exc, (data.IngestError, data.DegenerateSeriesError, data.ProvenanceError,
                        trainer.MissingSummaryError, ValueError, KeyError)):
        return CliError("invalid_data", EXIT_DATA, str(exc))
    raise exc


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        args.func(args)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001 - mapped to documented exit codes
        err = _classify(exc)
        print(json.dumps({"error": err.kind, "exit_code": err.code, "message": str(err)}), file=sys.stderr)
        return err.code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
