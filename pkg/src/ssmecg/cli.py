"""``ssmecg`` command-line entry point.

Every command writes its outputs under ``--out`` together with
``config.resolved.toml`` (the merged configuration), ``run.json`` (seed,
tool version, digests of the inputs) and ``log.jsonl``.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .augment import AugmentConfig, compose, window_seed
from .checkpoint import Checkpoint
from .distances import EmbeddingSet, embedding_distance_report
from .metrics import EvalReport, task_metrics
from .network import NetworkConfig
from .preprocess import (HR_MAX_BPM, HR_MIN_BPM, PreprocessConfig, clean, detect_r_peaks,
                         heart_rate_bpm, load_windows, save_windows, segment, zscore_subject)
from .signal_io import (DatasetManifest, EcgRecord, SplitPlan, import_csv, load_manifest,
                        make_splits, quality_gate, save_manifest)
from .synthetic import synth_corpus
from .train import (FinetuneConfig, PretrainConfig, cross_validate, load_backbone, pretrain)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib
import tomli_w

logger = logging.getLogger("ssmecg")


class ConfigError(ValueError):
    pass


# -- configuration -----------------------------------------------------------------


def _fields(cls, drop=()):
    out = {}
    for f in dataclasses.fields(cls):
        if f.name in drop:
            continue
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
        else:
            out[f.name] = f.default_factory()
    return out


def default_config() -> dict:
    """Every recognised key with its default; the file format mirrors this."""
    return {
        "seed": 0,
        "threads": 0,
        "preprocess": {**_fields(PreprocessConfig), "window_mode": "fixed",
                       "quality_gate": True, "quality_threshold": 0.9},
        "augment": _fields(AugmentConfig, drop=("seed",)),
        "model": _fields(NetworkConfig),
        "pretrain": _fields(PretrainConfig, drop=("seed", "augment")),
        "finetune": {**_fields(FinetuneConfig, drop=("seed", "task", "kind", "n_outputs")),
                     "fraction": 1.0, "folds": 5, "split_mode": "subject-agnostic",
                     "val_fraction": 0.2},
        "eval": {"hr_bin_width": 10.0},
    }


def _type_ok(default, value) -> bool:
    if default is None:
        return value is None or isinstance(value, int)
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, (int, float)):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, (tuple, list)):
        return isinstance(value, (tuple, list))
    return isinstance(value, type(default))


def merge_config(base: dict, update: dict, path: str = "") -> dict:
    """Overlay ``update`` on ``base``; unknown keys and wrong types raise ConfigError."""
    out = dict(base)
    for key, value in update.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be a table")
            out[key] = merge_config(base[key], value, where + ".")
        else:
            if not _type_ok(base[key], value):
                raise ConfigError(f"config key {where!r} has invalid value {value!r}")
            out[key] = value
    return out


def load_config(path) -> dict:
    with open(path, "rb") as fh:
        try:
            data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return merge_config(default_config(), data)


def _strip_none(d):
    if isinstance(d, dict):
        return {k: _strip_none(v) for k, v in d.items() if v is not None}
    if isinstance(d, tuple):
        return list(d)
    return d


def _build(section: str, cls, values: dict, **extra):
    names = {f.name for f in dataclasses.fields(cls)}
    try:
        return cls(**{k: v for k, v in values.items() if k in names}, **extra)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config section {section!r}: {exc}") from exc


# -- run bookkeeping -------------------------------------------------------------


class _JsonFormatter(logging.Formatter):
    def format(self, record):
        entry = {"level": record.levelname.lower(), "logger": record.name,
                 "message": record.getMessage()}
        entry.update(getattr(record, "fields", {}))
        return json.dumps(entry, sort_keys=True)


def _setup_logging(out: Path, verbose: bool) -> None:
    root = logging.getLogger()
    for h in list(root.handlers):
        root.removeHandler(h)
        h.close()
    fmt = _JsonFormatter()
    console = logging.StreamHandler(sys.stderr)
    console.setLevel(logging.INFO if verbose else logging.WARNING)
    filelog = logging.FileHandler(out / "log.jsonl", mode="w")
    filelog.setLevel(logging.INFO)
    for h in (console, filelog):
        h.setFormatter(fmt)
        root.addHandler(h)
    root.setLevel(logging.INFO)


def _teardown_logging() -> None:
    root = logging.getLogger()
    for h in list(root.handlers):
        root.removeHandler(h)
        h.close()


def digest_path(path) -> str:
    """SHA-256 over a file, or over every file under a directory in sorted order."""
    path = Path(path)
    h = hashlib.sha256()
    files = [path] if path.is_file() else sorted(p for p in path.rglob("*") if p.is_file())
    for f in files:
        rel = f.name if f == path else f.relative_to(path).as_posix()
        h.update(rel.encode() + b"\0")
        with open(f, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                h.update(chunk)
    return h.hexdigest()


class _MetricsSink:
    """Appends metric records to ``metrics.jsonl`` and mirrors them to the log."""

    def __init__(self, path: Path):
        self.fh = open(path, "w")

    def __call__(self, record: dict) -> None:
        self.fh.write(json.dumps(record, sort_keys=True) + "\n")
        self.fh.flush()
        logger.info("metric", extra={"fields": record})

    def close(self):
        self.fh.close()


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- dataset helpers ---------------------------------------------------------------


def _load_windows_dir(path: Path):
    if not (path / "windows.index.jsonl").is_file():
        raise FileNotFoundError(f"{path} has no windows; run 'preprocess' first")
    windows = load_windows(path)
    meta = json.loads((path / "schema.json").read_text()) if (path / "schema.json").is_file() else {}
    return windows, meta


def _task_info(meta: dict, task: str) -> dict:
    schema = meta.get("task_schema", {})
    if task not in schema:
        raise ConfigError(f"task {task!r} not in dataset schema (known: {sorted(schema)})")
    return schema[task]


def _targets(windows, task: str, kind: str):
    missing = [w.record_id for w in windows if task not in w.labels]
    if missing:
        raise ValueError(f"{len(missing)} windows lack label {task!r}, e.g. {missing[0]}")
    values = [w.labels[task] for w in windows]
    if kind == "classification":
        return np.asarray(values, dtype=np.int64)
    return np.asarray(values, dtype=np.float32)


# -- commands --------------------------------------------------------------------


def cmd_synth(args, cfg, out: Path, inputs: dict):
    manifest = synth_corpus(args.subjects, args.windows_per_subject, seed=cfg["seed"],
                            rate_hz=args.rate, duration_s=args.duration)
    save_manifest(manifest, out)
    logger.info("wrote synthetic corpus", extra={"fields": {
        "records": len(manifest.records), "subjects": len(manifest.subjects)}})


def cmd_import(args, cfg, out: Path, inputs: dict):
    inputs["csv"] = args.from_csv
    labels = json.loads(args.labels) if args.labels else None
    manifest = import_csv(args.from_csv, out, args.record_id, args.subject_id, args.rate,
                          labels=labels, session_tag=args.session_tag)
    logger.info("imported record", extra={"fields": {"record_id": args.record_id,
                                                     "records": len(manifest.records)}})


def cmd_preprocess(args, cfg, out: Path, inputs: dict):
    inputs["manifest"] = args.manifest
    section = cfg["preprocess"]
    pcfg = _build("preprocess", PreprocessConfig, section)
    manifest = load_manifest(args.manifest)
    records = manifest.records
    dropped = []
    if section["quality_gate"]:
        records, dropped = quality_gate(records, section["quality_threshold"])
    if not records:
        raise ValueError("quality gate dropped every record")
    cleaned, groups = {}, {}
    for rec in records:
        cleaned[rec.record_id] = clean(rec.samples, rec.sampling_rate_hz, pcfg)
        groups.setdefault(rec.subject_id, []).append(rec.record_id)
    normed = zscore_subject({s: [cleaned[r] for r in ids] for s, ids in groups.items()})
    for s, ids in groups.items():
        for rid, x in zip(ids, normed[s]):
            cleaned[rid] = x

    windows = []
    for i, rec in enumerate(records):
        x = cleaned[rec.record_id]
        if len(x) < pcfg.window_len:
            logger.info("record shorter than one window", extra={"fields": {"record_id": rec.record_id}})
            continue
        windows.extend(segment(x, pcfg.window_len, section["window_mode"],
                               seed=window_seed(cfg["seed"], i), subject_id=rec.subject_id,
                               record_id=rec.record_id, labels=rec.labels))
    save_windows(windows, out)
    normalized = DatasetManifest(manifest.dataset_name, [
        EcgRecord(r.record_id, r.subject_id, float(pcfg.target_rate_hz), cleaned[r.record_id],
                  r.labels, r.session_tag) for r in records], manifest.task_schema)
    save_manifest(normalized, out / "normalized")
    _write_json(out / "schema.json", {"dataset_name": manifest.dataset_name,
                                      "task_schema": manifest.task_schema,
                                      "rate_hz": pcfg.target_rate_hz,
                                      "window_len": pcfg.window_len})
    _write_json(out / "quality.json", {"kept": [r.record_id for r in records],
                                       "dropped": [r.record_id for r in dropped]})
    logger.info("preprocessed", extra={"fields": {"windows": len(windows), "kept": len(records),
                                                  "dropped": len(dropped)}})


def cmd_augment_preview(args, cfg, out: Path, inputs: dict):
    inputs["manifest"] = args.manifest
    windows, _ = _load_windows_dir(Path(args.manifest))
    acfg = _build("augment", AugmentConfig, cfg["augment"], seed=cfg["seed"])
    n = min(args.count, len(windows))
    before, after = [], []
    with open(out / "preview.jsonl", "w") as fh:
        for i in range(n):
            res = compose(windows[i].values, acfg, seed=window_seed(cfg["seed"], i))
            before.append(windows[i].values)
            after.append(res.values)
            fh.write(json.dumps({
                "row": i, "record_id": windows[i].record_id,
                "target": res.target.astype(int).tolist(),
                "applied": [{"transform": k.name.lower(), "params": p} for k, p in res.applied],
            }, sort_keys=True, default=_json_default) + "\n")
    pairs = np.stack([np.stack(before), np.stack(after)], axis=1) if n else np.zeros((0, 2, 0))
    pairs.astype("<f4").tofile(out / "preview.f32le")
    logger.info("wrote augmentation preview", extra={"fields": {"pairs": n}})


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def _pretrain_sources(path: Path, window_len: int):
    if (path / "normalized" / "manifest.jsonl").is_file():
        sources = [r.samples for r in load_manifest(path / "normalized").records]
        usable = [s for s in sources if len(s) >= window_len]
        if usable:
            return usable
    windows, _ = _load_windows_dir(path)
    return [w.values for w in windows]


def cmd_pretrain(args, cfg, out: Path, inputs: dict):
    inputs["manifest"] = args.manifest
    ncfg = _build("model", NetworkConfig, cfg["model"])
    pcfg = _build("pretrain", PretrainConfig, cfg["pretrain"], seed=cfg["seed"],
                  augment=_build("augment", AugmentConfig, cfg["augment"], seed=cfg["seed"]))
    sources = _pretrain_sources(Path(args.manifest), ncfg.window_len or 1000)
    sink = _MetricsSink(out / "metrics.jsonl")
    try:
        result = pretrain(sources, pcfg, ncfg, metrics_log=sink)
    finally:
        sink.close()
    result.checkpoint.save(out / "pretrain.ckpt")
    logger.info("saved checkpoint", extra={"fields": {"path": "pretrain.ckpt",
                                                      "final_loss": result.history[-1]["loss"]}})


def cmd_finetune(args, cfg, out: Path, inputs: dict):
    inputs["manifest"] = args.manifest
    path = Path(args.manifest)
    windows, meta = _load_windows_dir(path)
    info = _task_info(meta, args.task)
    kind = info["kind"]
    y = _targets(windows, args.task, kind)
    n_outputs = int(info.get("cardinality", 1)) if kind != "regression" else (y.shape[1] if y.ndim > 1 else 1)

    section = cfg["finetune"]
    init = None
    if args.checkpoint:
        inputs["checkpoint"] = args.checkpoint
        init = Checkpoint.load(args.checkpoint)
        ncfg = NetworkConfig(**init.meta["network_config"])
    else:
        ncfg = _build("model", NetworkConfig, cfg["model"])
    fcfg = _build("finetune", FinetuneConfig, section, seed=cfg["seed"], task=args.task,
                  kind=kind, n_outputs=n_outputs)

    manifest_like = DatasetManifest(meta.get("dataset_name", path.name), [
        EcgRecord(rid, sid, 1.0, np.zeros(1)) for rid, sid in
        dict.fromkeys((w.record_id, w.subject_id) for w in windows)])
    plan = make_splits(manifest_like, section["split_mode"], k=section["folds"], seed=cfg["seed"],
                       val_fraction=section["val_fraction"])
    _write_json(out / "splits.json", plan.to_dict())
    rows_of: dict[str, list[int]] = {}
    for i, w in enumerate(windows):
        rows_of.setdefault(w.record_id, []).append(i)

    def rows(ids):
        return np.asarray(sorted(r for rid in ids for r in rows_of[rid]), dtype=int)

    folds = [(rows(f.train), rows(f.validation), rows(f.test)) for f in plan.folds]
    X = np.stack([w.values for w in windows]).astype(np.float32)
    sink = _MetricsSink(out / "metrics.jsonl")
    try:
        results, report = cross_validate(X, y, folds, fcfg, ncfg, init, fraction=section["fraction"],
                                         split_mode=section["split_mode"], metrics_log=sink)
    finally:
        sink.close()
    with open(out / "predictions.jsonl", "w") as fh:
        for f, res in enumerate(results):
            res.checkpoint.save(out / f"fold_{f}.ckpt")
            for row, output in zip(res.test_index, res.outputs):
                fh.write(json.dumps({
                    "fold": f, "row": int(row), "record_id": windows[row].record_id,
                    "subject_id": windows[row].subject_id, "task": args.task, "kind": kind,
                    "n_outputs": n_outputs, "split_mode": section["split_mode"],
                    "target": _json_default(y[row]), "output": [float(v) for v in np.ravel(output)],
                }, sort_keys=True) + "\n")
    (out / "report.json").write_text(report.to_json())
    logger.info(report.summary())


def evaluate_predictions(lines: list[dict], task: str, config: dict | None = None) -> EvalReport:
    """Rebuild per-fold metrics from prediction records of one task."""
    lines = [e for e in lines if e["task"] == task]
    if not lines:
        raise ValueError(f"no predictions for task {task!r}")
    kind, n_outputs = lines[0]["kind"], lines[0]["n_outputs"]
    per_fold = []
    for f in sorted({e["fold"] for e in lines}):
        fold = [e for e in lines if e["fold"] == f]
        y = np.asarray([e["target"] for e in fold])
        outputs = np.asarray([e["output"] for e in fold], dtype=np.float64)
        if kind == "regression" and outputs.shape[1] == 1:
            outputs = outputs[:, 0]
        per_fold.append(task_metrics(kind, y, outputs, n_outputs))
    return EvalReport(task, lines[0]["split_mode"], per_fold, config or {})


def cmd_evaluate(args, cfg, out: Path, inputs: dict):
    inputs["predictions"] = args.predictions
    with open(args.predictions) as fh:
        lines = [json.loads(x) for x in fh if x.strip()]
    report = evaluate_predictions(lines, args.task, {"eval": cfg["eval"]})
    (out / "report.json").write_text(report.to_json())
    logger.info(report.summary())


def cmd_embed(args, cfg, out: Path, inputs: dict):
    inputs["manifest"] = args.manifest
    inputs["checkpoint"] = args.checkpoint
    windows, meta = _load_windows_dir(Path(args.manifest))
    rate = float(meta.get("rate_hz", 100.0))
    backbone = load_backbone(Checkpoint.load(args.checkpoint)).eval()
    X = np.stack([w.values for w in windows]).astype(np.float32)
    with torch.no_grad():
        emb = np.concatenate([backbone(torch.from_numpy(X[s:s + 256])).numpy()
                              for s in range(0, len(X), 256)])
    hr = []
    for w in windows:
        if isinstance(w.labels.get("hr"), (int, float)):
            hr.append(float(w.labels["hr"]))
            continue
        peaks = detect_r_peaks(w.values.astype(np.float64), rate)
        value = heart_rate_bpm(peaks, rate) if len(peaks) >= 2 else None
        hr.append(value if value is not None and HR_MIN_BPM <= value <= HR_MAX_BPM else None)
    EmbeddingSet([w.record_id for w in windows], [w.subject_id for w in windows], emb,
                 [w.labels for w in windows], hr).save(out)
    logger.info("wrote embeddings", extra={"fields": {"rows": len(windows), "dim": emb.shape[1]}})


def cmd_distances(args, cfg, out: Path, inputs: dict):
    inputs["embeddings"] = args.embeddings
    es = EmbeddingSet.load(args.embeddings)
    tasks = sorted({k for lab in es.labels for k in lab if k != "hr"})
    labels = {t: [str(lab.get(t)) for lab in es.labels] for t in tasks}
    hr = es.hr_bpm if any(h is not None for h in es.hr_bpm) else None
    report = embedding_distance_report(es.embeddings, es.subject_ids, labels or None, hr,
                                       hr_bin_width=cfg["eval"]["hr_bin_width"])
    _write_json(out / "distances.json", report)
    logger.info("distance report", extra={"fields": {
        "intra": report["intra_subject"]["mean"], "inter": report["inter_subject"]["mean"],
        "p_value": report["p_value"]}})


COMMANDS = {
    "synth": cmd_synth,
    "import": cmd_import,
    "preprocess": cmd_preprocess,
    "augment-preview": cmd_augment_preview,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "embed": cmd_embed,
    "distances": cmd_distances,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--seed", type=int, help="global seed (overrides config and SSMECG_SEED)")
    common.add_argument("--config", help="TOML configuration file")
    common.add_argument("--threads", type=int, help="cap on torch worker threads")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="ssmecg", description="S4 ECG representation learning")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic labelled corpus")
    p.add_argument("--subjects", type=int, default=10)
    p.add_argument("--windows-per-subject", type=int, default=20)
    p.add_argument("--rate", type=float, default=100.0)
    p.add_argument("--duration", type=float, default=15.0)

    p = sub.add_parser("import", parents=[common], help="import a one-sample-per-line CSV")
    p.add_argument("--from-csv", required=True)
    p.add_argument("--record-id", required=True)
    p.add_argument("--subject-id", required=True)
    p.add_argument("--rate", type=float, required=True)
    p.add_argument("--labels", help="JSON object of labels")
    p.add_argument("--session-tag")

    p = sub.add_parser("preprocess", parents=[common], help="clean, gate, normalise and window")
    p.add_argument("--manifest", required=True)

    p = sub.add_parser("augment-preview", parents=[common], help="write before/after augmentation pairs")
    p.add_argument("--manifest", required=True, help="preprocessed windows directory")
    p.add_argument("--count", type=int, default=16)

    p = sub.add_parser("pretrain", parents=[common], help="transform-prediction pretraining")
    p.add_argument("--manifest", required=True, help="preprocessed windows directory")
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("finetune", parents=[common], help="cross-validated downstream fine-tuning")
    p.add_argument("--manifest", required=True, help="preprocessed windows directory")
    p.add_argument("--task", required=True)
    p.add_argument("--checkpoint", help="pretrained checkpoint; omit for a random backbone")
    p.add_argument("--mode", choices=["full", "full_model", "projector"])
    p.add_argument("--fraction", type=float)
    p.add_argument("--learning-rate", type=float)

    p = sub.add_parser("evaluate", parents=[common], help="build an evaluation report from predictions")
    p.add_argument("--predictions", required=True)
    p.add_argument("--task", required=True)

    p = sub.add_parser("embed", parents=[common], help="embed preprocessed windows")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)

    p = sub.add_parser("distances", parents=[common], help="embedding distance analysis")
    p.add_argument("--embeddings", required=True)
    return parser


def resolve_config(args) -> dict:
    cfg = load_config(args.config) if args.config else default_config()
    overrides = {}
    if getattr(args, "epochs", None) is not None:
        overrides.setdefault("pretrain", {})["epochs"] = args.epochs
    if getattr(args, "mode", None) is not None:
        overrides.setdefault("finetune", {})["mode"] = "full_model" if args.mode == "full" else args.mode
    if getattr(args, "fraction", None) is not None:
        overrides.setdefault("finetune", {})["fraction"] = args.fraction
    if getattr(args, "learning_rate", None) is not None:
        overrides.setdefault("finetune", {})["learning_rate"] = args.learning_rate
    if args.threads is not None:
        overrides["threads"] = args.threads
    cfg = merge_config(cfg, overrides)
    if args.seed is not None:
        cfg["seed"] = args.seed
    elif not (args.config and "seed" in _raw_keys(args.config)) and "SSMECG_SEED" in os.environ:
        try:
            cfg["seed"] = int(os.environ["SSMECG_SEED"])
        except ValueError as exc:
            raise ConfigError(f"SSMECG_SEED must be an integer, got {os.environ['SSMECG_SEED']!r}") from exc
    return cfg


def _raw_keys(path) -> set:
    with open(path, "rb") as fh:
        return set(tomllib.load(fh))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _setup_logging(out, args.verbose)
        if cfg["threads"] > 0:
            torch.set_num_threads(cfg["threads"])
        inputs: dict[str, str] = {}
        COMMANDS[args.command](args, cfg, out, inputs)
        (out / "config.resolved.toml").write_text(tomli_w.dumps(_strip_none(cfg)))
        _write_json(out / "run.json", {
            "command": args.command,
            "seed": cfg["seed"],
            "version": __version__,
            "inputs": {k: {"name": Path(v).name, "sha256": digest_path(v)} for k, v in sorted(inputs.items())},
        })
        return 0
    except Exception as exc:  # noqa: BLE001 - top-level reporter
        logger.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    finally:
        _teardown_logging()


if __name__ == "__main__":
    sys.exit(main())
