"""Command-line entry point.

Subcommands: extract (feature caches), rq1 (transform comparison), rq2
(model/size grid), train (single run), eval (checkpoint on test splits),
infer-file (whole-file cut timeline), report (render figures from artifacts).

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .adversarial import adversarial_from_bytes, predict_classes, save_adversarial
from .config import (
    ExperimentConfig,
    default_config,
    feature_config,
    load_config,
    parse_spec_string,
    split_ratios,
    synth_spec,
    train_config,
    transform_spec,
)
from .dataset import (
    INTERVAL_HEADER,
    cache_path_for,
    label_frames,
    load_domain,
    read_interval_csv,
    read_manifest,
    split,
    synth_domains,
)
from .errors import ConfigError, DataError, DomainShiftError, FormatError
from .features import (
    TRANSFORM_KINDS,
    FeatureConfig,
    TransformSpec,
    TransformStats,
    apply_transform,
    extract_file,
    fit_transform_stats,
    write_feature_cache,
)
from .nn import checkpoint_from_bytes, forward, save_checkpoint, set_mode
from .report import render_report
from .train import (
    MODEL_KINDS,
    evaluate,
    run_grid,
    train_model,
    train_probe,
    write_grid_json,
    write_history_jsonl,
    write_runs_csv,
)


@dataclass
class TimelinePrediction:
    frames: np.ndarray  # (n_frames,) predicted 0/1
    intervals: list  # merged (start_s, end_s), sorted, non-overlapping
    audio_path: str
    checkpoint_id: str


def intervals_from_frames(pred, frame_times, hop_duration: float,
                          min_duration: float = 0.0) -> list:
    """Merge runs of predicted 1s into [start, end) second intervals.

    Interval ends reuse the next frame's timestamp so that labeling the
    emitted intervals reproduces the prediction vector exactly; only the
    final frame extrapolates by one hop. Intervals shorter than
    min_duration are dropped (default keeps everything).
    """
    pred = np.asarray(pred)
    out = []
    i, n = 0, pred.size
    while i < n:
        if pred[i] != 1:
            i += 1
            continue
        j = i
        while j + 1 < n and pred[j + 1] == 1:
            j += 1
        start = float(frame_times[i])
        end = float(frame_times[j + 1]) if j + 1 < n else float(frame_times[j]) + hop_duration
        if end - start >= min_duration:
            out.append((start, end))
        i = j + 1
    return out


def _worker_count() -> int:
    env = os.environ.get("DOMAINSHIFT_THREADS", "").strip()
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"DOMAINSHIFT_THREADS must be an integer, got {env!r}")
        if n < 1:
            raise ConfigError(f"DOMAINSHIFT_THREADS must be >= 1, got {n}")
        return n
    return min(8, os.cpu_count() or 1)


def _load_config_arg(args) -> ExperimentConfig:
    if getattr(args, "config", None):
        cfg = load_config(args.config)
        if cfg.defaulted:
            print(f"notice: {len(cfg.defaulted)} config keys defaulted",
                  file=sys.stderr)
    else:
        cfg = default_config()
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["train.seed"] = args.seed
        overrides["grid.base_seed"] = args.seed
    if getattr(args, "out", None):
        overrides["out.dir"] = str(args.out)
    return cfg.with_overrides(overrides) if overrides else cfg


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg["out.dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _apply_affine(ds, scale: float, offset: float):
    if scale == 1.0 and offset == 0.0:
        return ds
    return replace(ds, features=ds.features * scale + offset)


def _prepare_raw(cfg: ExperimentConfig, synthetic: str | None,
                 need_target: bool = True):
    """Split source/target datasets before any feature transform."""
    ratios = split_ratios(cfg)
    split_seed = cfg["data.split_seed"]
    if synthetic is not None:
        synth_keys = {k: v for k, v in cfg.values.items() if k.startswith("synth.")}
        cfg = cfg.with_overrides(parse_spec_string(synthetic, synth_keys))
        src, tgt, bayes = synth_domains(synth_spec(cfg))
        scale, offset = cfg["synth.distort_scale"], cfg["synth.distort_offset"]
        src = _apply_affine(src, scale, offset)
        tgt = _apply_affine(tgt, scale, offset)
        note = (f"synthetic data: {len(src)} source / {len(tgt)} target rows, "
                f"bayes accuracy {bayes:.4f}")
    else:
        if not cfg["data.manifest"]:
            raise ConfigError("no data: set data.manifest in the config or pass --synthetic")
        manifest = read_manifest(cfg["data.manifest"])
        fc = feature_config(cfg)
        cache = cfg["data.cache_dir"] or None
        src = load_domain(manifest, "source", fc, cache)
        if need_target or manifest.domain_entries("target"):
            tgt = load_domain(manifest, "target", fc, cache)
        else:
            tgt = None
        note = (f"manifest data: {len(src)} source frames, "
                f"{len(tgt) if tgt is not None else 0} target frames")
    src = split(src, ratios, seed=split_seed)
    if tgt is not None:
        tgt = split(tgt, ratios, seed=split_seed + 1)
    return src, tgt, note


def _fit_stats(src, tspec: TransformSpec) -> TransformStats | None:
    # stats come from the data-rich domain's train split and are reused
    # everywhere (target, validation, later inference) for one consistent map
    return fit_transform_stats(src.arrays("train")[0]) if tspec.needs_stats else None


def _transform_pair(src, tgt, tspec: TransformSpec, stats: TransformStats | None):
    if tspec.kind == "idx":
        return src, tgt
    src = replace(src, features=apply_transform(src.features, tspec, stats))
    if tgt is not None:
        tgt = replace(tgt, features=apply_transform(tgt.features, tspec, stats))
    return src, tgt


def _checkpoint_extra(tcfg, tspec, stats, cfg) -> dict:
    fc = feature_config(cfg)
    return {
        "kind": tcfg.model,
        "features": {"sample_rate": fc.sample_rate, "n_fft": fc.n_fft,
                     "hop": fc.hop, "window": fc.window, "db_floor": fc.db_floor},
        "transform": {"kind": tspec.kind, "gamma": tspec.gamma},
        "stats": ({"x_min": stats.x_min, "x_max": stats.x_max}
                  if stats is not None else None),
        "infer_domain": cfg["infer.domain"],
    }


def _load_any_checkpoint(path):
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}")
    magic = raw[:4]
    if magic == b"DSCA":
        net, extra = adversarial_from_bytes(raw, origin=str(path))
        return net, extra, "adversarial"
    if magic == b"DSCK":
        net, extra = checkpoint_from_bytes(raw, origin=str(path))
        return net, extra, "vanilla"
    raise FormatError(f"{path}: not a recognized checkpoint (magic {magic!r})")


# ---------------------------------------------------------------------------
# Subcommands.
# ---------------------------------------------------------------------------


def cmd_extract(args) -> int:
    cfg = _load_config_arg(args)
    if not cfg["data.manifest"]:
        raise ConfigError("extract needs data.manifest in the config")
    manifest = read_manifest(cfg["data.manifest"])
    fc = feature_config(cfg)
    cache_dir = Path(args.out or cfg["data.cache_dir"] or cfg["out.dir"])
    cache_dir.mkdir(parents=True, exist_ok=True)

    def job(entry):
        out = cache_path_for(entry, cache_dir)
        if out.exists() and not args.force:
            return "skipped", 0, None
        fs = extract_file(entry.path, fc)
        write_feature_cache(out, fs)
        counts = None
        if entry.labels is not None:
            table = read_interval_csv(entry.labels)
            y = label_frames(fs.frame_times, table.get(entry.path.name, []))
            counts = (int(y.sum()), int(y.size - y.sum()))
        return "written", fs.features.shape[0], counts

    with ThreadPoolExecutor(max_workers=_worker_count()) as pool:
        futures = [pool.submit(job, e) for e in manifest.entries]
        failures = written = 0
        for entry, fut in zip(manifest.entries, futures):
            try:
                status, n_frames, counts = fut.result()
            except Exception as exc:  # report per-file, keep going
                failures += 1
                print(f"{entry.path.name}: failed: {exc}")
                continue
            if status == "skipped":
                print(f"{entry.path.name}: cache exists, skipped (--force to redo)")
            elif counts is not None:
                print(f"{entry.path.name}: {n_frames} frames, "
                      f"{counts[0]} cut / {counts[1]} non-cut")
            else:
                print(f"{entry.path.name}: {n_frames} frames (unlabeled)")
            written += status == "written"
    print(f"extract: {written} written, {failures} failed, "
          f"{len(manifest.entries) - written - failures} skipped -> {cache_dir}")
    return 3 if failures else 0


def cmd_rq1(args) -> int:
    cfg = _load_config_arg(args)
    src, tgt, note = _prepare_raw(cfg, args.synthetic, need_target=False)
    print(note)
    rows = []
    for base in [d for d in (src, tgt) if d is not None]:
        for kind in TRANSFORM_KINDS:
            tspec = TransformSpec(kind=kind, gamma=cfg["transform.gamma"])
            stats = fit_transform_stats(base.arrays("train")[0]) if tspec.needs_stats else None
            ds = replace(base, features=apply_transform(base.features, tspec, stats))
            net, _ = train_probe(
                ds, epochs=cfg["train.epochs"], batch_size=cfg["train.batch_size"],
                val_interval_steps=cfg["train.val_interval_steps"],
                seed=cfg["train.seed"])
            train_acc = evaluate(net, ds, "train").accuracy
            val_acc = evaluate(net, ds, "val").accuracy
            rows.append({"domain": base.domain, "transform": kind,
                         "train_acc": train_acc, "val_acc": val_acc})
            print(f"{base.domain:>7} {kind:>9}: train {train_acc:.4f}  val {val_acc:.4f}")
    out = _out_dir(cfg)
    with open(out / "rq1.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["domain", "transform", "train_acc", "val_acc"])
        for r in rows:
            writer.writerow([r["domain"], r["transform"],
                             f"{r['train_acc']:.10g}", f"{r['val_acc']:.10g}"])
    print(f"wrote {out / 'rq1.csv'}")
    return 0


def cmd_rq2(args) -> int:
    cfg = _load_config_arg(args)
    for model in cfg["grid.models"]:
        if model not in MODEL_KINDS:
            raise ConfigError(f"grid.models: unknown model {model!r}")
    src, tgt, note = _prepare_raw(cfg, args.synthetic)
    print(note)
    tspec = transform_spec(cfg)
    src, tgt = _transform_pair(src, tgt, tspec, _fit_stats(src, tspec))
    runs, cells = run_grid(src, tgt, cfg["grid.models"], cfg["grid.source_sizes"],
                           cfg["grid.target_sizes"], train_config(cfg),
                           repeats=cfg["grid.repeats"],
                           base_seed=cfg["grid.base_seed"])
    out = _out_dir(cfg)
    write_runs_csv(runs, out / "runs.csv")
    write_grid_json(runs, cells, out / "grid.json")
    for n_s in cfg["grid.source_sizes"]:
        for n_t in cfg["grid.target_sizes"]:
            row = [c for c in cells
                   if c["n_source"] == n_s and c["n_target"] == n_t]
            usable = [c["mean_accuracy"] for c in row if c["mean_accuracy"] is not None]
            best = max(usable) if usable else None
            parts = []
            for c in row:
                if c["mean_accuracy"] is None:
                    parts.append(f"{c['model']}=error")
                else:
                    flag = "*" if c["mean_accuracy"] == best else ""
                    parts.append(f"{c['model']}={c['mean_accuracy']:.4f}"
                                 f"+-{c['std_accuracy']:.4f}{flag}")
            print(f"n_source={n_s} n_target={n_t}:  " + "  ".join(parts))
    print(f"wrote {out / 'runs.csv'} and {out / 'grid.json'}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config_arg(args)
    tcfg = train_config(cfg)
    src, tgt, note = _prepare_raw(cfg, args.synthetic,
                                  need_target=tcfg.model != "bsm")
    print(note)
    tspec = transform_spec(cfg)
    stats = _fit_stats(src, tspec)
    src, tgt = _transform_pair(src, tgt, tspec, stats)
    model, history = train_model(tcfg, src, tgt)
    out = _out_dir(cfg)
    extra = _checkpoint_extra(tcfg, tspec, stats, cfg)
    if tcfg.is_vanilla:
        ckpt = out / "model.dsck"
        save_checkpoint(model, ckpt, extra)
    else:
        ckpt = out / "model.dsca"
        save_adversarial(model, ckpt, extra)
    write_history_jsonl(history, out / "history.jsonl")
    print(f"{tcfg.model}: best step {history.best_step}, "
          f"{history.selection} accuracy {history.best_val_acc:.4f}")
    line = [f"source test {evaluate(model, src, 'test').accuracy:.4f}"]
    if tgt is not None:
        line.append(f"target test {evaluate(model, tgt, 'test').accuracy:.4f}")
    print("  ".join(line))
    print(f"wrote {ckpt} and {out / 'history.jsonl'}")
    return 0


def _report_dict(report) -> dict:
    return {"accuracy": report.accuracy,
            "confusion": report.confusion.tolist(),
            "per_class_recall": list(report.per_class_recall),
            "n": report.n}


def cmd_eval(args) -> int:
    cfg = _load_config_arg(args)
    net, extra, kind = _load_any_checkpoint(args.checkpoint)
    src, tgt, note = _prepare_raw(cfg, args.synthetic, need_target=False)
    print(note)
    tspec = (TransformSpec(**extra["transform"]) if extra.get("transform")
             else transform_spec(cfg))
    stats = (TransformStats(**extra["stats"]) if extra.get("stats")
             else _fit_stats(src, tspec))
    src, tgt = _transform_pair(src, tgt, tspec, stats)
    results = {}
    for ds in [d for d in (src, tgt) if d is not None]:
        report = evaluate(net, ds, "test")
        results[f"{ds.domain}_test"] = _report_dict(report)
        recalls = ["-" if r is None else f"{r:.4f}" for r in report.per_class_recall]
        print(f"{ds.domain} test: accuracy {report.accuracy:.4f}  "
              f"recall(non-cut) {recalls[0]}  recall(cut) {recalls[1]}  n={report.n}")
    if args.out:
        out = _out_dir(cfg)
        (out / "eval.json").write_text(json.dumps(results, indent=2, sort_keys=True) + "\n")
        print(f"wrote {out / 'eval.json'}")
    return 0


def cmd_infer_file(args) -> int:
    cfg = _load_config_arg(args)
    net, extra, kind = _load_any_checkpoint(args.checkpoint)
    fc = (FeatureConfig(**extra["features"]) if extra.get("features")
          else feature_config(cfg))
    tspec = (TransformSpec(**extra["transform"]) if extra.get("transform")
             else transform_spec(cfg))
    stats = None
    if tspec.needs_stats:
        if not extra.get("stats"):
            raise DataError(
                f"{args.checkpoint}: transform {tspec.kind!r} needs stored min/max "
                "statistics but the checkpoint has none; re-export it from the "
                "train command so the statistics are embedded")
        stats = TransformStats(**extra["stats"])
    fs = extract_file(args.audio, fc)
    x = apply_transform(fs.features, tspec, stats)
    in_dim = net.private_source.in_dim if kind == "adversarial" else net.in_dim
    if x.shape[1] != in_dim:
        raise DataError(f"feature dim {x.shape[1]} does not match "
                        f"checkpoint input dim {in_dim}")
    if kind == "adversarial":
        domain = extra.get("infer_domain") or cfg["infer.domain"]
        probs = predict_classes(net, x, domain)
    else:
        probs, _ = forward(set_mode(net, "infer"), x)
    pred = probs.argmax(axis=1)
    intervals = intervals_from_frames(pred, fs.frame_times,
                                      fc.hop / fc.sample_rate,
                                      cfg["infer.min_duration"])
    timeline = TimelinePrediction(pred, intervals, str(args.audio),
                                  Path(args.checkpoint).name)
    name = Path(args.audio).name
    print(f"{name}: {pred.size} frames, {int(pred.sum())} predicted cut, "
          f"{len(intervals)} interval(s)  [checkpoint {timeline.checkpoint_id}]")
    for start, end in intervals[:20]:
        print(f"  {start:10.4f} .. {end:10.4f} s")
    if len(intervals) > 20:
        print(f"  ... {len(intervals) - 20} more")
    truth = None
    if args.labels:
        table = read_interval_csv(args.labels)
        if name in table:
            marked = table[name]
        elif len(table) == 1:
            marked = next(iter(table.values()))
        else:
            raise DataError(f"{args.labels}: no intervals for {name}")
        truth = label_frames(fs.frame_times, marked)
        print(f"accuracy vs labels: {float(np.mean(pred == truth)):.4f}")
    if args.out:
        out = _out_dir(cfg)
        stem = Path(args.audio).stem
        ipath = out / f"{stem}_intervals.csv"
        with open(ipath, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(INTERVAL_HEADER)
            for start, end in intervals:
                writer.writerow([name, repr(start), repr(end)])
        ppath = out / f"{stem}_plotdata.csv"
        with open(ppath, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["frame_time", "truth", "prediction"])
            for i in range(pred.size):
                t = "" if truth is None else int(truth[i])
                writer.writerow([repr(float(fs.frame_times[i])), t, int(pred[i])])
        print(f"wrote {ipath} and {ppath}")
    return 0


def cmd_report(args) -> int:
    cfg = _load_config_arg(args)
    for path in render_report(cfg["out.dir"]):
        print(f"rendered {path}")
    return 0


# ---------------------------------------------------------------------------
# Parser and entry point.
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="domainshift",
        description="Cutting-sound detection with adversarial domain adaptation.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(sp, *, seed=True, synthetic=False, force=False):
        sp.add_argument("--config", metavar="PATH", help="experiment config file")
        sp.add_argument("--out", metavar="DIR", help="override the output directory")
        if seed:
            sp.add_argument("--seed", type=int, metavar="N",
                            help="override the experiment seed")
        if synthetic:
            sp.add_argument("--synthetic", nargs="?", const="", metavar="SPEC",
                            help="use synthetic domains; SPEC overrides synth.* "
                                 "keys as key=value,...")
        if force:
            sp.add_argument("--force", action="store_true",
                            help="overwrite existing outputs")

    sp = sub.add_parser("extract", help="extract feature caches from the manifest")
    common(sp, seed=False, force=True)
    sp.set_defaults(func=cmd_extract)

    sp = sub.add_parser("rq1", help="compare feature transforms with a probe classifier")
    common(sp, synthetic=True)
    sp.set_defaults(func=cmd_rq1)

    sp = sub.add_parser("rq2", help="run the model x data-size grid")
    common(sp, synthetic=True)
    sp.set_defaults(func=cmd_rq2)

    sp = sub.add_parser("train", help="train one model and save its checkpoint")
    common(sp, synthetic=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on the test splits")
    common(sp, synthetic=True)
    sp.add_argument("--checkpoint", required=True, metavar="PATH")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("infer-file", help="predict a cut timeline for one WAV")
    sp.add_argument("audio", metavar="WAV")
    sp.add_argument("--checkpoint", required=True, metavar="PATH")
    sp.add_argument("--labels", metavar="CSV", help="interval labels for scoring")
    sp.add_argument("--config", metavar="PATH", help="experiment config file")
    sp.add_argument("--out", metavar="DIR", help="write interval + plot-data CSVs here")
    sp.set_defaults(func=cmd_infer_file)

    sp = sub.add_parser("report", help="render figures from artifacts in the output directory")
    common(sp, seed=False)
    sp.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DomainShiftError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return getattr(exc, "exit_code", 1)


if __name__ == "__main__":
    raise SystemExit(main())
