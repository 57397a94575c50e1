"""Command-line entry point: ``avparse <subcommand> ...``.

Exit status is 0 on success, 2 for usage, configuration or input errors and
1 for runtime failures.  Every subcommand writes ``run.json`` into its output
location with the resolved arguments and SHA-256 hashes of what it wrote.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import io
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .corpus import SyntheticSpec, corpus_paths, generate_synthetic, load_corpus_dir, read_class_table
from .errors import AvparseError, TrainingError, UsageError
from .forge import (
    AGNOSTIC,
    AWARE,
    PromptTable,
    ThresholdGrid,
    Thresholds,
    calibrate_thresholds,
    elaborate,
    export_dense_labels,
    import_external_labels,
    load_teacher_logits,
)
from .han import export_model_logits, load_checkpoint, save_checkpoint
from .metrics import MICRO, MACRO, METRIC_KEYS, MetricsReport, ave_accuracy, ave_ground_truth, evaluate_corpus, label_fidelity, nonalignment_report
from .training import TRAIN_PRESETS, LossSpec, TrainConfig, ave_model_predictions, model_predictions, parse_loss_mode, train

log = logging.getLogger("avparse")

OUT_ROOT_ENV = "AVPARSE_OUT_ROOT"


# -- helpers ------------------------------------------------------------------------------


def resolve_out(path) -> Path:
    """Relative output paths are placed under $AVPARSE_OUT_ROOT when it is set."""
    path = Path(path)
    root = os.environ.get(OUT_ROOT_ENV)
    if root and not path.is_absolute():
        return Path(root) / path
    return path


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def hash_tree(root: Path, skip=("run.json",)) -> dict[str, str]:
    root = Path(root)
    if root.is_file():
        return {root.name: sha256_file(root)}
    return {
        p.relative_to(root).as_posix(): sha256_file(p)
        for p in sorted(root.rglob("*"))
        if p.is_file() and p.name not in skip
    }


def write_run_record(run_dir: Path, command: str, args: argparse.Namespace, started: float, artifacts: dict, extra=None) -> None:
    config = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    record = {
        "command": command,
        "version": __version__,
        "argv": sys.argv[1:],
        "config": config,
        "artifacts": artifacts,
        "started": _dt.datetime.fromtimestamp(started, _dt.timezone.utc).isoformat(),
        "wall_time": time.time() - started,
    }
    if extra:
        record.update(extra)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def parallel_map(fn, items, jobs: int):
    """Ordered map, so results are identical for any worker count."""
    if jobs <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _load_dense_gt(corpus, where) -> list:
    missing = [s.video_id for s in corpus if s.dense_gt is None]
    if missing:
        raise UsageError(f"{where}: no dense ground truth (dense_gt.txt) for {len(missing)} videos")
    return [s.dense_gt for s in corpus]


def _teachers_for(corpus, logits_dir) -> list:
    teachers = load_teacher_logits(logits_dir)
    missing = [s.video_id for s in corpus if s.video_id not in teachers]
    if missing:
        raise UsageError(f"{logits_dir}: no teacher logits for {len(missing)} videos, e.g. {missing[0]}")
    return [teachers[s.video_id] for s in corpus]


def _thresholds(args, class_names) -> Thresholds:
    if args.prompts and args.thresholds:
        raise UsageError("give at most one of --prompts and --thresholds")
    if args.prompts:
        table = PromptTable.load(args.prompts)
        table.check_classes(class_names)
        return table.thresholds()
    if args.thresholds:
        th = Thresholds.load(args.thresholds)
        if th.num_classes != len(class_names):
            raise UsageError(f"{args.thresholds}: {th.num_classes} thresholds for {len(class_names)} classes")
        return th
    return Thresholds.uniform(len(class_names), args.theta[0], args.theta[1])


# -- subcommands --------------------------------------------------------------------------


def cmd_gen(args) -> int:
    spec = SyntheticSpec.load(args.spec)
    if args.seed is not None:
        spec.seed = args.seed
    out = resolve_out(args.out_dir)
    started = time.time()
    corpus = generate_synthetic(spec, out)
    bk = corpus.bookkeeping
    print(
        f"videos={bk['num_videos']} classes={spec.num_classes} segments={spec.num_segments} "
        f"events={bk['total_events']} nonaligned={bk['nonaligned_events']} "
        f"nonaligned_fraction={bk['nonaligned_fraction']:.4f}"
    )
    write_run_record(out, "gen", args, started, hash_tree(out))
    return 0


def cmd_elaborate(args) -> int:
    started = time.time()
    corpus = load_corpus_dir(args.corpus_dir, args.split)
    paths = corpus_paths(args.corpus_dir, args.split)
    class_names = read_class_table(paths["classes"])
    thresholds = _thresholds(args, class_names)
    teachers = _teachers_for(corpus, args.logits or paths["logits"])
    mode = AGNOSTIC if args.modality_agnostic else AWARE
    filt = not args.no_video_filter

    def one(pair):
        sample, tl = pair
        return elaborate(tl, thresholds, sample.weak, video_filter=filt, modality_mode=mode)

    labels = parallel_map(one, list(zip(corpus, teachers)), args.jobs)
    out = resolve_out(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    export_dense_labels(out / "labels.txt", {s.video_id: lab for s, lab in zip(corpus, labels)})
    extra = {}
    if corpus and all(s.dense_gt is not None for s in corpus):
        fid = label_fidelity(labels, [s.dense_gt for s in corpus])
        (out / "fidelity.json").write_text(json.dumps(fid, indent=2, sort_keys=True) + "\n")
        print("label fidelity " + " ".join(f"{k}={v:.2f}" for k, v in fid.items()))
        extra["fidelity"] = fid
    print(f"wrote dense labels for {len(labels)} videos to {out / 'labels.txt'}")
    write_run_record(out, "elaborate", args, started, hash_tree(out), extra)
    return 0


def cmd_calibrate(args) -> int:
    started = time.time()
    corpus = load_corpus_dir(args.corpus_dir, args.split)
    if not corpus:
        raise UsageError(f"{args.corpus_dir}: calibration corpus is empty")
    paths = corpus_paths(args.corpus_dir, args.split)
    class_names = read_class_table(paths["classes"])
    gts = _load_dense_gt(corpus, args.corpus_dir)
    teachers = _teachers_for(corpus, args.logits or paths["logits"])
    grid = ThresholdGrid(lo=args.grid_lo, hi=args.grid_hi, step=args.grid_step, num=args.grid_num)
    result = calibrate_thresholds(teachers, gts, [s.weak for s in corpus], grid, video_filter=not args.no_video_filter)
    result.thresholds.class_names = class_names
    out = resolve_out(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    result.thresholds.save(out)
    rows = result.table_rows(class_names)
    report_path = out.with_suffix(".report.json")
    report_path.write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
    for r in rows:
        note = "  absent: " + ",".join(r["absent"]) if r["absent"] else ""
        print(
            f"{r['class']:<28} theta_v={r['theta_visual']:9.4f} F_v={100 * r['f_visual']:6.2f} "
            f"theta_a={r['theta_audio']:9.4f} F_a={100 * r['f_audio']:6.2f}{note}"
        )
    artifacts = {out.name: sha256_file(out), report_path.name: sha256_file(report_path)}
    write_run_record(out.parent, "calibrate", args, started, artifacts)
    return 0


def _train_config(args) -> TrainConfig:
    base = TRAIN_PRESETS[args.preset]()
    config = TrainConfig.load(args.config, base) if args.config else base
    overrides = {}
    for name in ("epochs", "seed", "batch_size", "hidden_dim", "num_layers", "ffn_dim", "heads"):
        value = getattr(args, name)
        if value is not None:
            overrides[name] = value
    if args.loss:
        overrides["loss_mode"] = args.loss
    if overrides:
        config = TrainConfig(**{**config.to_dict(), **overrides})
    return config


def cmd_train(args) -> int:
    started = time.time()
    config = _train_config(args)
    mode = parse_loss_mode(config.loss_mode)
    needs_dense = mode == "ave-valor" or (isinstance(mode, LossSpec) and mode.needs_dense)
    needs_teacher = isinstance(mode, LossSpec) and mode.needs_teacher
    if needs_dense and not args.labels:
        raise UsageError(f"--loss {config.loss_mode} needs --labels (elaborated dense labels)")
    if needs_teacher and not args.logits:
        raise UsageError(f"--loss {config.loss_mode} needs --logits (teacher logit directory)")
    corpus = load_corpus_dir(args.corpus_dir, args.split, with_gt=False)
    val = load_corpus_dir(args.corpus_dir, args.val_split) if args.val_split else None
    dense = import_external_labels(args.labels) if needs_dense else None
    teachers = load_teacher_logits(args.logits) if needs_teacher else None
    out = resolve_out(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config.save(out / "config.txt")
    params, report = train(corpus, config, dense, teachers, val, checkpoint_dir=out / "checkpoints")
    save_checkpoint(params, out / "checkpoint")
    (out / "train_report.json").write_text(report.to_json())
    last = report.epochs[-1].losses["total"] if report.epochs else float("nan")
    print(f"trained {config.epochs} epochs, final loss {last:.5f}, selected epoch {report.best_epoch}")
    if report.validation and "segment" in report.validation:
        seg = report.validation["segment"]
        print("validation segment " + " ".join(f"{k}={seg[k]:.2f}" for k in METRIC_KEYS))
    write_run_record(out, "train", args, started, hash_tree(out), {"train_wall_time": report.wall_time})
    return 0


def cmd_eval(args) -> int:
    started = time.time()
    corpus = load_corpus_dir(args.corpus_dir, args.split)
    paths = corpus_paths(args.corpus_dir, args.split)
    class_names = read_class_table(paths["classes"])
    gts = _load_dense_gt(corpus, args.corpus_dir)
    aggregation = MICRO if args.micro else MACRO
    if args.pred_labels:
        labels = import_external_labels(args.pred_labels)
        missing = [s.video_id for s in corpus if s.video_id not in labels]
        if missing:
            raise UsageError(f"{args.pred_labels}: no predictions for {len(missing)} videos")
        preds = [labels[s.video_id] for s in corpus]
        params = None
    else:
        if not args.checkpoint:
            raise UsageError("give --checkpoint or --pred-labels")
        params = load_checkpoint(args.checkpoint)
        preds = None
    if args.ave:
        if params is None:
            raise UsageError("--ave evaluates a checkpoint trained in an AVE mode")
        seg_preds = np.concatenate(ave_model_predictions(params, corpus, args.threshold))
        truth = np.concatenate([ave_ground_truth(g) for g in gts])
        report = MetricsReport(segment={}, event={}, aggregation=aggregation, num_videos=len(corpus))
        report.ave_accuracy = ave_accuracy(seg_preds, truth)
    else:
        if preds is None:
            preds = model_predictions(params, corpus, args.threshold, args.video_gate)
        report = evaluate_corpus(preds, gts, aggregation=aggregation)
        if args.nonalignment:
            report.nonalignment = nonalignment_report(preds, gts)
    out = resolve_out(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json())
    artifacts = {out.name: sha256_file(out)}
    if args.per_class:
        pc = resolve_out(args.per_class)
        pc.parent.mkdir(parents=True, exist_ok=True)
        pc.write_text(report.per_class_csv(class_names))
        artifacts[pc.name] = sha256_file(pc)
    print(report.to_text(), end="")
    write_run_record(out.parent, "eval", args, started, artifacts)
    return 0


def _find_report(run_dir: Path) -> Path:
    run_dir = Path(run_dir)
    if run_dir.is_file():
        return run_dir
    candidates = sorted(run_dir.glob("*report.json"))
    candidates = [c for c in candidates if c.name != "train_report.json"] or candidates
    if not candidates:
        raise UsageError(f"{run_dir}: no report.json found")
    return candidates[0]


def _load_report(path: Path) -> dict:
    data = json.loads(path.read_text())
    if "segment" not in data and isinstance(data.get("validation"), dict):
        data = data["validation"]
    if "segment" not in data and "ave_accuracy" not in data:
        raise UsageError(f"{path}: not a metrics report")
    return data


def comparison_rows(reports: list[tuple[str, dict]]) -> tuple[list[str], list[list]]:
    """Rows of scores per run; delta columns give each run minus the first."""
    header = ["run"]
    keys = []
    for level in ("segment", "event"):
        for k in METRIC_KEYS:
            keys.append((level, k))
    if any(r.get("ave_accuracy") is not None for _, r in reports):
        keys.append(("ave", "accuracy"))
    header += [f"{lv}:{k}" for lv, k in keys]
    if len(reports) > 1:
        header += [f"delta {lv}:{k}" for lv, k in keys]

    def value(r, lv, k):
        if lv == "ave":
            acc = r.get("ave_accuracy")
            return None if acc is None else 100.0 * acc
        return r.get(lv, {}).get(k)

    rows = []
    first = reports[0][1]
    for name, r in reports:
        vals = [value(r, lv, k) for lv, k in keys]
        row = [name] + vals
        if len(reports) > 1:
            base = [value(first, lv, k) for lv, k in keys]
            row += [None if v is None or b is None else v - b for v, b in zip(vals, base)]
        rows.append(row)
    return header, rows


def cmd_report(args) -> int:
    started = time.time()
    reports = []
    for run in args.runs:
        path = _find_report(Path(run))
        reports.append((Path(run).name or str(run), _load_report(path)))
    header, rows = comparison_rows(reports)
    out = resolve_out(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow(["" if v is None else (f"{v:.4f}" if isinstance(v, float) else v) for v in row])
    (out / "table.csv").write_text(buf.getvalue())
    # plot data: per-class scores and per-epoch losses when available
    for name, r in reports:
        if r.get("per_class"):
            lines = ["run,modality,class,f_score"]
            for modality, scores in r["per_class"].items():
                lines += [f"{name},{modality},{c},{s:.6f}" for c, s in enumerate(scores)]
            (out / f"per_class_{name}.csv").write_text("\n".join(lines) + "\n")
    for run in args.runs:
        tr = Path(run) / "train_report.json"
        if tr.is_file():
            epochs = json.loads(tr.read_text())["epochs"]
            comps = sorted({k for e in epochs for k in e["losses"]})
            lines = [",".join(["epoch", "lr", *comps, "validation"])]
            for e in epochs:
                val = "" if e["validation"] is None else f"{e['validation']:.6f}"
                lines.append(",".join([str(e["epoch"]), f"{e['lr']:.8g}", *(f"{e['losses'][c]:.8f}" for c in comps), val]))
            (out / f"curve_{Path(run).name}.csv").write_text("\n".join(lines) + "\n")
    widths = [max(len(str(h)), 10) for h in header]
    print("  ".join(f"{h:>{w}}" for h, w in zip(header, widths)))
    for row in rows:
        cells = ["-" if v is None else (f"{v:.2f}" if isinstance(v, float) else str(v)) for v in row]
        print("  ".join(f"{c:>{w}}" for c, w in zip(cells, widths)))
    write_run_record(out, "report", args, started, hash_tree(out))
    return 0


def cmd_export_logits(args) -> int:
    started = time.time()
    params = load_checkpoint(args.checkpoint)
    corpus = load_corpus_dir(args.corpus_dir, args.split, with_gt=False)
    out = resolve_out(args.out_dir)
    export_model_logits(params, corpus, out)
    print(f"exported logits for {len(corpus)} videos to {out}")
    write_run_record(out, "export-logits", args, started, hash_tree(out))
    return 0


# -- parser -------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="avparse", description="Audio-visual video parsing toolkit.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("--jobs", type=int, default=os.cpu_count() or 1, help="per-video worker threads")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic corpus")
    p.add_argument("spec", help="synthetic spec JSON")
    p.add_argument("out_dir")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen)

    def corpus_args(p, split_default=None):
        p.add_argument("corpus_dir")
        p.add_argument("--split", default=split_default, help="manifest <split>.csv instead of manifest.csv")

    def threshold_args(p):
        p.add_argument("--logits", help="teacher logit directory (default: <corpus>/logits)")

    p = sub.add_parser("elaborate", help="turn teacher logits into dense labels")
    corpus_args(p)
    threshold_args(p)
    p.add_argument("out_dir")
    p.add_argument("--prompts", help="prompt table TSV with per-class thresholds")
    p.add_argument("--thresholds", help="threshold TSV from calibrate")
    p.add_argument("--theta", type=float, nargs=2, default=(0.0, 0.0), metavar=("VISUAL", "AUDIO"))
    p.add_argument("--no-video-filter", action="store_true")
    p.add_argument("--modality-agnostic", action="store_true")
    p.set_defaults(func=cmd_elaborate)

    p = sub.add_parser("calibrate", help="fit class thresholds on a labelled split")
    corpus_args(p)
    threshold_args(p)
    p.add_argument("--out", required=True, help="thresholds TSV to write")
    p.add_argument("--grid-lo", type=float)
    p.add_argument("--grid-hi", type=float)
    p.add_argument("--grid-step", type=float)
    p.add_argument("--grid-num", type=int, default=64)
    p.add_argument("--no-video-filter", action="store_true")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("train", help="train a model")
    corpus_args(p)
    p.add_argument("out_dir")
    p.add_argument("--val-split")
    p.add_argument("--config", help="key = value training config")
    p.add_argument("--preset", choices=sorted(TRAIN_PRESETS), default="standard")
    p.add_argument("--loss", help="base, kd, valor, mixed:<audio>,<visual>, ave-weak or ave-valor")
    p.add_argument("--labels", help="dense label file from elaborate")
    p.add_argument("--logits", help="teacher logit directory (for kd)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--hidden-dim", type=int)
    p.add_argument("--num-layers", type=int)
    p.add_argument("--ffn-dim", type=int)
    p.add_argument("--heads", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint or a label file")
    corpus_args(p)
    p.add_argument("--checkpoint")
    p.add_argument("--pred-labels", help="dense label file to score instead of a model")
    p.add_argument("--out", required=True, help="report JSON to write")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--video-gate", action="store_true", help="also require the video-level probability to clear the threshold")
    p.add_argument("--micro", action="store_true", help="pool counts over videos")
    p.add_argument("--nonalignment", action="store_true")
    p.add_argument("--per-class", help="CSV of per-class segment F-scores")
    p.add_argument("--ave", action="store_true", help="AVE segment accuracy")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="compare runs")
    p.add_argument("runs", nargs="+", help="run directories or report JSON files")
    p.add_argument("--out-dir", default="report")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("export-logits", help="write a model's dense logits as teacher files")
    p.add_argument("checkpoint")
    corpus_args(p)
    p.add_argument("out_dir")
    p.set_defaults(func=cmd_export_logits)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.jobs < 1:
        parser.error("--jobs must be at least 1")
    try:
        return args.func(args)
    except TrainingError as exc:
        print(f"avparse {args.command}: training failed: {exc}", file=sys.stderr)
        return 1
    except (AvparseError, ValueError) as exc:
        print(f"avparse {args.command}: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"avparse {args.command}: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"avparse {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
