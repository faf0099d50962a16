"""Command-line entry point: ``cade <command> ...``.

Every command that produces output writes into a fresh (missing or empty)
directory holding ``config.resolved.json``, ``run.log`` and its results.
Failures print one JSON line ``{"error": kind, "message": ..., ...}`` on
stderr.  Exit codes: 0 success, 1 runtime failure, 2 bad configuration or
usage, 3 missing input file, 4 output directory not empty.
"""

from __future__ import annotations

import argparse
import csv
import io as _io
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .anchors import suggest_anchor_config
from .config import ConfigError, ExperimentConfig, config_from_dict, resolve_config, write_resolved
from .detector import load_checkpoint
from .evaluation import EvaluationRun, bootstrap_compare, cpm, curve_table, match_detections, run_froc
from .geometry import BoundingBox3D
from .io import (
    atomic_write_bytes,
    read_annotations,
    read_detections,
    read_json,
    read_volume,
    write_annotations,
    write_detections,
    write_json,
    write_volume,
)
from .phantom import generate_corpus, load_corpus
from .preprocessing import DynamicSeries, preprocess_series
from .records import StudyRecord, all_breasts
from .registration import IdentityRegistrar, TranslationSearchRegistrar
from .training import build_model, detect, fit, make_folds, num_workers, split_fold

_pkg = "ultrafast_cade"
log = logging.getLogger(_pkg)

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_MISSING, EXIT_EXISTS = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class OutputExistsError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------- helpers


def _fresh_dir(path) -> Path:
    path = Path(path)
    if path.exists() and (not path.is_dir() or any(path.iterdir())):
        raise OutputExistsError(f"output directory {path} exists and is not empty")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _require(path) -> Path:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    return path


def _attach_log(out_dir: Path) -> logging.Handler:
    handler = logging.FileHandler(out_dir / "run.log")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger(_pkg)
    root.addHandler(handler)
    root.setLevel(logging.INFO)
    return handler


def _detach_log(handler: logging.Handler) -> None:
    logging.getLogger(_pkg).removeHandler(handler)
    handler.close()


def _config(args, flags: dict | None = None) -> ExperimentConfig:
    return resolve_config(getattr(args, "config", None), getattr(args, "set", None) or (), flags)


def _box(obj) -> BoundingBox3D:
    if isinstance(obj, dict):
        return BoundingBox3D(tuple(obj["min"]), tuple(obj["max"]))
    v = list(obj)
    return BoundingBox3D(tuple(v[:3]), tuple(v[3:]))


def _corpus_annotations(studies):
    anns = [a for s in studies for a in s.annotations]
    return anns, [b.breast_id for b in all_breasts(studies)]


def _select_fold(studies, fold, folds, seed):
    if fold is None:
        return list(studies), []
    if seed is None:
        raise UsageError("--fold needs --seed (fold assignment is seeded)")
    assignment = make_folds(studies, folds, seed)
    if not 0 <= fold < folds:
        raise UsageError(f"--fold must lie in [0, {folds})")
    return split_fold(studies, assignment, fold)


def _write_curves(out_dir: Path, run: EvaluationRun, cfg: ExperimentConfig, seed: int) -> dict:
    """Curve JSON + CSV per metric and a summary dict."""
    ev = cfg.evaluation
    match = match_detections(run.detections, run.annotations, run.breast_ids, ev.overlap_threshold, ev.criterion)
    summary = {
        "n_breasts": len(run.breast_ids),
        "n_normal": match.n_normal,
        "n_lesions": len(run.annotations),
        "n_detections": len(run.detections),
        "matched_lesions": int(sum(match.lesion_hit)),
        "metrics": {},
    }
    for metric in ev.metrics:
        curve = run_froc(run, metric, ev.overlap_threshold, ev.criterion)
        rows = curve_table(run, metric, ev.n_bootstrap, seed, ev.ci_level, ev.overlap_threshold, ev.criterion)
        write_json(out_dir / f"curve_{metric}.json", {**curve.to_dict(), "table": rows})
        buf = _io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=["fp", "value", "ci_low", "ci_high"], lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
        atomic_write_bytes(out_dir / f"curve_{metric}.csv", buf.getvalue().encode())
        summary["metrics"][metric] = {
            "cpm": cpm(curve),
            "n_lesions": curve.n_lesions,
            "matched": int(curve.hits[-1]),
            "value_at_0": curve.value_at(0.0),
        }
    write_json(out_dir / "summary.json", summary)
    return summary


def _train(cfg: ExperimentConfig, train_set, root, out_dir: Path, fit_anchors: bool):
    net_cfg = cfg.network
    if fit_anchors:
        boxes = np.concatenate([b.boxes_in_crop() for b in all_breasts(train_set)] + [np.zeros((0, 6))])
        if len(boxes):
            anchors = suggest_anchor_config(boxes, strides=net_cfg.anchors.strides)
            net_cfg = type(net_cfg).from_dict({**net_cfg.to_dict(), "anchors": asdict(anchors)})
    net = build_model(net_cfg, seed=cfg.train.seed)
    log.info("training on %d studies", len(train_set))
    fit(train_set, None, net, cfg.train, cfg.loss, root=root, checkpoint_path=out_dir / "model.ckpt",
        log_path=out_dir / "epochs.jsonl", step_log_path=out_dir / "steps.jsonl")
    return net


def _detect(net, studies, root, cfg: ExperimentConfig, out_dir: Path):
    ev = cfg.evaluation
    dets = detect(net, studies, root, ev.score_threshold, ev.nms_threshold, ev.max_detections)
    anns, bids = _corpus_annotations(studies)
    write_detections(out_dir / "detections.jsonl", dets)
    write_annotations(out_dir / "annotations.jsonl", anns, bids)
    return dets, anns, bids


def _train_flags(args) -> dict:
    return {
        "train.seed": args.seed,
        "train.epochs": args.epochs,
        "train.max_steps": args.max_steps,
        "train.learning_rate": args.lr,
        "train.include_benign": False if args.malignant_only else None,
    }


# ---------------------------------------------------------------- commands


def cmd_phantom_generate(args) -> dict:
    cfg = _config(args, {"phantom.motion_amplitude": args.motion_amplitude})
    out = _fresh_dir(args.out)
    handler = _attach_log(out)
    try:
        write_resolved(cfg, out)
        studies = generate_corpus(args.n, cfg.phantom, args.seed, out, keep_series=args.keep_series,
                                  workers=num_workers())
        anns, bids = _corpus_annotations(studies)
        write_annotations(out / "annotations.jsonl", anns, bids)
        log.info("generated %d studies into %s", len(studies), out)
    finally:
        _detach_log(handler)
    return {"studies": len(studies), "out": str(out)}


def cmd_preprocess(args) -> dict:
    stem = Path(args.input).with_suffix("") if Path(args.input).suffix in (".raw", ".json") else Path(args.input)
    _require(stem.with_suffix(".raw"))
    data, meta = read_volume(_require(stem.with_suffix(".json")))
    roi = _box(read_json(_require(args.aorta_roi)))
    out = _fresh_dir(args.out)
    handler = _attach_log(out)
    try:
        series = DynamicSeries(data, tuple(meta.get("spacing_mm", (2.5, 0.9, 0.9))), meta.get("time_index") or [])
        registrar = TranslationSearchRegistrar() if args.registrar == "translation" else IdentityRegistrar()
        pre = preprocess_series(series, roi, registrar, crop_size=args.crop_size)
        crops = {}
        for bt in (pre.left, pre.right):
            write_volume(out / bt.side, bt.data, side=bt.side, crop_origin=list(bt.crop_origin),
                         layout="channel,row,col,slice")
            crops[bt.side] = list(bt.crop_origin)
        write_json(out / "crop.json", {"reference_index": pre.reference_index, "crop_origin": crops})
        write_json(out / "config.resolved.json", {"input": str(args.input), "aorta_roi": str(args.aorta_roi),
                                                  "crop_size": args.crop_size, "registrar": args.registrar})
        log.info("reference index %d, crop origins %s", pre.reference_index, crops)
    finally:
        _detach_log(handler)
    return {"reference_index": pre.reference_index, "crop_origin": crops}


def cmd_train(args) -> dict:
    cfg = _config(args, _train_flags(args))
    corpus = _require(args.corpus)
    studies = load_corpus(corpus)
    train_set, held_out = _select_fold(studies, args.fold, args.folds, args.seed)
    out = _fresh_dir(args.out)
    handler = _attach_log(out)
    try:
        write_resolved(cfg, out)
        write_json(out / "split.json", {"train": [s.study_id for s in train_set],
                                        "test": [s.study_id for s in held_out]})
        _train(cfg, train_set, corpus, out, args.fit_anchors)
    finally:
        _detach_log(handler)
    return {"checkpoint": str(out / "model.ckpt"), "train_studies": len(train_set)}


def cmd_detect(args) -> dict:
    cfg = _config(args)
    net = load_checkpoint(_require(args.checkpoint)).eval()
    corpus = _require(args.corpus)
    studies = load_corpus(corpus)
    if args.fold is not None:
        studies = _select_fold(studies, args.fold, args.folds, args.seed)[1]
    out = _fresh_dir(args.out)
    handler = _attach_log(out)
    try:
        write_resolved(cfg, out)
        dets, _, _ = _detect(net, studies, corpus, cfg, out)
        log.info("%d detections on %d studies", len(dets), len(studies))
    finally:
        _detach_log(handler)
    return {"detections": len(dets)}


def cmd_evaluate(args) -> dict:
    cfg = _config(args, {"evaluation.metrics": args.metric, "evaluation.n_bootstrap": args.bootstrap})
    dets = read_detections(_require(args.detections))
    if args.annotations:
        anns, bids = read_annotations(_require(args.annotations))
    elif args.corpus:
        anns, bids = _corpus_annotations(load_corpus(_require(args.corpus)))
    else:
        raise UsageError("evaluate needs --annotations or --corpus")
    out = _fresh_dir(args.out)
    handler = _attach_log(out)
    try:
        write_resolved(cfg, out)
        write_detections(out / "detections.jsonl", dets)
        write_annotations(out / "annotations.jsonl", anns, bids)
        summary = _write_curves(out, EvaluationRun(dets, anns, bids), cfg, args.seed)
    finally:
        _detach_log(handler)
    return summary


def _load_run(run_dir) -> EvaluationRun:
    run_dir = _require(run_dir)
    anns, bids = read_annotations(_require(run_dir / "annotations.jsonl"))
    return EvaluationRun(read_detections(_require(run_dir / "detections.jsonl")), anns, bids)


def cmd_compare(args) -> dict:
    cfg = _config(args, {"evaluation.n_bootstrap": args.samples})
    run_a, run_b = _load_run(args.run_a), _load_run(args.run_b)
    ev = cfg.evaluation
    result = bootstrap_compare(run_a, run_b, ev.n_bootstrap, args.seed, args.metric, ev.overlap_threshold,
                               ev.criterion)
    report = {**result.to_dict(), "metric": args.metric, "seed": args.seed}
    if args.out:
        out = _fresh_dir(args.out)
        write_resolved(cfg, out)
        write_json(out / "compare.json", report)
    return report


def _crossval_fold(job) -> dict:
    cfg_dict, corpus, studies_dicts, fold, fold_dir, fit_anchors = job
    cfg = config_from_dict(cfg_dict)
    studies = [StudyRecord.from_dict(d) for d in studies_dicts["train"]]
    test = [StudyRecord.from_dict(d) for d in studies_dicts["test"]]
    fold_dir = _fresh_dir(fold_dir)
    handler = _attach_log(fold_dir)
    try:
        write_resolved(cfg, fold_dir)
        write_json(fold_dir / "split.json", {"train": [s.study_id for s in studies],
                                             "test": [s.study_id for s in test]})
        net = _train(cfg, studies, corpus, fold_dir, fit_anchors).eval()
        dets, anns, bids = _detect(net, test, corpus, cfg, fold_dir)
        summary = _write_curves(fold_dir, EvaluationRun(dets, anns, bids), cfg, cfg.train.seed)
    finally:
        _detach_log(handler)
    return {"fold": fold, **summary}


def cmd_crossval(args) -> dict:
    cfg = _config(args, _train_flags(args))
    corpus = _require(args.corpus)
    studies = load_corpus(corpus)
    assignment = make_folds(studies, args.folds, args.seed)
    out = _fresh_dir(args.out)
    handler = _attach_log(out)
    try:
        write_resolved(cfg, out)
        write_json(out / "folds.json", assignment)
        jobs = []
        for f in range(args.folds):
            train, test = split_fold(studies, assignment, f)
            jobs.append((cfg.to_dict(), str(corpus),
                         {"train": [s.to_dict() for s in train], "test": [s.to_dict() for s in test]},
                         f, str(out / f"fold_{f}"), args.fit_anchors))
        if args.jobs > 1:
            with ProcessPoolExecutor(max_workers=args.jobs) as ex:
                reports = list(ex.map(_crossval_fold, jobs))
        else:
            reports = [_crossval_fold(j) for j in jobs]
        dets, anns, bids = [], [], []
        for f in range(args.folds):
            fold_dir = out / f"fold_{f}"
            dets += read_detections(fold_dir / "detections.jsonl")
            a, b = read_annotations(fold_dir / "annotations.jsonl")
            anns += a
            bids += b
        pooled_dir = out / "pooled"
        pooled_dir.mkdir()
        write_detections(pooled_dir / "detections.jsonl", dets)
        write_annotations(pooled_dir / "annotations.jsonl", anns, bids)
        pooled = _write_curves(pooled_dir, EvaluationRun(dets, anns, bids), cfg, args.seed)
        report = {"folds": reports, "pooled": pooled}
        write_json(out / "crossval.json", report)
        log.info("pooled matched lesions %d", pooled["matched_lesions"])
    finally:
        _detach_log(handler)
    return {"pooled": pooled, "folds": len(reports)}


# ---------------------------------------------------------------- parser


def _add_config(p):
    p.add_argument("--config", help="experiment config file (.json or .toml)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one config entry, e.g. train.epochs=3 (value parsed as JSON); repeatable")


def _add_train_flags(p):
    p.add_argument("--epochs", type=int, help="number of epochs (overrides train.epochs)")
    p.add_argument("--max-steps", type=int, help="stop after this many optimizer steps")
    p.add_argument("--lr", type=float, help="initial learning rate")
    p.add_argument("--malignant-only", action="store_true",
                   help="drop benign annotations from the training targets")
    p.add_argument("--fit-anchors", action="store_true",
                   help="derive anchor shapes from the training lesion boxes")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cade", description="3D lesion detection on ultrafast breast DCE-MRI.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    ph = sub.add_parser("phantom", help="synthetic phantom corpora")
    ph_sub = ph.add_subparsers(dest="phantom_command", required=True, parser_class=_Parser)
    gen = ph_sub.add_parser("generate", help="generate and preprocess a phantom corpus")
    gen.add_argument("--n", type=int, required=True, help="number of studies")
    gen.add_argument("--seed", type=int, required=True, help="corpus seed")
    gen.add_argument("--out", required=True, help="fresh output directory")
    gen.add_argument("--motion-amplitude", type=int, help="max injected translation in voxels")
    gen.add_argument("--keep-series", action="store_true", help="also write the raw 4D series")
    _add_config(gen)
    gen.set_defaults(func=cmd_phantom_generate)

    pre = sub.add_parser("preprocess", help="turn one 4D series into two breast tensors")
    pre.add_argument("--in", dest="input", required=True, help="series volume (stem, .raw or .json)")
    pre.add_argument("--aorta-roi", required=True, help='JSON box {"min": [z,y,x], "max": [z,y,x]}')
    pre.add_argument("--out", required=True, help="fresh output directory")
    pre.add_argument("--crop-size", type=int, default=192, help="rows and columns of each breast crop")
    pre.add_argument("--registrar", choices=["none", "translation"], default="translation",
                     help="motion compensation backend")
    pre.set_defaults(func=cmd_preprocess)

    tr = sub.add_parser("train", help="train a detector on a corpus")
    tr.add_argument("--corpus", required=True, help="corpus directory")
    tr.add_argument("--out", required=True, help="fresh run directory")
    tr.add_argument("--seed", type=int, required=True, help="training and fold seed")
    tr.add_argument("--fold", type=int, help="hold out this fold (patient-level)")
    tr.add_argument("--folds", type=int, default=10, help="number of folds when --fold is given")
    _add_train_flags(tr)
    _add_config(tr)
    tr.set_defaults(func=cmd_train)

    de = sub.add_parser("detect", help="run a checkpoint on a corpus")
    de.add_argument("--checkpoint", required=True, help="model.ckpt from train")
    de.add_argument("--corpus", required=True, help="corpus directory")
    de.add_argument("--out", required=True, help="fresh output directory")
    de.add_argument("--fold", type=int, help="only the studies of this held-out fold")
    de.add_argument("--folds", type=int, default=10, help="number of folds when --fold is given")
    de.add_argument("--seed", type=int, help="fold seed when --fold is given")
    _add_config(de)
    de.set_defaults(func=cmd_detect)

    ev = sub.add_parser("evaluate", help="FROC curves and CPM")
    ev.add_argument("--detections", "--dets", required=True, help="detections JSON lines")
    ev.add_argument("--annotations", help="annotations JSON lines")
    ev.add_argument("--corpus", help="corpus directory (alternative to --annotations)")
    ev.add_argument("--out", required=True, help="fresh output directory")
    ev.add_argument("--metric", action="append", help="metric to report; repeatable (default: all)")
    ev.add_argument("--bootstrap", type=int, help="bootstrap resamples for confidence bands (0: none)")
    ev.add_argument("--seed", type=int, default=0, help="bootstrap seed")
    _add_config(ev)
    ev.set_defaults(func=cmd_evaluate)

    co = sub.add_parser("compare", help="paired bootstrap test of two runs")
    co.add_argument("--run-a", required=True, help="directory with detections.jsonl and annotations.jsonl")
    co.add_argument("--run-b", required=True, help="directory with detections.jsonl and annotations.jsonl")
    co.add_argument("--samples", type=int, help="bootstrap resamples")
    co.add_argument("--seed", type=int, required=True, help="bootstrap seed")
    co.add_argument("--metric", default="detection_rate", help="metric whose CPM is compared")
    co.add_argument("--out", help="optional fresh output directory for compare.json")
    _add_config(co)
    co.set_defaults(func=cmd_compare)

    cv = sub.add_parser("crossval", help="k-fold train/detect/evaluate with a pooled FROC")
    cv.add_argument("--corpus", required=True, help="corpus directory")
    cv.add_argument("--out", required=True, help="fresh output directory")
    cv.add_argument("--folds", type=int, default=10, help="number of folds")
    cv.add_argument("--seed", type=int, required=True, help="fold and training seed")
    cv.add_argument("--jobs", type=int, default=1, help="folds run in parallel worker processes")
    _add_train_flags(cv)
    _add_config(cv)
    cv.set_defaults(func=cmd_crossval)
    return parser


def _fail(kind: str, message: str, code: int, **extra) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message, **extra}) + "\n")
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        result = args.func(args)
    except ConfigError as exc:
        return _fail("config", exc.message, EXIT_CONFIG, key=exc.key)
    except UsageError as exc:
        return _fail("usage", str(exc), EXIT_CONFIG)
    except FileNotFoundError as exc:
        return _fail("missing-file", str(exc.filename or exc), EXIT_MISSING)
    except OutputExistsError as exc:
        return _fail("output-exists", str(exc), EXIT_EXISTS)
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        return _fail(type(exc).__name__, " ".join(str(exc).split()), EXIT_FAILURE)
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
