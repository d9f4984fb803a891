"""Command-line entry points.

Exit codes: 0 success, 1 validation error, 2 missing input, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, evaluation, inference, patchnet, plotting, sampler, synth, trainer
from .errors import (ConfigurationError, FormatError, InputError, NumericError, WarmStartError)
from .tensor import get_precision, set_precision

log = logging.getLogger("ecn")

EXIT_OK, EXIT_INVALID, EXIT_MISSING, EXIT_NUMERIC = 0, 1, 2, 3


class MissingInput(Exception):
    pass


def _require(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise MissingInput(f"missing input: {p}")
    return p


def _write_manifest(out: Path, command: str, config: dict, name: str = "manifest.json") -> None:
    out.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, "engine_version": __version__, "precision": get_precision(),
           "config": config,
           "note": "float32 runs are reproducible on the same machine and BLAS build"}
    (out / name).write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n",
                                       encoding="utf-8")


def _config_values(args, *templates) -> dict[str, str]:
    if not getattr(args, "config", None):
        return {}
    values = trainer.parse_config_file(_require(args.config))
    known = {f.name for t in templates for f in dataclasses.fields(t)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigurationError(f"{args.config}: unknown keys {', '.join(unknown)}")
    return values


def _classes_for(index: Path, classes_arg) -> list[str] | None:
    if classes_arg:
        return sampler.read_classes(_require(classes_arg))
    default = index.parent / "classes.txt"
    return sampler.read_classes(default) if default.exists() else None


def _load(index, classes_arg):
    index = _require(index)
    ds = sampler.load_dataset(index, _classes_for(index, classes_arg))
    for path, msg in ds.errors:
        log.error("unreadable image %s: %s", path, msg)
    if not ds.images:
        raise InputError(f"{index}: no readable images")
    return ds


def _patch_sets(images):
    return [sampler.extract_patches(im) for im in images]


def _sgd_from(args, values: dict[str, str], base: trainer.SgdConfig) -> trainer.SgdConfig:
    cfg = trainer.apply_overrides(base, values)
    flags = {f.name: getattr(args, f.name) for f in dataclasses.fields(cfg)
             if getattr(args, f.name, None) is not None}
    return dataclasses.replace(cfg, **flags)


def _add_sgd_flags(p) -> None:
    g = p.add_argument_group("optimizer (override the config file)")
    g.add_argument("--base-lr", dest="base_lr", type=float)
    g.add_argument("--lr-drop-factor", dest="lr_drop_factor", type=float)
    g.add_argument("--lr-drop-every", dest="lr_drop_every", type=int)
    g.add_argument("--momentum", type=float)
    g.add_argument("--weight-decay", dest="weight_decay", type=float)
    g.add_argument("--batch-size", dest="batch_size", type=int)
    g.add_argument("--max-iterations", dest="max_iterations", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--no-decay-biases", dest="decay_biases", action="store_const", const=False)


# -- commands ---------------------------------------------------------------

def cmd_synth(args) -> int:
    values = _config_values(args, synth.SynthConfig)
    cfg = trainer.apply_overrides(synth.SynthConfig(), values)
    flags = {f.name: getattr(args, f.name) for f in dataclasses.fields(cfg)
             if getattr(args, f.name, None) is not None}
    cfg = dataclasses.replace(cfg, **flags)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        res = synth.synth_generate(cfg, out)
    except OSError as exc:
        raise ConfigurationError(f"cannot write {out}: {exc}") from exc
    print(f"wrote {cfg.n_train} train and {cfg.n_test} test lines to {res.root}")
    return EXIT_OK


def _split_validation(images, fraction: float, seed: int):
    if fraction <= 0:
        return images, []
    order = np.random.default_rng([seed, 7]).permutation(len(images))
    n_val = max(1, int(round(fraction * len(images))))
    val_idx = set(order[:n_val].tolist())
    train = [im for i, im in enumerate(images) if i not in val_idx]
    val = [im for i, im in enumerate(images) if i in val_idx]
    return train, val


def _write_val_csv(path: Path, checkpoints) -> None:
    rows = [(it, acc) for it, _, acc in checkpoints if acc is not None]
    existing = path.exists()
    with open(path, "a", encoding="utf-8", newline="\n") as fh:
        if not existing:
            fh.write("iteration,patch_val_accuracy\n")
        for it, acc in rows:
            fh.write(f"{it},{acc!r}\n")


def _read_val_csv(path: Path) -> list[tuple[int, float]]:
    if not path.exists():
        return []
    with open(path, encoding="utf-8") as fh:
        return [(int(r["iteration"]), float(r["patch_val_accuracy"])) for r in csv.DictReader(fh)]


def _read_log(path: Path):
    with open(path, encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [int(r["iteration"]) for r in rows], [float(r["loss"]) for r in rows]


def _training_figure(out: Path, name: str) -> None:
    it, loss = _read_log(out / "train_log.csv")
    val = _read_val_csv(out / "val_accuracy.csv")
    acc = (tuple(zip(*val)) if val else None)
    plotting.loss_figure(it, loss, out / name, accuracy=acc)


def cmd_train(args) -> int:
    values = _config_values(args, trainer.SgdConfig)
    cfg = _sgd_from(args, values, trainer.SgdConfig())
    out = Path(args.out)
    ckdir = out / "checkpoints"
    ckdir.mkdir(parents=True, exist_ok=True)
    ds = _load(args.train_index, args.classes)
    train_imgs, val_imgs = _split_validation(ds.images, args.val_fraction, cfg.seed)
    x, y = sampler.patch_arrays(_patch_sets(train_imgs))
    xv, yv = sampler.patch_arrays(_patch_sets(val_imgs)) if val_imgs else (None, None)
    if args.resume:
        params = patchnet.load(_require(args.resume))
        if params.num_classes != len(ds.classes):
            raise ConfigurationError(f"checkpoint has K={params.num_classes}, "
                                     f"dataset dictionary has K={len(ds.classes)}")
    else:
        params = patchnet.build(args.profile, len(ds.classes), cfg.seed)
    evaluate = (lambda p: trainer.patch_accuracy(p, xv, yv)) if xv is not None else None
    _write_manifest(out, "train", {
        "sgd": dataclasses.asdict(cfg), "profile": params.profile, "num_classes": params.num_classes,
        "train_index": str(args.train_index), "classes": ds.classes, "val_fraction": args.val_fraction,
        "checkpoint_every": args.checkpoint_every, "resume": args.resume,
        "start_iteration": params.iteration, "train_patches": int(len(x))})
    res = trainer.train_simple(params, x, y, cfg, log_path=out / "train_log.csv",
                               checkpoint_dir=ckdir, checkpoint_every=args.checkpoint_every,
                               evaluate=evaluate)
    if evaluate is not None and (not res.checkpoints or res.checkpoints[-1][0] != params.iteration):
        params.patch_val_accuracy = evaluate(params)
        res.checkpoints.append((params.iteration, None, params.patch_val_accuracy))
    patchnet.save(params, out / "final.ecn")
    _write_val_csv(out / "val_accuracy.csv", res.checkpoints)
    val = _read_val_csv(out / "val_accuracy.csv")
    summary = {"final_iteration": params.iteration,
               "attainable_patch_accuracy": max((a for _, a in val), default=None),
               "final_patch_val_accuracy": params.patch_val_accuracy}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    if (out / "train_log.csv").stat().st_size:
        _training_figure(out, "loss.png")
    print(json.dumps(summary))
    return EXIT_OK


def _attainable(args) -> float | None:
    if args.attainable is not None:
        return args.attainable
    if args.train_run:
        summary = _require(Path(args.train_run) / "summary.json")
        return json.loads(summary.read_text(encoding="utf-8"))["attainable_patch_accuracy"]
    return None


def cmd_finetune(args) -> int:
    values = _config_values(args, trainer.SgdConfig, trainer.EcnConfig)
    sgd = _sgd_from(args, values, trainer.FINETUNE_SGD)
    ecn_cfg = trainer.apply_overrides(trainer.EcnConfig(), values)
    if args.n is not None:
        ecn_cfg = dataclasses.replace(ecn_cfg, n=args.n)
    if args.warm_fraction is not None:
        ecn_cfg = dataclasses.replace(ecn_cfg, warm_fraction=args.warm_fraction)
    ecn_cfg = dataclasses.replace(ecn_cfg, sgd=sgd)
    out = Path(args.out)
    ckdir = out / "checkpoints"
    ckdir.mkdir(parents=True, exist_ok=True)
    params = patchnet.load(_require(args.resume or args.warm))
    ds = _load(args.train_index, args.classes)
    if params.num_classes != len(ds.classes):
        raise ConfigurationError(f"checkpoint has K={params.num_classes}, "
                                 f"dataset dictionary has K={len(ds.classes)}")
    attainable = _attainable(args)
    if not args.resume:
        trainer.check_warm_start(args.warm_accuracy if args.warm_accuracy is not None
                                 else params.patch_val_accuracy,
                                 attainable or 0.0, ecn_cfg.warm_fraction)
    ens = sampler.make_ensemble_dataset(_patch_sets(ds.images), ecn_cfg.n, sgd.seed)
    _write_manifest(out, "finetune", {
        "ecn": dataclasses.asdict(ecn_cfg), "warm_checkpoint": args.warm, "resume": args.resume,
        "attainable": attainable, "warm_accuracy": params.patch_val_accuracy,
        "train_index": str(args.train_index), "samples": len(ens), "skipped_images": ens.skipped})
    trainer.finetune_ecn(params, ens, ecn_cfg, attainable=attainable,
                         warm_accuracy=args.warm_accuracy, resume=bool(args.resume),
                         log_path=out / "train_log.csv", checkpoint_dir=ckdir,
                         checkpoint_every=args.checkpoint_every)
    patchnet.save(params, out / "final.ecn")
    _training_figure(out, "loss.png")
    print(f"fine-tuned {params.iteration} iterations; checkpoint {out / 'final.ecn'}")
    return EXIT_OK


WIDTH_BIN = 40


def _width_accuracy(out: Path, widths, correct) -> None:
    widths = np.asarray(widths)
    correct = np.asarray(correct, dtype=float)
    lo = (widths // WIDTH_BIN) * WIDTH_BIN
    bins, acc, counts = [], [], []
    with open(out / "accuracy_by_width.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("width_min,width_max,count,accuracy\n")
        for b in np.unique(lo):
            sel = lo == b
            a = float(correct[sel].mean())
            fh.write(f"{b},{b + WIDTH_BIN - 1},{int(sel.sum())},{a!r}\n")
            bins.append((int(b), int(b + WIDTH_BIN - 1)))
            acc.append(a)
            counts.append(int(sel.sum()))
    plotting.width_accuracy_figure(bins, acc, counts, out / "accuracy_by_width.png")


def cmd_classify(args) -> int:
    params = patchnet.load(_require(args.checkpoint))
    ds = _load(args.index, args.classes)
    if params.num_classes != len(ds.classes):
        raise ConfigurationError(f"checkpoint {args.checkpoint} has K={params.num_classes}, "
                                 f"dataset dictionary has K={len(ds.classes)}")
    out = Path(args.out)
    _write_manifest(out, "classify", {"checkpoint": args.checkpoint, "index": str(args.index),
                                      "rule": args.rule, "classes": ds.classes})
    scores = inference.classify_dataset(params, _patch_sets(ds.images), (args.rule,))[args.rule]
    ids = [im.source_id for im in ds.images]
    inference.write_predictions(out / "predictions.csv", ids, scores, ds.classes)
    correct = [s.predicted == im.label for s, im in zip(scores, ds.images)]
    _width_accuracy(out, [im.width for im in ds.images], correct)
    print(f"{len(ids)} images, accuracy {np.mean(correct):.4f} ({args.rule})")
    return EXIT_OK


def cmd_features(args) -> int:
    params = patchnet.load(_require(args.checkpoint))
    ds = _load(args.index, args.classes)
    feats = inference.extract_fc5(params, _patch_sets(ds.images))
    out = Path(args.out)
    _write_manifest(out.parent, "features", {"checkpoint": args.checkpoint, "index": str(args.index),
                                             "output": str(out)}, name=f"{out.name}.manifest.json")
    inference.write_features(out, feats, [im.label for im in ds.images])
    print(f"wrote {len(feats)} features of length {len(feats[0].values)} to {out}")
    return EXIT_OK


def cmd_linear_head(args) -> int:
    feats, labels = inference.read_features(_require(args.train_features))
    x = np.stack([f.values for f in feats])
    classes = sampler.read_classes(_require(args.classes)) if args.classes else None
    head = inference.train_linear_head(x, labels, args.regularization, folds=args.folds,
                                       num_classes=len(classes) if classes else None)
    out = Path(args.out)
    _write_manifest(out, "linear-head", {"train_features": args.train_features,
                                         "test_features": args.test_features,
                                         "regularization": head.regularization, "folds": args.folds})
    inference.save_head(out / "head.bin", head)
    if args.test_features:
        tfeats, _ = inference.read_features(_require(args.test_features))
        scores = [inference.classify_linear(head, f) for f in tfeats]
        names = classes or [str(i) for i in range(head.weights.shape[0])]
        inference.write_predictions(out / "predictions.csv", [f.source_id for f in tfeats], scores, names)
    print(f"linear head trained with regularization {head.regularization:g}")
    return EXIT_OK


def _truth_lookup(index: Path) -> dict[str, str]:
    return {rel: label for label, rel, _ in sampler.read_index(_require(index))}


def _aligned(pred_path, truth: dict[str, str]):
    preds = inference.read_predictions(_require(pred_path))
    missing = [sid for sid, _ in preds if sid not in truth]
    if missing:
        raise InputError(f"{pred_path}: {len(missing)} predictions without ground truth, e.g. {missing[0]}")
    return preds


def cmd_eval_cls(args) -> int:
    truth = _truth_lookup(Path(args.truth))
    index = Path(args.truth)
    classes = _classes_for(index, args.classes) or sorted(set(truth.values()))
    lookup = {c: i for i, c in enumerate(classes)}
    preds = _aligned(args.predictions, truth)
    for sid, p in preds:
        if p not in lookup:
            raise InputError(f"{args.predictions}: unknown label {p!r} for {sid}")
    y_true = [lookup[truth[sid]] for sid, _ in preds]
    y_pred = [lookup[p] for _, p in preds]
    rep = evaluation.confusion_and_accuracy(y_pred, y_true, len(classes))
    out = Path(args.out)
    _write_manifest(out, "eval-cls", {"predictions": args.predictions, "truth": args.truth,
                                      "compare": args.compare})
    doc = {"samples": rep.total, "accuracy": rep.accuracy, "macro_accuracy": rep.macro_accuracy,
           "per_class": {c: (None if np.isnan(a) else float(a)) for c, a in zip(classes, rep.per_class)}}
    if args.compare:
        other = dict(_aligned(args.compare, truth))
        ids = [sid for sid, _ in preds]
        if set(other) != set(ids):
            raise InputError(f"{args.compare} covers different images than {args.predictions}")
        a_ok = [p == truth[sid] for sid, p in preds]
        b_ok = [other[sid] == truth[sid] for sid in ids]
        m = evaluation.mcnemar(a_ok, b_ok)
        doc["mcnemar"] = dataclasses.asdict(m)
        doc["compare_accuracy"] = float(np.mean(b_ok))
    with open(out / "confusion.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["truth\\pred"] + classes)
        for c, row in zip(classes, rep.matrix):
            w.writerow([c] + [int(v) for v in row])
    (out / "report.json").write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    plotting.confusion_figure(rep.matrix, classes, rep.per_class, out / "confusion.png")
    print(json.dumps(doc))
    return EXIT_OK


def _write_box_report(out: Path, name: str, rep: evaluation.JointEvalReport, extra=None) -> dict:
    doc = rep.to_dict()
    if extra:
        doc.update(extra)
    (out / f"{name}.json").write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    with open(out / f"{name}.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("correct,wrong,missing,precision,recall,fscore\n")
        fh.write(f"{rep.correct},{rep.wrong},{rep.missing},"
                 f"{rep.precision:.2f},{rep.recall:.2f},{rep.fscore:.2f}\n")
    return doc


def cmd_eval_joint(args) -> int:
    det = evaluation.read_records(_require(args.detections))
    gt = evaluation.read_records(_require(args.ground_truth))
    rep = evaluation.joint_eval(det, gt)
    out = Path(args.out)
    _write_manifest(out, "eval-joint", {"detections": args.detections, "ground_truth": args.ground_truth})
    print(json.dumps(_write_box_report(out, "joint", rep)))
    return EXIT_OK


def cmd_eval_e2e(args) -> int:
    det = evaluation.read_records(_require(args.detections))
    gt = evaluation.read_records(_require(args.ground_truth))
    rep = evaluation.e2e_eval(det, gt, args.confidence_threshold)
    out = Path(args.out)
    _write_manifest(out, "eval-e2e", {"detections": args.detections, "ground_truth": args.ground_truth,
                                      "confidence_threshold": args.confidence_threshold})
    print(json.dumps(_write_box_report(out, "e2e", rep, rep.details[0] if rep.details else None)))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .verify import run_gradient_suite

    ok = True
    for name, report in run_gradient_suite(tolerance=args.tolerance, seed=args.seed):
        print(f"{name:<16} {report}")
        ok &= report.passed
    return EXIT_OK if ok else EXIT_NUMERIC


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ecn", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--precision", choices=("float32", "float64"), default="float32")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate the synthetic benchmark")
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--classes", dest="num_classes", type=int)
    s.add_argument("--motifs-per-class", dest="motifs_per_class", type=int)
    s.add_argument("--shared-motifs", dest="shared_motifs", type=int)
    s.add_argument("--width-min", dest="width_min", type=int)
    s.add_argument("--width-max", dest="width_max", type=int)
    s.add_argument("--noise", dest="noise_sigma", type=float)
    s.add_argument("--train", dest="n_train", type=int)
    s.add_argument("--test", dest="n_test", type=int)
    s.add_argument("--class-fraction", dest="class_fraction", type=float)
    s.add_argument("--jitter", type=int)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train the per-patch network")
    t.add_argument("--train-index", required=True)
    t.add_argument("--classes")
    t.add_argument("--profile", default="mini", choices=sorted(patchnet.PROFILES))
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.add_argument("--val-fraction", type=float, default=0.1)
    t.add_argument("--checkpoint-every", type=int, default=250)
    t.add_argument("--resume")
    _add_sgd_flags(t)
    t.set_defaults(func=cmd_train)

    f = sub.add_parser("finetune", help="fine-tune an ensemble of conjoined networks")
    f.add_argument("--warm", required=True)
    f.add_argument("--train-index", required=True)
    f.add_argument("--classes")
    f.add_argument("--attainable", type=float)
    f.add_argument("--train-run", help="training output dir whose summary gives the attainable accuracy")
    f.add_argument("--warm-accuracy", type=float)
    f.add_argument("--warm-fraction", type=float)
    f.add_argument("--n", type=int)
    f.add_argument("--out", required=True)
    f.add_argument("--config")
    f.add_argument("--checkpoint-every", type=int, default=250)
    f.add_argument("--resume")
    _add_sgd_flags(f)
    f.set_defaults(func=cmd_finetune)

    c = sub.add_parser("classify", help="classify whole images")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--index", required=True)
    c.add_argument("--classes")
    c.add_argument("--rule", choices=inference.RULES, default="avg-softmax")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_classify)

    fe = sub.add_parser("features", help="dump mean fc5 features per image")
    fe.add_argument("--checkpoint", required=True)
    fe.add_argument("--index", required=True)
    fe.add_argument("--classes")
    fe.add_argument("--out", required=True)
    fe.set_defaults(func=cmd_features)

    lh = sub.add_parser("linear-head", help="train a linear classifier on fc5 features")
    lh.add_argument("--train-features", required=True)
    lh.add_argument("--test-features")
    lh.add_argument("--classes")
    lh.add_argument("--regularization", type=float)
    lh.add_argument("--folds", type=int, default=5)
    lh.add_argument("--out", required=True)
    lh.set_defaults(func=cmd_linear_head)

    ec = sub.add_parser("eval-cls", help="confusion matrix, accuracy, optional McNemar test")
    ec.add_argument("--predictions", required=True)
    ec.add_argument("--truth", required=True, help="dataset index with ground-truth labels")
    ec.add_argument("--classes")
    ec.add_argument("--compare", help="second predictions file for McNemar's test")
    ec.add_argument("--out", required=True)
    ec.set_defaults(func=cmd_eval_cls)

    ej = sub.add_parser("eval-joint", help="joint detection and script identification")
    ej.add_argument("--detections", required=True)
    ej.add_argument("--ground-truth", required=True)
    ej.add_argument("--out", required=True)
    ej.set_defaults(func=cmd_eval_joint)

    ee = sub.add_parser("eval-e2e", help="relaxed end-to-end recognition with junk filter")
    ee.add_argument("--detections", required=True)
    ee.add_argument("--ground-truth", required=True)
    ee.add_argument("--confidence-threshold", type=float)
    ee.add_argument("--out", required=True)
    ee.set_defaults(func=cmd_eval_e2e)

    g = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    g.add_argument("--tolerance", type=float, default=1e-4)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)
    return p


def _limit_threads():
    n = os.environ.get("ECN_THREADS")
    if not n:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(n))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    set_precision(args.precision)
    _limit_threads()
    try:
        out = getattr(args, "out", None)
        if out and args.command != "features":
            try:
                Path(out).mkdir(parents=True, exist_ok=True)
            except OSError as exc:
                raise ConfigurationError(f"cannot create output directory {out}: {exc}") from exc
        return args.func(args)
    except MissingInput as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except FileNotFoundError as exc:
        print(f"error: missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except NumericError as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except WarmStartError as exc:
        print(f"error: fine-tuning refused: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ConfigurationError, InputError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
