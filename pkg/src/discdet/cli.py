"""Batch entry points: dataset generation, training, evaluation, ablations,
oracle verification, and figure rendering.

Commands
  gen-data  synthesize a weak training split plus a held-out eval split
  train     coordinate descent on a weak dataset; round metrics + checkpoints
  eval      score a prediction checkpoint against a ground-truth dataset
  ablate    the four training variants over a seed list, plus loss-ratio and
            score-threshold sweeps
  verify    run every oracle check and tabulate the results
  report    render figures from the tables already in a run directory

Each command (report aside) writes its tables into --out and finishes by
writing manifest.json there: the invocation, the effective configuration, its
hash, and the artifact list. Primary outputs contain no timestamps, so a rerun
with the same manifest reproduces them byte for byte; wall-clock times live
only in the manifest. A run that dies part-way leaves a FAILED file naming the
error and no manifest.

Exit codes: 0 success, 1 contract or configuration error, 2 oracle
verification failure.
"""

import argparse
import csv
import dataclasses
import os
import sys
import time

import numpy as np

from . import report as figures
from .configio import (SCENE_PREFIX, TRAIN_PREFIX, config_hash, load_config,
                       scene_config, train_config, write_manifest)
from .core import ContractViolation
from .evalmetrics import Detection, average_precision, corloc
from .models import load_checkpoint, read_checkpoint_meta, save_checkpoint
from .synthdata import (DatasetFormatError, generate_dataset, load_dataset,
                        save_dataset, to_weak)
from .trainer import coordinate_descent, predict_detections
from .verification import run_all

# the default benchmark: 200 weak training images, 100 held-out eval images,
# eval drawn from the same scene distribution at dataset_seed + 1
TRAIN_IMAGES = 200
EVAL_IMAGES = 100

METRIC_COLUMNS = ("round", "eta", "cross", "self_cond", "self_pred", "disc", "corloc")

# pointwise_* severs the named head's stochastic half: pointwise_cond feeds a
# zero noise vector (one sample, conditional self-diversity dropped),
# pointwise_pred drops the prediction self-diversity term, pointwise_both does
# both at once
ABLATION_VARIANTS = (
    ("full", {}),
    ("pointwise_cond", dict(zero_noise=True, cond_self_diversity=False, k_samples=1)),
    ("pointwise_pred", dict(pred_self_diversity=False)),
    ("pointwise_both", dict(zero_noise=True, cond_self_diversity=False, k_samples=1,
                            pred_self_diversity=False)),
)

LAMBDA_SWEEP = (1.0, 0.33, 3.0)
THRESHOLD_SWEEP = (0.1, 0.2, 0.3, 0.4, 0.5)


def _f(value) -> str:
    """Full-precision decimal text; equal floats give equal bytes."""
    return repr(float(value))


def _write_table(path, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


@dataclasses.dataclass(frozen=True)
class EvalSummary:
    """Detector quality over one ground-truth dataset."""

    ap: dict            # class -> AP, or None for a class without ground truth
    mean_ap: float
    corloc: dict        # class -> rate, classes with ground truth only
    mean_corloc: float


def evaluate_detector(theta_p, dataset, score_threshold: float = 0.0,
                      nms_iou: float = 0.3) -> EvalSummary:
    """Per-class AP and CorLoc of a prediction head over a dataset with boxes."""
    withgt = [s for s in dataset if s.ground_truth is not None]
    if not withgt:
        raise ContractViolation("evaluation needs ground-truth boxes in the dataset")
    num_classes = withgt[0].annotation.num_classes
    dets = []
    ap_gts = {c: [] for c in range(1, num_classes + 1)}
    cor_gts = []
    for s in withgt:
        dets.extend(predict_detections(theta_p, s, score_threshold, nms_iou))
        for c, g in s.ground_truth:
            ap_gts[c].append((s.image_id, g))
            cor_gts.append((s.image_id, c, g))
    by_class = {c: [] for c in ap_gts}
    for d in dets:
        by_class[d.class_id].append(d)
    ap = {c: average_precision(by_class[c], ap_gts[c]) for c in ap_gts}
    seen = [v for v in ap.values() if v is not None]
    rates, mean_cor = corloc(dets, cor_gts)
    return EvalSummary(ap, float(np.mean(seen)) if seen else 0.0, rates, mean_cor)


def _train_overrides(args) -> dict:
    """Flag values folded into train.* config keys; absent flags change nothing."""
    pairs = (("seed", "seed"), ("rounds", "outer_rounds"),
             ("loss_ratio", "loss_ratio"), ("gamma", "gamma"),
             ("k", "k_samples"), ("epsilon", "epsilon"),
             ("score_threshold", "score_threshold"), ("nms_iou", "nms_iou"))
    out = {}
    for attr, field in pairs:
        value = getattr(args, attr, None)
        if value is not None:
            out[TRAIN_PREFIX + field] = str(value) if isinstance(value, int) else _f(value)
    return out


def _finish(args, command: str, mapping, artifacts, started: float) -> None:
    failed = os.path.join(args.out, "FAILED")
    if os.path.exists(failed):
        os.remove(failed)
    write_manifest(os.path.join(args.out, "manifest.json"), command,
                   mapping, artifacts, started)


def _eval_split_config(scene):
    """The held-out split convention: same scenes, dataset seed one above."""
    return dataclasses.replace(scene, dataset_seed=scene.dataset_seed + 1)


def cmd_gen_data(args, started: float) -> int:
    overrides = {}
    if args.seed is not None:
        overrides[SCENE_PREFIX + "dataset_seed"] = str(args.seed)
    mapping = load_config(args.config, overrides)
    if args.dump_config:
        sys.stdout.write("".join(f"{k}={mapping[k]}\n" for k in sorted(mapping)))
        return 0
    if args.out is None:
        raise ContractViolation("gen-data needs --out (or --dump-config)")
    scene = scene_config(mapping)
    train = to_weak(generate_dataset(scene, args.train_images))
    held = generate_dataset(_eval_split_config(scene), args.eval_images)
    train_path = os.path.join(args.out, "train.jsonl")
    eval_path = os.path.join(args.out, "eval.jsonl")
    save_dataset(train, train_path)
    save_dataset(held, eval_path)
    mapping["run.train_images"] = str(args.train_images)
    mapping["run.eval_images"] = str(args.eval_images)
    _finish(args, args.command_line, mapping, [train_path, eval_path], started)
    print(f"wrote {len(train)} weak training images to {train_path}")
    print(f"wrote {len(held)} eval images with ground truth to {eval_path}")
    return 0


def cmd_train(args, started: float) -> int:
    mapping = load_config(args.config, _train_overrides(args))
    cfg = train_config(mapping)
    dataset = load_dataset(args.dataset)
    mapping["run.dataset"] = args.dataset

    def on_round(m, params):
        line = (f"round {m.round_idx}: disc {m.disc:.4f} cross {m.cross:.4f}"
                + (f" corloc {m.corloc:.3f}" if m.corloc is not None else "")
                + f" ({m.seconds:.1f}s)")
        print(line, flush=True)

    theta_p, theta_c, metrics = coordinate_descent(dataset, cfg, on_round=on_round)
    rows = [(str(m.round_idx), _f(m.eta), _f(m.cross), _f(m.self_cond),
             _f(m.self_pred), _f(m.disc),
             "" if m.corloc is None else _f(m.corloc)) for m in metrics]
    table = os.path.join(args.out, figures.TRAIN_TABLE)
    _write_table(table, METRIC_COLUMNS, rows)
    h = config_hash(mapping)
    pred_path = os.path.join(args.out, "pred.ckpt")
    cond_path = os.path.join(args.out, "cond.ckpt")
    save_checkpoint(pred_path, theta_p, "pred", h)
    save_checkpoint(cond_path, theta_c, "cond", h)
    _finish(args, args.command_line, mapping, [table, pred_path, cond_path], started)
    return 0


def cmd_eval(args, started: float) -> int:
    params, kind = load_checkpoint(args.checkpoint)
    if kind != "pred":
        raise ContractViolation(
            f"evaluation needs a prediction checkpoint, {args.checkpoint} holds {kind!r}")
    dataset = load_dataset(args.dataset)
    if not dataset:
        raise ContractViolation(f"{args.dataset}: empty dataset")
    feat_dim = dataset[0].feature_matrix().shape[1]
    if feat_dim != params.input_dim:
        raise ContractViolation(
            f"checkpoint expects {params.input_dim} features per proposal, "
            f"{args.dataset} provides {feat_dim}")
    if dataset[0].annotation.num_classes != params.num_classes:
        raise ContractViolation(
            f"checkpoint covers {params.num_classes} classes, "
            f"{args.dataset} annotates {dataset[0].annotation.num_classes}")
    summary = evaluate_detector(params, dataset, args.score_threshold, args.nms_iou)
    rows = []
    for c in sorted(summary.ap):
        rows.append(("ap", str(c), "" if summary.ap[c] is None else _f(summary.ap[c])))
    rows.append(("ap", "mean", _f(summary.mean_ap)))
    for c in sorted(summary.corloc):
        rows.append(("corloc", str(c), _f(summary.corloc[c])))
    rows.append(("corloc", "mean", _f(summary.mean_corloc)))
    table = os.path.join(args.out, figures.EVAL_TABLE)
    _write_table(table, ("metric", "class", "value"), rows)
    mapping = {
        "eval.checkpoint": args.checkpoint,
        "eval.dataset": args.dataset,
        "eval.score_threshold": _f(args.score_threshold),
        "eval.nms_iou": _f(args.nms_iou),
        "eval.train_config_sha256": read_checkpoint_meta(args.checkpoint)["config_hash"],
    }
    _finish(args, args.command_line, mapping, [table], started)
    print(f"mAP {summary.mean_ap:.4f}  CorLoc {summary.mean_corloc:.4f}")
    return 0


def ordering_checks(mean_map: dict):
    """The directional claims the ablation must support, as
    (description, margin, ok) rows; a negative margin flags a violation."""
    full = mean_map["full"]
    checks = [("full > pointwise_both", full - mean_map["pointwise_both"],
               full > mean_map["pointwise_both"])]
    for name in ("pointwise_cond", "pointwise_pred"):
        checks.append((f"full >= {name}", full - mean_map[name], full >= mean_map[name]))
    return checks


def cmd_ablate(args, started: float) -> int:
    mapping = load_config(args.config, _train_overrides(args))
    base_cfg = train_config(mapping)
    scene = scene_config(mapping)
    dataset = load_dataset(args.dataset)
    eval_set = generate_dataset(_eval_split_config(scene), args.eval_images)
    seeds = [base_cfg.seed + i for i in range(args.num_seeds)]
    mapping["run.dataset"] = args.dataset
    mapping["run.eval_images"] = str(args.eval_images)
    mapping["run.seeds"] = ",".join(str(s) for s in seeds)

    cache = {}

    def train_eval(cfg):
        key = dataclasses.astuple(cfg)
        if key not in cache:
            theta_p, _, _ = coordinate_descent(dataset, cfg)
            cache[key] = evaluate_detector(theta_p, eval_set)
        return cache[key]

    runs_rows, summary_rows = [], []
    mean_map = {}
    for name, kw in ABLATION_VARIANTS:
        maps, cors = [], []
        for seed in seeds:
            summary = train_eval(dataclasses.replace(base_cfg, seed=seed, **kw))
            maps.append(summary.mean_ap)
            cors.append(summary.mean_corloc)
            runs_rows.append((name, str(seed), _f(summary.mean_ap),
                              _f(summary.mean_corloc)))
            print(f"{name} seed={seed}: mAP {summary.mean_ap:.4f} "
                  f"CorLoc {summary.mean_corloc:.4f}", flush=True)
        mean_map[name] = float(np.mean(maps))
        summary_rows.append((name, _f(np.mean(maps)), _f(np.std(maps)),
                             _f(np.mean(cors)), _f(np.std(cors))))

    checks = ordering_checks(mean_map)
    for desc, margin, ok in checks:
        print(f"{desc}: margin {margin:+.4f} -> {'ok' if ok else 'VIOLATION'}")

    sweep_rows = {"lambda": [], "threshold": []}
    for lam in LAMBDA_SWEEP:
        summary = train_eval(dataclasses.replace(base_cfg, loss_ratio=lam))
        sweep_rows["lambda"].append((_f(lam), _f(summary.mean_ap),
                                     _f(summary.mean_corloc)))
        print(f"loss_ratio={lam}: mAP {summary.mean_ap:.4f}", flush=True)
    for thr in THRESHOLD_SWEEP:
        summary = train_eval(dataclasses.replace(base_cfg, score_threshold=thr))
        sweep_rows["threshold"].append((_f(thr), _f(summary.mean_ap),
                                        _f(summary.mean_corloc)))
        print(f"score_threshold={thr}: mAP {summary.mean_ap:.4f}", flush=True)

    paths = {
        "runs": os.path.join(args.out, "runs.csv"),
        "summary": os.path.join(args.out, figures.ABLATION_TABLE),
        "ordering": os.path.join(args.out, "ordering.csv"),
        "lambda": os.path.join(args.out, figures.LAMBDA_TABLE),
        "threshold": os.path.join(args.out, figures.THRESHOLD_TABLE),
    }
    _write_table(paths["runs"], ("variant", "seed", "map", "corloc"), runs_rows)
    _write_table(paths["summary"],
                 ("variant", "map_mean", "map_sd", "corloc_mean", "corloc_sd"),
                 summary_rows)
    _write_table(paths["ordering"], ("check", "margin", "ok"),
                 [(desc, _f(margin), "ok" if ok else "VIOLATION")
                  for desc, margin, ok in checks])
    _write_table(paths["lambda"], ("loss_ratio", "map", "corloc"),
                 sweep_rows["lambda"])
    _write_table(paths["threshold"], ("score_threshold", "map", "corloc"),
                 sweep_rows["threshold"])
    _finish(args, args.command_line, mapping, list(paths.values()), started)
    return 0


def cmd_verify(args, started: float) -> int:
    results = run_all(args.seed if args.seed is not None else 0)
    rows = []
    for r in results:
        print(r.line())
        rows.append((r.name, str(r.instances), _f(r.max_error), _f(r.tolerance),
                     "pass" if r.passed else "FAIL"))
    table = os.path.join(args.out, "checks.csv")
    _write_table(table, ("check", "instances", "max_error", "tolerance", "status"),
                 rows)
    mapping = {"verify.seed": str(args.seed if args.seed is not None else 0)}
    _finish(args, args.command_line, mapping, [table], started)
    return 0 if all(r.passed for r in results) else 2


def cmd_report(args, started: float) -> int:
    written = figures.render_all(args.out)
    if not written:
        raise ContractViolation(f"no recognized tables under {args.out}")
    for path in written:
        print(f"rendered {path}")
    return 0


def _parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(
        prog="discdet",
        description="dissimilarity-coefficient weakly supervised detection")
    sub = top.add_subparsers(dest="cmd", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        return p

    def train_flags(p):
        p.add_argument("--seed", type=int, help="training seed (train.seed)")
        p.add_argument("--rounds", type=int, help="outer rounds (train.outer_rounds)")
        p.add_argument("--lambda", dest="loss_ratio", type=float,
                       help="localization loss ratio (train.loss_ratio)")
        p.add_argument("--gamma", type=float, help="self-diversity mix (train.gamma)")
        p.add_argument("--k", type=int, help="conditional samples (train.k_samples)")
        p.add_argument("--epsilon", type=float,
                       help="loss-augmentation temperature (train.epsilon)")
        p.add_argument("--score-threshold", type=float,
                       help="pseudo-label score floor (train.score_threshold)")
        p.add_argument("--nms-iou", type=float,
                       help="pseudo-label suppression overlap (train.nms_iou)")

    p = add("gen-data", cmd_gen_data, "synthesize training and eval splits")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, help="dataset seed (scene.dataset_seed)")
    p.add_argument("--train-images", type=int, default=TRAIN_IMAGES)
    p.add_argument("--eval-images", type=int, default=EVAL_IMAGES)
    p.add_argument("--dump-config", action="store_true",
                   help="print the effective config and exit")

    p = add("train", cmd_train, "run coordinate descent on a weak dataset")
    p.add_argument("--dataset", required=True, help="weak training set (jsonl)")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--out", required=True, help="output directory")
    train_flags(p)

    p = add("eval", cmd_eval, "score a prediction checkpoint")
    p.add_argument("--checkpoint", required=True, help="prediction checkpoint")
    p.add_argument("--dataset", required=True, help="eval set with ground truth")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--score-threshold", type=float, default=0.0,
                   help="detection reporting floor")
    p.add_argument("--nms-iou", type=float, default=0.3,
                   help="detection suppression overlap")

    p = add("ablate", cmd_ablate, "train the four variants plus sweeps")
    p.add_argument("--dataset", required=True, help="weak training set (jsonl)")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--num-seeds", type=int, default=5)
    p.add_argument("--eval-images", type=int, default=EVAL_IMAGES)
    train_flags(p)

    p = add("verify", cmd_verify, "run the oracle checks")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="base seed for the checks")

    p = add("report", cmd_report, "render figures for a run directory")
    p.add_argument("--out", required=True, help="run directory holding tables")
    return top


def _mark_failed(out, exc) -> None:
    if out is None or not os.path.isdir(out):
        return
    with open(os.path.join(out, "FAILED"), "w", encoding="utf-8") as fh:
        fh.write(f"{type(exc).__name__}: {exc}\n")
    stale = os.path.join(out, "manifest.json")
    if os.path.exists(stale):
        os.remove(stale)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad flags; 2 is reserved for verification failure
        return 0 if exc.code in (0, None) else 1
    args.command_line = " ".join(argv)
    out = getattr(args, "out", None)
    if out is not None and args.cmd != "report":
        os.makedirs(out, exist_ok=True)
    started = time.time()
    try:
        return args.func(args, started)
    except (ContractViolation, DatasetFormatError, OSError) as exc:
        _mark_failed(out, exc)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        _mark_failed(out, exc)
        raise


if __name__ == "__main__":
    sys.exit(main())
