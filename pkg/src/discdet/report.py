"""Figure rendering for the delimited tables the batch commands emit.

Training, evaluation, and ablation runs write plain comma-separated tables so
that plotting stays out of the compute process. This module is the committed
renderer: point render_all at a run directory and it turns whichever tables it
recognizes into PNG files next to them. Matplotlib is imported lazily with the
Agg backend, so nothing here needs a display and importing the package does
not pull in a plotting stack.

Every renderer is total over its table: missing files are skipped, empty
optional columns (a CorLoc column on a dataset without ground truth) drop the
corresponding series rather than failing.
"""

import csv
import os

from .core import ContractViolation

TRAIN_TABLE = "metrics.csv"
EVAL_TABLE = "report.csv"
ABLATION_TABLE = "summary.csv"
LAMBDA_TABLE = "lambda_sweep.csv"
THRESHOLD_TABLE = "threshold_sweep.csv"


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def read_table(path):
    """Rows of a comma-separated table as dicts keyed by the header line."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    if any(None in row or None in row.values() for row in rows):
        raise ContractViolation(f"ragged table: {path}")
    return rows


def _column(rows, name, kind=float):
    return [kind(row[name]) for row in rows]


def render_training_curves(table_path, out_path):
    """Objective terms per round, with CorLoc on a twin axis when logged."""
    rows = read_table(table_path)
    if not rows:
        return False
    plt = _pyplot()
    rounds = _column(rows, "round", int)
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    for name in ("cross", "self_cond", "self_pred", "disc"):
        ax.plot(rounds, _column(rows, name), marker="o", label=name)
    ax.set_xlabel("round")
    ax.set_ylabel("dataset-mean objective terms")
    ax.set_xticks(rounds)
    ax.legend(loc="upper right", fontsize=8)
    if all(row["corloc"] != "" for row in rows):
        twin = ax.twinx()
        twin.plot(rounds, _column(rows, "corloc"), marker="s", color="black",
                  linestyle="--", label="corloc")
        twin.set_ylabel("train CorLoc")
        twin.set_ylim(0.0, 1.0)
        twin.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return True


def render_eval_report(table_path, out_path):
    """Per-class AP and CorLoc bars; the mean bars sit last and darker."""
    rows = read_table(table_path)
    groups = {"ap": {}, "corloc": {}}
    for row in rows:
        if row["metric"] in groups and row["value"] != "":
            groups[row["metric"]][row["class"]] = float(row["value"])
    if not groups["ap"] and not groups["corloc"]:
        return False
    plt = _pyplot()
    labels = [k for k in groups["ap"] if k != "mean"] or \
             [k for k in groups["corloc"] if k != "mean"]
    labels = sorted(labels, key=int) + ["mean"]
    x = range(len(labels))
    width = 0.38
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    for shift, (name, values) in enumerate(sorted(groups.items())):
        pos = [i + (shift - 0.5) * width for i in x]
        bars = [values.get(lab) for lab in labels]
        pos, bars = zip(*[(p, b) for p, b in zip(pos, bars) if b is not None])
        ax.bar(pos, bars, width=width, label=name,
               color=["#346beb", "#eb8034"][shift])
    ax.set_xticks(list(x))
    ax.set_xticklabels(["class " + lab if lab != "mean" else lab for lab in labels])
    ax.set_ylim(0.0, 1.05)
    ax.set_ylabel("score")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return True


def render_ablation(table_path, out_path):
    """Mean mAP and CorLoc per training variant with across-seed error bars."""
    rows = read_table(table_path)
    if not rows:
        return False
    plt = _pyplot()
    variants = [row["variant"] for row in rows]
    x = range(len(variants))
    width = 0.38
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    for shift, stem in enumerate(("map", "corloc")):
        pos = [i + (shift - 0.5) * width for i in x]
        ax.bar(pos, _column(rows, stem + "_mean"), width=width,
               yerr=_column(rows, stem + "_sd"), capsize=3,
               label={"map": "mAP", "corloc": "CorLoc"}[stem],
               color=["#346beb", "#eb8034"][shift])
    ax.set_xticks(list(x))
    ax.set_xticklabels(variants)
    ax.set_ylim(0.0, 1.05)
    ax.set_ylabel("mean over seeds")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return True


def _render_sweep(table_path, out_path, x_name, x_label, log_x=False):
    rows = read_table(table_path)
    if not rows:
        return False
    plt = _pyplot()
    xs = _column(rows, x_name)
    order = sorted(range(len(xs)), key=lambda i: xs[i])
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    for name, label in (("map", "mAP"), ("corloc", "CorLoc")):
        ys = _column(rows, name)
        ax.plot([xs[i] for i in order], [ys[i] for i in order], marker="o",
                label=label)
    if log_x:
        ax.set_xscale("log")
        ax.set_xticks(xs)
        ax.set_xticklabels([repr(v) for v in xs])
    ax.set_xlabel(x_label)
    ax.set_ylim(0.0, 1.05)
    ax.set_ylabel("eval score")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return True


def render_lambda_sweep(table_path, out_path):
    """Eval metrics across localization loss ratios."""
    return _render_sweep(table_path, out_path, "loss_ratio", "loss ratio", log_x=True)


def render_threshold_sweep(table_path, out_path):
    """Eval metrics across conditional score thresholds."""
    return _render_sweep(table_path, out_path, "score_threshold", "score threshold")


RENDERERS = (
    (TRAIN_TABLE, "training_curves.png", render_training_curves),
    (EVAL_TABLE, "eval_report.png", render_eval_report),
    (ABLATION_TABLE, "ablation.png", render_ablation),
    (LAMBDA_TABLE, "lambda_sweep.png", render_lambda_sweep),
    (THRESHOLD_TABLE, "threshold_sweep.png", render_threshold_sweep),
)


def render_all(run_dir):
    """Renders a figure for every recognized table under run_dir.

    Returns the list of figure paths written. A directory without any
    recognized table yields an empty list; the caller decides whether that is
    worth an error.
    """
    written = []
    for table, figure, renderer in RENDERERS:
        table_path = os.path.join(run_dir, table)
        if not os.path.exists(table_path):
            continue
        out_path = os.path.join(run_dir, figure)
        if renderer(table_path, out_path):
            written.append(out_path)
    return written
