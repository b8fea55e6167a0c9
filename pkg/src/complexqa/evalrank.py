"""Decoy-pool ranking metrics: Top-N hit rates and top-1 ranking loss."""

import csv
import io
import json
import math
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dockq import QualityClass, dockq_class, read_labels
from .errors import DataEmpty, FormatError


@dataclass
class DecoyRecord:
    target_id: str
    decoy_id: str
    true_dockq: float = None
    true_class: QualityClass = None
    pred_score: float = None

    def __post_init__(self):
        if self.true_dockq is not None:
            self.true_dockq = float(self.true_dockq)
            derived = dockq_class(self.true_dockq)
            if self.true_class is None:
                self.true_class = derived
            elif QualityClass(self.true_class) != derived:
                raise ValueError(
                    f"{self.target_id}/{self.decoy_id}: class {self.true_class!r} "
                    f"disagrees with DockQ {self.true_dockq}"
                )
        if self.true_class is not None:
            self.true_class = QualityClass(self.true_class)
        if self.pred_score is not None:
            self.pred_score = float(self.pred_score)
            if math.isnan(self.pred_score):
                raise ValueError(f"{self.target_id}/{self.decoy_id}: predicted score is NaN")


@dataclass(frozen=True)
class HitTriple:
    acceptable_hits: int
    medium_hits: int
    high_hits: int

    def __post_init__(self):
        a, m, h = self.acceptable_hits, self.medium_hits, self.high_hits
        if min(a, m, h) < 0 or not a >= m >= h:
            raise ValueError(f"hit counts must satisfy A >= M >= H >= 0, got {a}/{m}/{h}")

    def __str__(self):
        return f"{self.acceptable_hits}/{self.medium_hits}/{self.high_hits}"

    def as_tuple(self):
        return (self.acceptable_hits, self.medium_hits, self.high_hits)

    @classmethod
    def parse(cls, text):
        parts = str(text).strip().split("/")
        if len(parts) != 3:
            raise ValueError(f"expected A/M/H, got {text!r}")
        return cls(*(int(p) for p in parts))


def _single_target(records):
    targets = {r.target_id for r in records}
    if len(targets) > 1:
        raise ValueError(f"records span several targets: {sorted(targets)}")


def rank_decoys(records):
    """Records of one target ordered by descending ``pred_score``, ties by ``decoy_id``."""
    records = list(records)
    _single_target(records)
    if any(r.pred_score is None for r in records):
        raise ValueError("every record needs a pred_score to be ranked")
    return sorted(records, key=lambda r: (-r.pred_score, r.decoy_id))


def _quality(r):
    if r.true_class is not None:
        return r.true_class
    if r.true_dockq is None:
        raise ValueError(f"{r.target_id}/{r.decoy_id} has no true label")
    return dockq_class(r.true_dockq)


def hit_rate_topn(ranked, n=10):
    """Cumulative A/M/H counts among the first ``n`` entries of an already ranked list."""
    if n < 1:
        raise ValueError("n must be >= 1")
    top = [_quality(r) for r in list(ranked)[:n]]
    return HitTriple(
        sum(q >= QualityClass.ACCEPTABLE for q in top),
        sum(q >= QualityClass.MEDIUM for q in top),
        sum(q >= QualityClass.HIGH for q in top),
    )


def summarize_hits(triples):
    """Number of targets with at least one hit at each level."""
    triples = list(triples)
    return HitTriple(
        sum(t.acceptable_hits > 0 for t in triples),
        sum(t.medium_hits > 0 for t in triples),
        sum(t.high_hits > 0 for t in triples),
    )


def ranking_loss(records):
    """Pool-best true DockQ minus the true DockQ of the top-ranked decoy."""
    ranked = rank_decoys(records)
    if not ranked:
        raise DataEmpty("cannot compute a ranking loss on an empty pool")
    if any(r.true_dockq is None for r in ranked):
        raise ValueError("ranking loss needs true_dockq on every record")
    best = max(r.true_dockq for r in ranked)
    return best - ranked[0].true_dockq


def summarize_losses(losses):
    """Mean and population standard deviation."""
    arr = np.asarray(list(losses), dtype=np.float64)
    if arr.size == 0:
        raise DataEmpty("no losses to summarize")
    return float(arr.mean()), float(arr.std())


# ---------------------------------------------------------------------------
# whole-dataset evaluation
# ---------------------------------------------------------------------------

@dataclass
class TargetResult:
    target_id: str
    hits: HitTriple
    best_hits: HitTriple
    loss: float
    pool_size: int


@dataclass
class EvalReport:
    method: str
    topn: int
    targets: list

    @property
    def hit_summary(self):
        return summarize_hits(t.hits for t in self.targets)

    @property
    def best_summary(self):
        return summarize_hits(t.best_hits for t in self.targets)

    @property
    def loss_summary(self):
        return summarize_losses(t.loss for t in self.targets)

    def to_dict(self):
        mean, std = self.loss_summary
        return {
            "method": self.method,
            "topn": self.topn,
            "targets": [
                {
                    "target_id": t.target_id,
                    "hits": str(t.hits),
                    "best": str(t.best_hits),
                    "ranking_loss": t.loss,
                    "pool_size": t.pool_size,
                }
                for t in self.targets
            ],
            "summary": {
                "hits": str(self.hit_summary),
                "best": str(self.best_summary),
                "loss_mean": mean,
                "loss_std": std,
            },
        }


def group_by_target(records):
    groups = OrderedDict()
    for r in records:
        groups.setdefault(r.target_id, []).append(r)
    return groups


def evaluate(records, topn=10, method="complexqa"):
    """Per-target hits, best-possible hits and ranking loss, targets in input order."""
    groups = group_by_target(records)
    if not groups:
        raise DataEmpty("no records to evaluate")
    results = []
    for target_id, pool in groups.items():
        ranked = rank_decoys(pool)
        oracle = sorted(pool, key=lambda r: (-r.true_dockq, r.decoy_id))
        results.append(TargetResult(
            target_id,
            hit_rate_topn(ranked, topn),
            hit_rate_topn(oracle, topn),
            ranking_loss(pool),
            len(pool),
        ))
    return EvalReport(method, topn, results)


# ---------------------------------------------------------------------------
# CSV input
# ---------------------------------------------------------------------------

def read_scores(path, column="pred_score"):
    """``(target_id, decoy_id) -> score`` from a scores CSV.

    ``column`` falls back to ``pred_dockq`` so score files written by the
    ``score`` command can be ranked directly.
    """
    out = OrderedDict()
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        fields = reader.fieldnames or []
        if column not in fields and "pred_dockq" in fields:
            column = "pred_dockq"
        missing = {"target_id", "decoy_id", column} - set(fields)
        if missing:
            raise FormatError(f"{path}: missing columns {sorted(missing)}")
        for lineno, rec in enumerate(reader, start=2):
            try:
                value = float(rec[column])
            except ValueError:
                raise FormatError(f"{path}:{lineno}: bad score {rec[column]!r}") from None
            key = (rec["target_id"], rec["decoy_id"])
            if key in out:
                raise FormatError(f"{path}:{lineno}: duplicate entry {key}")
            out[key] = value
    return out


def join_scores_labels(scores, labels):
    """Build :class:`DecoyRecord` lists from scores and label rows.

    Returns ``(records, unmatched)`` where ``unmatched`` lists scored decoys
    without a label.
    """
    label_map = {(row.target_id, row.decoy_id): row for row in labels}
    records, unmatched = [], []
    for key, score in scores.items():
        row = label_map.get(key)
        if row is None:
            unmatched.append(key)
            continue
        records.append(DecoyRecord(key[0], key[1], true_dockq=row.dockq, pred_score=score))
    return records, unmatched


def load_records(scores_path, labels_path):
    labels = read_labels(labels_path, target_id="")
    if any(row.target_id == "" for row in labels):
        raise FormatError(f"{labels_path}: a combined labels file needs a target_id column")
    return join_scores_labels(read_scores(scores_path), labels)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def _render(header, rows, fmt):
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
        return buf.getvalue()
    if fmt == "md":
        widths = [max(len(str(c)) for c in col) for col in zip(header, *rows)]
        line = lambda cells: "| " + " | ".join(str(c).ljust(w) for c, w in zip(cells, widths)) + " |"  # noqa: E731
        out = [line(header), "|" + "|".join("-" * (w + 2) for w in widths) + "|"]
        out += [line(r) for r in rows]
        return "\n".join(out) + "\n"
    raise ValueError(f"unknown table format {fmt!r}")


def _as_reports(reports):
    if isinstance(reports, EvalReport):
        reports = [reports]
    reports = list(reports)
    order = [t.target_id for t in reports[0].targets]
    for rep in reports[1:]:
        if [t.target_id for t in rep.targets] != order:
            raise ValueError("reports cover different targets")
    return reports, order


def hits_table(reports, fmt="md"):
    """Per-target Top-N hit triples, one column per method plus BEST, and a Summary row."""
    reports, order = _as_reports(reports)
    header = ["ID"] + [r.method for r in reports] + ["BEST"]
    rows = []
    for i, target_id in enumerate(order):
        rows.append([target_id] + [str(r.targets[i].hits) for r in reports]
                    + [str(reports[0].targets[i].best_hits)])
    rows.append(["Summary"] + [str(r.hit_summary) for r in reports] + [str(reports[0].best_summary)])
    return _render(header, rows, fmt)


def loss_table(reports, fmt="md", digits=3):
    """Per-target ranking losses, one column per method, and a mean ± std row."""
    reports, order = _as_reports(reports)
    header = ["Target"] + [r.method for r in reports]
    rows = [[t] + [f"{r.targets[i].loss:.{digits}f}" for r in reports] for i, t in enumerate(order)]
    summary = ["BEST"]
    for r in reports:
        mean, std = r.loss_summary
        summary.append(f"{mean:.{digits}f} ± {std:.{digits}f}")
    rows.append(summary)
    return _render(header, rows, fmt)


def format_report(reports, fmt="md"):
    """Both tables (md/csv) or a JSON document."""
    if fmt == "json":
        reports, _ = _as_reports(reports)
        return json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True) + "\n"
    sep = "\n" if fmt == "md" else ""
    return hits_table(reports, fmt) + sep + loss_table(reports, fmt)


def plot_losses(reports, path):
    """Grouped bar chart of per-target ranking losses, written as SVG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    reports, order = _as_reports(reports)
    x = np.arange(len(order))
    width = 0.8 / len(reports)
    with matplotlib.rc_context({"svg.hashsalt": "complexqa", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(max(4.0, 0.5 * len(order) + 2), 3.5))
        for k, rep in enumerate(reports):
            ax.bar(x + k * width, [t.loss for t in rep.targets], width, label=rep.method)
        ax.set_xticks(x + 0.4 - width / 2)
        ax.set_xticklabels(order, rotation=45, ha="right")
        ax.set_ylabel("ranking loss")
        ax.set_ylim(0, 1)
        ax.legend()
        fig.tight_layout()
        fig.savefig(Path(path), format="svg", metadata={"Date": None})
        plt.close(fig)
