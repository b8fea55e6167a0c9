"""Command-line entry point: featurize, train, score, rank, dockq.

Exit codes: 0 success, 1 usage or unreadable input, 2 some items failed
(the rest were processed), 3 numeric failure.
"""

import argparse
import csv
import datetime as _dt
import io
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import model as M
from .errors import ComplexQAError, FormatError, NumericError

logger = logging.getLogger("complexqa")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_PARTIAL = 2
EXIT_NUMERIC = 3

SCORE_COLUMNS = ("target_id", "decoy_id", "pred_dockq", "p_incorrect", "p_acceptable", "p_medium", "p_high")
GRAPH_SUFFIX = ".graph"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


@dataclass
class RunManifest:
    command: str
    config_path: str = None
    inputs: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    seed: int = None
    version: str = __version__
    timestamp: str = ""
    details: dict = field(default_factory=dict)

    def write(self, path):
        if not self.timestamp:
            self.timestamp = _timestamp()
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


def _timestamp():
    # SOURCE_DATE_EPOCH pins the time so reruns produce identical manifests
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    when = (_dt.datetime.fromtimestamp(int(epoch), _dt.timezone.utc) if epoch
            else _dt.datetime.now(_dt.timezone.utc).replace(microsecond=0))
    return when.isoformat()


# ---------------------------------------------------------------------------
# input discovery
# ---------------------------------------------------------------------------

def find_pdbs(path):
    """PDB files under ``path`` (or ``path`` itself), sorted for a stable order."""
    path = Path(path)
    if path.is_file():
        return [path]
    if not path.is_dir():
        raise UsageError(f"no such file or directory: {path}")
    return sorted(p for p in path.rglob("*") if p.suffix.lower() in (".pdb", ".ent") and p.is_file())


def _featurize_one(args):
    """Worker: ``(path, k, allow_single_chain) -> (path, bytes | None, error)``."""
    from .featurize import featurize, graph_to_bytes
    from .structio import read_pdb

    path, k, allow_single = args
    try:
        structure = read_pdb(path, allow_single_chain=allow_single)
        return path, graph_to_bytes(featurize(structure, k=k)), None
    except (ComplexQAError, OSError, ValueError) as exc:
        return path, None, f"{type(exc).__name__}: {exc}"


def _run_jobs(fn, items, jobs):
    if jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _load_graphs(input_path, k, jobs, allow_single):
    """Graphs from a PDB tree or a graph-cache tree; returns ``(graphs, failures)``."""
    from .featurize import graph_from_bytes

    root = Path(input_path)
    caches = sorted(root.rglob(f"*{GRAPH_SUFFIX}")) if root.is_dir() else (
        [root] if root.suffix == GRAPH_SUFFIX else [])
    graphs, failures = [], []
    if caches:
        for p in caches:
            try:
                graphs.append(graph_from_bytes(p.read_bytes()))
            except (FormatError, OSError, ValueError, KeyError) as exc:
                failures.append((str(p), f"{type(exc).__name__}: {exc}"))
        return graphs, failures
    pdbs = find_pdbs(root)
    if not pdbs:
        raise UsageError(f"no PDB or graph files found under {root}")
    for path, blob, err in _run_jobs(_featurize_one, [(p, k, allow_single) for p in pdbs], jobs):
        if err:
            failures.append((str(path), err))
        else:
            graphs.append(graph_from_bytes(blob))
    return graphs, failures


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_featurize(args):
    pdbs = find_pdbs(args.input)
    if not pdbs:
        raise UsageError(f"no PDB files found under {args.input}")
    results = _run_jobs(_featurize_one, [(p, args.k, args.allow_single_chain) for p in pdbs], args.jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written, skipped = [], []
    for path, blob, err in results:
        if err:
            logger.warning("skipping %s: %s", path, err)
            skipped.append({"path": str(path), "error": err})
            continue
        target = out / Path(path).parent.name
        target.mkdir(exist_ok=True)
        dest = target / (Path(path).stem + GRAPH_SUFFIX)
        dest.write_bytes(blob)
        written.append(str(dest))
    RunManifest(
        "featurize", inputs=[str(args.input)], outputs=written,
        details={"k": args.k, "skipped": skipped},
    ).write(out / "manifest.json")
    for s in skipped:
        print(f"skipped {s['path']}: {s['error']}", file=sys.stderr)
    return EXIT_PARTIAL if skipped else EXIT_OK


def _read_label_tree(data_dir):
    from .dockq import read_labels

    labels = {}
    for path in sorted(Path(data_dir).rglob("labels.csv")):
        for row in read_labels(path):
            labels[(row.target_id, row.decoy_id)] = row.dockq
    return labels


def _split_by_target(examples, fraction, seed):
    targets = sorted({ex.graph.target_id for ex in examples})
    if fraction <= 0:
        return examples, []
    rng = np.random.default_rng(seed)
    if len(targets) >= 2:
        n_val = max(1, int(round(fraction * len(targets))))
        val_targets = set(rng.permutation(targets)[:n_val].tolist())
        return ([ex for ex in examples if ex.graph.target_id not in val_targets],
                [ex for ex in examples if ex.graph.target_id in val_targets])
    order = rng.permutation(len(examples))
    n_val = max(1, int(round(fraction * len(examples)))) if len(examples) > 1 else 0
    val_idx = set(order[:n_val].tolist())
    return ([ex for i, ex in enumerate(examples) if i not in val_idx],
            [ex for i, ex in enumerate(examples) if i in val_idx])


def cmd_train(args):
    from . import trainer as T

    model_cfg, train_cfg, _ = T.load_config(args.config)
    data = Path(args.data)
    if not data.is_dir():
        raise UsageError(f"data directory not found: {data}")
    labels = _read_label_tree(data)
    if not labels:
        raise UsageError(f"no labels.csv files under {data}")
    pool_root = data / "targets" if (data / "targets").is_dir() else data
    graphs, failures = _load_graphs(pool_root, args.k, args.jobs, False)
    examples = []
    for g in graphs:
        key = (g.target_id, g.decoy_id)
        if key not in labels:
            failures.append(("/".join(key), "no label"))
            continue
        examples.append(T.Example(g, labels[key]))
    examples.sort(key=lambda ex: (ex.graph.target_id, ex.graph.decoy_id))
    if not examples:
        raise UsageError("no labelled decoys to train on")
    train_set, val_set = _split_by_target(examples, args.val_fraction, train_cfg.seed)

    out = Path(args.out)
    result = T.train(train_set, val_set, model_cfg, train_cfg, out_dir=out)
    if not (out / "best.ckpt").exists():
        M.save_checkpoint(out / "best.ckpt", result.params, model_cfg, extra={"epoch": result.best_epoch})
    RunManifest(
        "train", config_path=str(args.config), inputs=[str(data)],
        outputs=[str(out / "best.ckpt"), str(out / "metrics.csv")], seed=train_cfg.seed,
        details={
            "model_config": model_cfg.to_dict(), "train_config": train_cfg.to_dict(),
            "train_decoys": len(train_set), "val_decoys": len(val_set),
            "best_epoch": result.best_epoch, "best_loss": result.best_val_loss,
            "epochs_run": len(result.history), "stopped_early": result.stopped_early,
            "aborted": result.aborted, "error": result.error,
            "skipped": [{"path": p, "error": e} for p, e in failures],
        },
    ).write(out / "manifest.json")
    if result.aborted:
        print(f"training aborted: {result.error}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_PARTIAL if failures else EXIT_OK


def _score_one(graph, params, config):
    out = M.predict([graph], params, config)[0]
    return [graph.target_id, graph.decoy_id, float(out.q)] + [float(p) for p in out.y]


def score_rows(graphs, params, config):
    """One forward pass per decoy; rows sorted by ``(target_id, decoy_id)``."""
    rows = [_score_one(g, params, config) for g in graphs]
    rows.sort(key=lambda r: (r[0], r[1]))
    return rows


def _format_rows(header, rows, fmt):
    cells = [[r[0], r[1]] + [f"{v:.6f}" for v in r[2:]] for r in rows]
    if fmt == "json":
        return json.dumps([dict(zip(header, r[:2] + [round(v, 6) for v in r[2:]])) for r in rows], indent=2) + "\n"
    if fmt == "md":
        from .evalrank import _render

        return _render(list(header), cells, "md")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(cells)
    return buf.getvalue()


def cmd_score(args):
    if not Path(args.model).is_file():
        raise UsageError(f"checkpoint not found: {args.model}")
    params, config, _ = M.load_checkpoint(args.model)
    graphs, failures = _load_graphs(args.input, args.k, args.jobs, args.allow_single_chain)
    if not graphs:
        for p, e in failures:
            print(f"failed {p}: {e}", file=sys.stderr)
        return EXIT_PARTIAL
    rows = score_rows(graphs, params, config)
    text = _format_rows(SCORE_COLUMNS, rows, args.format)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text)
    RunManifest(
        "score", config_path=str(args.model), inputs=[str(args.input)], outputs=[str(out)],
        seed=params.seed, details={"format": args.format, "skipped": [{"path": p, "error": e} for p, e in failures]},
    ).write(out.with_name(out.name + ".manifest.json"))
    for p, e in failures:
        print(f"skipped {p}: {e}", file=sys.stderr)
    return EXIT_PARTIAL if failures else EXIT_OK


def cmd_rank(args):
    from . import evalrank as E

    for p in (args.scores, args.labels):
        if not Path(p).is_file():
            raise UsageError(f"file not found: {p}")
    if args.topn < 1:
        raise UsageError("--topn must be >= 1")
    records, unmatched = E.load_records(args.scores, args.labels)
    if not records:
        raise UsageError("no scored decoy has a label")
    report = E.evaluate(records, topn=args.topn, method=args.method)
    text = E.format_report(report, args.format)
    outputs = []
    if args.out:
        Path(args.out).write_text(text)
        outputs.append(str(args.out))
    else:
        sys.stdout.write(text)
    if args.plot:
        E.plot_losses(report, args.plot)
        outputs.append(str(args.plot))
    if outputs:
        RunManifest(
            "rank", inputs=[str(args.scores), str(args.labels)], outputs=outputs,
            details={"topn": args.topn, "unmatched": ["/".join(k) for k in unmatched]},
        ).write(Path(outputs[0]).with_name(Path(outputs[0]).name + ".manifest.json"))
    for key in unmatched:
        print(f"no label for {'/'.join(key)}", file=sys.stderr)
    return EXIT_PARTIAL if unmatched else EXIT_OK


def cmd_dockq(args):
    from .dockq import compute_components, dockq_class, dockq_score
    from .structio import read_pdb

    for p in (args.decoy, args.native):
        if not Path(p).is_file():
            raise UsageError(f"file not found: {p}")
    decoy = read_pdb(args.decoy)
    native = read_pdb(args.native)
    comps = compute_components(decoy, native)
    score = dockq_score(comps)
    doc = dict(comps.as_dict(), dockq=score, **{"class": dockq_class(score).label})
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
        RunManifest("dockq", inputs=[str(args.decoy), str(args.native)], outputs=[str(args.out)]).write(
            Path(args.out).with_name(Path(args.out).name + ".manifest.json"))
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser():
    parser = _Parser(prog="complexqa", description="Protein complex decoy quality assessment.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("featurize", help="PDB decoys -> graph cache files")
    p.add_argument("--input", required=True, help="PDB file or directory (searched recursively)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--k", type=int, default=10, help="neighbours per residue (default 10)")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--allow-single-chain", action="store_true")
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("train", help="train a model from DATA/targets/<target>/<decoy>.pdb + labels.csv")
    p.add_argument("--config", required=True, help="TOML or JSON config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--val-fraction", type=float, default=0.2,
                   help="share of targets held out for validation (default 0.2)")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="predict DockQ and class probabilities")
    p.add_argument("--model", required=True, help="checkpoint file")
    p.add_argument("--input", required=True, help="PDB file, directory of PDBs, or graph cache directory")
    p.add_argument("--out", required=True, help="output table")
    p.add_argument("--format", choices=("csv", "md", "json"), default="csv")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--allow-single-chain", action="store_true")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("rank", help="hit rates and ranking losses")
    p.add_argument("--scores", required=True, help="CSV with target_id, decoy_id, pred_score (or pred_dockq)")
    p.add_argument("--labels", required=True, help="CSV with target_id, decoy_id, dockq")
    p.add_argument("--topn", type=int, default=10)
    p.add_argument("--format", choices=("csv", "md", "json"), default="md")
    p.add_argument("--method", default="complexqa", help="column name in the tables")
    p.add_argument("--out", help="write the report here instead of stdout")
    p.add_argument("--plot", help="SVG bar chart of per-target ranking losses")
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("dockq", help="DockQ of a decoy against its native")
    p.add_argument("--decoy", required=True)
    p.add_argument("--native", required=True)
    p.add_argument("--out", help="write JSON here instead of stdout")
    p.set_defaults(func=cmd_dockq)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "jobs", 1) < 1:
        parser.error("--jobs must be >= 1")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"complexqa: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"complexqa: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ComplexQAError, OSError, ValueError) as exc:
        print(f"complexqa: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
