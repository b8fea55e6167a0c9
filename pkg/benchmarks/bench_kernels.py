"""Time the hot kernels under the numba and numpy backends.

    python benchmarks/bench_kernels.py [--residues 400] [--repeat 5]

Each kernel is warmed up once per backend (this absorbs numba compilation)
and then timed with ``timeit``; the best of ``--repeat`` runs is reported.
Outputs of the two backends are compared before timing.
"""

import argparse
import json
import sys
import timeit

import numpy as np

from complexqa import featurize, kernels, synthetic


def workloads(n_res, seed):
    rng = np.random.default_rng(seed)
    structure = synthetic.random_complex(rng, lengths=(n_res // 2, n_res - n_res // 2), gap=6.0)
    ca = np.array([r.ca for ch in structure.chains for r in ch.residues], dtype=np.float64)
    coords, radii, _ = featurize.atom_table(structure)
    points = featurize.sphere_points()
    m = 10 * n_res
    values = rng.normal(size=(m, 64))
    ids = rng.integers(0, n_res, size=m)
    return {
        "knn_indices(k=10)": lambda: kernels.knn_indices(ca, 10),
        "sasa_exposed_points": lambda: kernels.sasa_exposed_points(coords, radii, points),
        "segment_sum(64 ch)": lambda: kernels.segment_sum(values, ids, n_res),
        "segment_max(64 ch)": lambda: kernels.segment_max(values, ids, n_res),
        "featurize (end to end)": lambda: featurize.featurize(structure),
    }


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    if isinstance(a, featurize.ProteinGraph):
        return featurize.graph_to_bytes(a) == featurize.graph_to_bytes(b)
    return np.allclose(a, b, atol=1e-9, equal_nan=True)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--residues", type=int, default=400)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", action="store_true", help="print machine-readable results")
    args = ap.parse_args(argv)

    try:
        import numba  # noqa: F401
    except ImportError:
        sys.exit("numba is not installed; install the 'fast' extra to compare backends")

    jobs = workloads(args.residues, args.seed)
    results = {}
    previous = kernels.get_backend()
    try:
        for name, fn in jobs.items():
            row, outputs = {}, {}
            for backend in ("numpy", "numba"):
                kernels.set_backend(backend)
                outputs[backend] = fn()  # warm-up and compile
                timer = timeit.Timer(fn)
                number, _ = timer.autorange()
                row[backend] = min(timer.repeat(args.repeat, number)) / number
            row["agree"] = bool(_same(outputs["numpy"], outputs["numba"]))
            results[name] = row
    finally:
        kernels.set_backend(previous)

    if args.json:
        print(json.dumps({"residues": args.residues, "results": results}, indent=2))
        return
    print(f"{args.residues} residues, best of {args.repeat}")
    print(f"{'kernel':<26}{'numpy ms':>12}{'numba ms':>12}{'speed-up':>10}  agree")
    for name, r in results.items():
        print(f"{name:<26}{1e3 * r['numpy']:>12.3f}{1e3 * r['numba']:>12.3f}"
              f"{r['numpy'] / r['numba']:>9.1f}x  {r['agree']}")


if __name__ == "__main__":
    main()
