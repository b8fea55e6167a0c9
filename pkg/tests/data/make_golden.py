"""Regenerate the frozen model reference values in this directory.

Run from the repository root: ``python tests/data/make_golden.py``.  The
outputs are committed; tests compare against them and never call this.
"""

from pathlib import Path

import numpy as np

from complexqa import cli, dockq, featurize, model, structio, synthetic
from complexqa import numcore as nc

HERE = Path(__file__).parent


def main():
    structure = synthetic.random_complex(np.random.default_rng(2024), lengths=(9, 7),
                                         target_id="golden", decoy_id="fixture")
    graph = featurize.featurize(structure)
    featurize.save_graph(graph, HERE / "golden_fixture.graph")

    config = model.ModelConfig()
    params = model.init_params(config, seed=0)
    # calibrate running statistics so eval-mode outputs are not saturated
    rng = np.random.default_rng(99)
    others = [featurize.featurize(synthetic.random_complex(rng, lengths=(int(rng.integers(7, 12)), 8),
                                                          target_id="golden", decoy_id=f"calib{i}"))
              for i in range(8)]
    calib = model.collate(others + [graph])
    for step in range(40):
        with nc.no_grad():
            model.forward(calib, params, config, mode="train", step=step)
    model.save_checkpoint(HERE / "golden_model.ckpt", params, config)

    batch = model.collate([graph])
    h0, e0 = model.embed(batch, params, config)
    record = {}
    out = model.forward(batch, params, config, mode="eval", record=record)
    train_params = params.copy()
    # train-mode BN needs more than one graph in the read-out
    for g in others[:2]:
        featurize.save_graph(g, HERE / f"golden_{g.decoy_id}.graph")
    train_batch = model.collate([graph] + others[:2])
    train_out = model.forward(train_batch, train_params, config, mode="train", step=3, update_stats=False)
    np.savez(
        HERE / "golden_model.npz",
        h0=h0.data, e0=e0.data,
        h1=record["h"][0], e1=record["e"][0],
        h2=record["h"][1], e2=record["e"][1],
        q=out.q.data, y=out.y.data,
        q_train=train_out.q.data, y_train=train_out.y.data,
    )


def score_fixtures():
    """Three decoy PDBs of one target, their native and labels, plus the frozen score table."""
    rng = np.random.default_rng(7)
    pool = HERE / "pool" / "targets" / "T0"
    pool.mkdir(parents=True, exist_ok=True)
    native = synthetic.random_complex(rng, lengths=(12, 9), target_id="T0", decoy_id="native", gap=6.5)
    (HERE / "pool" / "native.pdb").write_text(structio.format_pdb(native))
    rows = ["decoy_id,dockq"]
    for i, sigma in enumerate((0.3, 1.5, 4.0)):
        decoy = synthetic.perturb(native, rng, sigma=sigma, decoy_id=f"d{i}")
        (pool / f"d{i}.pdb").write_text(structio.format_pdb(decoy))
        # score what was written: coordinates are rounded in the file
        score = dockq.dockq_score(dockq.compute_components(structio.read_pdb(pool / f"d{i}.pdb"),
                                                           structio.read_pdb(HERE / "pool" / "native.pdb")))
        rows.append(f"d{i},{score:.6f}")
    (pool / "labels.csv").write_text("\n".join(rows) + "\n")
    code = cli.main(["score", "--model", str(HERE / "golden_model.ckpt"), "--input", str(pool),
                     "--out", str(HERE / "golden_scores.csv")])
    assert code == 0
    (HERE / "golden_scores.csv.manifest.json").unlink()


if __name__ == "__main__":
    main()
    score_fixtures()
