import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from complexqa.featurize import ProteinGraph
from complexqa.structio import Chain, ComplexStructure, ResidueRecord

import oracles

settings.register_profile(
    "default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def structure_from_backbones(chains, target_id="fixture", decoy_id="fixture", resname="ALA"):
    """``chains`` maps chain id to a list of (N, CA, C, O, CB) tuples."""
    out = []
    for cid, atoms in chains.items():
        residues = [
            ResidueRecord(chain_id=cid, seq_index=i, residue_type=resname,
                          n=a[0], ca=a[1], c=a[2], o=a[3], cb=a[4], res_seq=i + 1)
            for i, a in enumerate(atoms)
        ]
        out.append(Chain(cid, residues))
    return ComplexStructure(target_id, decoy_id, out)


def moved(structure, R=np.eye(3), t=np.zeros(3), chains=None):
    """Apply ``x -> R x + t`` to the named chains (all by default)."""
    out = []
    for ch in structure.chains:
        if chains is None or ch.chain_id in chains:
            residues = [
                ResidueRecord(
                    chain_id=r.chain_id, seq_index=r.seq_index, residue_type=r.residue_type,
                    res_seq=r.res_seq, icode=r.icode,
                    **{n: None if getattr(r, n) is None else tuple(R @ np.asarray(getattr(r, n)) + t)
                       for n in ("n", "ca", "c", "o", "cb")},
                )
                for r in ch.residues
            ]
            out.append(Chain(ch.chain_id, residues))
        else:
            out.append(ch)
    return ComplexStructure(structure.target_id, structure.decoy_id, out)


def random_graph(n, k, rng, node_in=35, edge_in=6, target_id="t", decoy_id="d"):
    """Random directed k-in-neighbour graph with features in [0, 1]."""
    src, dst = [], []
    for i in range(n):
        nbrs = rng.choice([j for j in range(n) if j != i], size=min(k, n - 1), replace=False)
        src.extend(int(j) for j in nbrs)
        dst.extend([i] * len(nbrs))
    m = len(src)
    return ProteinGraph(
        num_nodes=n,
        src=np.asarray(src, dtype=np.int64),
        dst=np.asarray(dst, dtype=np.int64),
        node_features=rng.uniform(size=(n, node_in)).astype(np.float32),
        edge_features=rng.uniform(size=(m, edge_in)).astype(np.float32),
        node_chain=np.zeros(n, dtype=np.int32),
        node_seq=np.arange(n, dtype=np.int32),
        target_id=target_id,
        decoy_id=decoy_id,
    )


def randomize_bn_stats(params, rng):
    """Non-trivial running statistics so eval-mode BN is not the identity."""
    for name in params.buffers:
        shape = params.buffers[name].shape
        if name.endswith("running_mean"):
            params.buffers[name] = (0.3 * rng.normal(size=shape)).astype(params.dtype)
        else:
            params.buffers[name] = rng.uniform(0.5, 2.0, size=shape).astype(params.dtype)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def helix_structure():
    atoms = oracles.build_backbone([-57.0] * 14, [-47.0] * 14)
    return structure_from_backbones({"A": atoms}, decoy_id="helix")


@pytest.fixture(scope="session")
def strand_structure():
    atoms = oracles.build_backbone([180.0] * 8, [180.0] * 8)
    return structure_from_backbones({"A": atoms}, decoy_id="strand")


# one line per acceptance criterion, filled in by tests/test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
