"""Random two-chain backbones for smoke tests, benchmarks and overfit checks."""

import numpy as np

from .structio import STANDARD_RESIDUES, Chain, ComplexStructure, ResidueRecord

CA_STEP = 3.8


def _unit(v):
    return v / np.linalg.norm(v)


def random_chain_trace(rng, n, start, step=CA_STEP):
    """CA random walk with fixed step length and no sharp reversals."""
    coords = [np.asarray(start, dtype=np.float64)]
    direction = _unit(rng.normal(size=3))
    for _ in range(n - 1):
        while True:
            cand = _unit(direction + 0.8 * rng.normal(size=3))
            if cand @ direction > -0.2:
                break
        direction = cand
        coords.append(coords[-1] + step * direction)
    return np.asarray(coords)


def _backbone_from_trace(rng, ca):
    """Place N, C, O and CB around each CA with jittered but plausible offsets."""
    n = len(ca)
    atoms = []
    for i in range(n):
        prev_dir = _unit(ca[i] - ca[i - 1]) if i > 0 else _unit(ca[1] - ca[0])
        next_dir = _unit(ca[i + 1] - ca[i]) if i < n - 1 else prev_dir
        side = np.cross(prev_dir, next_dir)
        side = _unit(side) if np.linalg.norm(side) > 1e-6 else _unit(np.cross(prev_dir, [0.0, 0.0, 1.0]) + 1e-3)
        jitter = lambda: 0.05 * rng.normal(size=3)  # noqa: E731
        N = ca[i] - 1.46 * prev_dir + jitter()
        C = ca[i] + 1.52 * next_dir + jitter()
        O = C + 1.23 * side + jitter()
        CB = ca[i] - 1.53 * _unit(side + 0.5 * (next_dir - prev_dir)) + jitter()
        atoms.append((N, C, O, CB))
    return atoms


def random_complex(rng, lengths=(14, 12), target_id="synthetic", decoy_id="decoy", gap=9.0):
    """Two random chains placed side by side so that they form an interface."""
    chains = []
    origin = np.zeros(3)
    for cid, length in zip("AB", lengths):
        ca = random_chain_trace(rng, length, origin)
        atoms = _backbone_from_trace(rng, ca)
        residues = []
        for i in range(length):
            resname = STANDARD_RESIDUES[int(rng.integers(len(STANDARD_RESIDUES)))]
            N, C, O, CB = atoms[i]
            residues.append(ResidueRecord(
                chain_id=cid, seq_index=i, residue_type=resname,
                ca=ca[i], n=N, c=C, o=O, cb=None if resname == "GLY" else CB,
                res_seq=i + 1,
            ))
        chains.append(Chain(cid, residues))
        centroid = ca.mean(axis=0)
        origin = centroid + gap * _unit(rng.normal(size=3))
    return ComplexStructure(target_id, decoy_id, chains).validate()


def perturb(structure, rng, sigma=1.0, decoy_id=None):
    """Copy of ``structure`` with Gaussian noise on every atom."""
    chains = []
    for ch in structure.chains:
        residues = []
        for r in ch.residues:
            moved = {
                name: (None if getattr(r, name) is None else np.asarray(getattr(r, name)) + sigma * rng.normal(size=3))
                for name in ("ca", "n", "c", "o", "cb")
            }
            residues.append(ResidueRecord(
                chain_id=r.chain_id, seq_index=r.seq_index, residue_type=r.residue_type,
                res_seq=r.res_seq, icode=r.icode, **moved,
            ))
        chains.append(Chain(ch.chain_id, residues))
    return ComplexStructure(structure.target_id, decoy_id or structure.decoy_id, chains)
