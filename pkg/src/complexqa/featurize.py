"""Residue-level k-NN graphs with 35 node and 6 edge features.

Node columns: residue one-hot (21), secondary structure (3), rASA, phi, psi,
Laplacian positional encoding (8).  Edge columns: CA-CA, CB-CB and N-O
distances (scaled by 1/20, clamped), contact flag (CA-CA < 8 A), sequence
adjacency within a chain, and a sequence-separation positional encoding.
"""

import json
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import FormatError, NumericError, ShapeMismatch, SolverFailure
from .structio import RESIDUE_TYPES, residue_index

logger = logging.getLogger(__name__)

DEFAULT_K = 10
NUM_NODE_FEATURES = 35
NUM_EDGE_FEATURES = 6
LAPPE_DIM = 8
CONTACT_CUTOFF = 8.0
DISTANCE_SCALE = 20.0
EDGE_PE_CLAMP = 64

NODE_FEATURE_NAMES = (
    [f"res_{name}" for name in RESIDUE_TYPES]
    + ["ss_helix", "ss_strand", "ss_coil", "rasa", "phi", "psi"]
    + [f"lap_pe_{i}" for i in range(LAPPE_DIM)]
)
EDGE_FEATURE_NAMES = ["d_ca", "d_cb", "d_no", "contact", "chain_adj", "edge_pe"]

# Shrake-Rupley setup.  Radii in angstrom for the atoms the parser keeps.
PROBE_RADIUS = 1.4
SPHERE_POINTS = 92
ATOM_RADII = {"N": 1.65, "CA": 1.87, "C": 1.76, "O": 1.40, "CB": 1.87}
# Exposed area of an isolated residue in ideal geometry under the reduced
# backbone + CB atom model above (GLY has no CB), rounded down so any
# backbone conformation stays at or above it.
MAX_ASA = {name: 210.0 for name in RESIDUE_TYPES}
MAX_ASA["GLY"] = 180.0

HELIX_PHI = (-100.0, -30.0)
HELIX_PSI = (-80.0, -5.0)
STRAND_PHI = (-180.0, -80.0)

IDEAL_C_DISTANCE = 1.52


@dataclass
class ProteinGraph:
    num_nodes: int
    src: np.ndarray
    dst: np.ndarray
    node_features: np.ndarray
    edge_features: np.ndarray
    node_chain: np.ndarray
    node_seq: np.ndarray
    target_id: str = ""
    decoy_id: str = ""
    meta: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def num_edges(self):
        return int(self.src.shape[0])

    def equals(self, other):
        """Bitwise equality of every array plus ids."""
        if not isinstance(other, ProteinGraph):
            return False
        arrays = ("src", "dst", "node_features", "edge_features", "node_chain", "node_seq")
        return (
            self.num_nodes == other.num_nodes
            and self.target_id == other.target_id
            and self.decoy_id == other.decoy_id
            and all(
                getattr(self, a).dtype == getattr(other, a).dtype
                and getattr(self, a).shape == getattr(other, a).shape
                and getattr(self, a).tobytes() == getattr(other, a).tobytes()
                for a in arrays
            )
        )


# ---------------------------------------------------------------------------
# graph topology
# ---------------------------------------------------------------------------

def build_knn_graph(structure, k=DEFAULT_K):
    """Directed edges ``src -> dst`` from each node's k nearest CA neighbours.

    Edges are grouped by destination in node order; within a group they run
    nearest first.  Equal distances go to the lower (chain, seq) node, which
    is the lower node index in canonical order.
    """
    coords = structure.coords("ca")
    n = coords.shape[0]
    if n < 2:
        raise ValueError("k-NN graph needs at least two nodes")
    k_eff = min(int(k), n - 1)
    nbrs = kernels.knn_indices(coords, k_eff)
    dst = np.repeat(np.arange(n, dtype=np.int64), k_eff)
    src = nbrs.reshape(-1).astype(np.int64)
    return src, dst


def node_chain_and_seq(structure):
    chain = []
    seq = []
    for ordinal, ch in enumerate(structure.chains):
        for r in ch.residues:
            chain.append(ordinal)
            seq.append(r.seq_index)
    return np.asarray(chain, dtype=np.int32), np.asarray(seq, dtype=np.int32)


# ---------------------------------------------------------------------------
# backbone geometry
# ---------------------------------------------------------------------------

def dihedral(p0, p1, p2, p3):
    """Signed dihedral angle(s) in degrees; degenerate geometry gives 0."""
    p0, p1, p2, p3 = (np.asarray(p, dtype=np.float64) for p in (p0, p1, p2, p3))
    b0 = p0 - p1
    b1 = p2 - p1
    b2 = p3 - p2
    norm = np.linalg.norm(b1, axis=-1, keepdims=True)
    b1n = np.divide(b1, norm, out=np.zeros_like(b1), where=norm > 0)
    v = b0 - np.sum(b0 * b1n, axis=-1, keepdims=True) * b1n
    w = b2 - np.sum(b2 * b1n, axis=-1, keepdims=True) * b1n
    x = np.sum(v * w, axis=-1)
    y = np.sum(np.cross(b1n, v) * w, axis=-1)
    return np.degrees(np.arctan2(y, x))


def _backbone_arrays(structure):
    """Per-residue N, CA, C arrays with substitutions, plus a 'linked to next' mask."""
    residues = structure.residues()
    n = len(residues)
    ca = structure.coords("ca")
    nn = structure.coords("n", fallback="ca")
    linked = np.zeros(n, dtype=bool)
    pos = 0
    for ch in structure.chains:
        for t in range(len(ch.residues) - 1):
            linked[pos + t] = ch.residues[t + 1].seq_index == ch.residues[t].seq_index + 1
        pos += len(ch.residues)
    c = np.empty_like(ca)
    for i, r in enumerate(residues):
        if r.c is not None:
            c[i] = r.c
        elif linked[i]:
            # no carbonyl C: step from CA toward the next residue's N
            direction = nn[i + 1] - ca[i]
            length = np.linalg.norm(direction)
            c[i] = ca[i] + IDEAL_C_DISTANCE * direction / length if length > 0 else ca[i]
        else:
            c[i] = ca[i]
    return nn, ca, c, linked


def compute_dihedrals(structure):
    """Backbone (phi, psi) in degrees; undefined terminal angles are 0."""
    nn, ca, c, linked = _backbone_arrays(structure)
    n = ca.shape[0]
    phi = np.zeros(n)
    psi = np.zeros(n)
    if n > 1:
        nxt = np.flatnonzero(linked)
        psi[nxt] = dihedral(nn[nxt], ca[nxt], c[nxt], nn[nxt + 1])
        prv = nxt + 1
        phi[prv] = dihedral(c[prv - 1], nn[prv], ca[prv], c[prv])
    return phi, psi


def normalize_angle(theta):
    """Map degrees in [-180, 180] linearly onto [0, 1]."""
    return (np.asarray(theta, dtype=np.float64) + 180.0) / 360.0


def _wrap(theta):
    return (np.asarray(theta, dtype=np.float64) + 180.0) % 360.0 - 180.0


def classify_secondary_structure(phi, psi):
    """Ramachandran-box 3-state assignment, returns N×3 one-hot (helix, strand, coil)."""
    phi = _wrap(phi)
    psi = _wrap(psi)
    helix = (
        (phi >= HELIX_PHI[0]) & (phi <= HELIX_PHI[1])
        & (psi >= HELIX_PSI[0]) & (psi <= HELIX_PSI[1])
    )
    strand = (
        (phi >= STRAND_PHI[0]) & (phi <= STRAND_PHI[1])
        & (((psi >= 80.0) & (psi <= 180.0)) | ((psi >= -180.0) & (psi <= -170.0)))
    )
    out = np.zeros((phi.shape[0], 3))
    out[helix, 0] = 1.0
    out[~helix & strand, 1] = 1.0
    out[~helix & ~strand, 2] = 1.0
    return out


def compute_secondary_structure(structure):
    phi, psi = compute_dihedrals(structure)
    return classify_secondary_structure(phi, psi)


def sphere_points(n=SPHERE_POINTS):
    """Quasi-uniform unit sphere points from the golden-section spiral."""
    i = np.arange(n, dtype=np.float64) + 0.5
    polar = np.arccos(1.0 - 2.0 * i / n)
    azimuth = np.pi * (1.0 + 5.0 ** 0.5) * i
    return np.stack(
        [np.cos(azimuth) * np.sin(polar), np.sin(azimuth) * np.sin(polar), np.cos(polar)], axis=1
    )


def atom_table(structure):
    """Flattened present atoms: coordinates, radii, owning residue index."""
    coords, radii, owner = [], [], []
    for i, r in enumerate(structure.residues()):
        for name, xyz in r.atoms():
            coords.append(xyz)
            radii.append(ATOM_RADII[name])
            owner.append(i)
    return (
        np.asarray(coords, dtype=np.float64).reshape(-1, 3),
        np.asarray(radii, dtype=np.float64),
        np.asarray(owner, dtype=np.int64),
    )


def residue_asa(structure, extra_atoms=None, extra_radii=None):
    """Absolute per-residue ASA in A^2 (Shrake-Rupley).

    ``extra_atoms`` occlude but are not reported; used for probing.
    """
    coords, radii, owner = atom_table(structure)
    n_res = structure.num_residues
    if extra_atoms is not None:
        extra_atoms = np.asarray(extra_atoms, dtype=np.float64).reshape(-1, 3)
        if extra_radii is None:
            extra_radii = np.full(extra_atoms.shape[0], ATOM_RADII["CA"])
        coords = np.vstack([coords, extra_atoms])
        radii = np.concatenate([radii, np.asarray(extra_radii, dtype=np.float64)])
        owner = np.concatenate([owner, np.full(extra_atoms.shape[0], -1)])
    expanded = radii + PROBE_RADIUS
    exposed = kernels.sasa_exposed_points(coords, expanded, sphere_points())
    area = 4.0 * np.pi * expanded ** 2 * exposed / SPHERE_POINTS
    keep = owner >= 0
    return np.bincount(owner[keep], weights=area[keep], minlength=n_res)


def compute_rasa(structure):
    """Relative ASA in [0, 1] against per-type maxima."""
    asa = residue_asa(structure)
    maxima = np.array([MAX_ASA[r.residue_type] for r in structure.residues()])
    return np.clip(asa / maxima, 0.0, 1.0)


# ---------------------------------------------------------------------------
# positional encodings
# ---------------------------------------------------------------------------

def laplacian_pe(src, dst, num_nodes, dim=LAPPE_DIM):
    """Eigenvectors of the symmetric normalized Laplacian for the smallest
    non-trivial eigenvalues, zero-padded to ``dim`` columns.

    Each column is signed so its largest-magnitude entry is positive.
    Returns ``(pe, eigenvalues)``; padded eigenvalues are NaN.
    """
    n = int(num_nodes)
    adj = np.zeros((n, n))
    adj[np.asarray(src), np.asarray(dst)] = 1.0
    adj = np.maximum(adj, adj.T)
    np.fill_diagonal(adj, 0.0)
    deg = adj.sum(axis=1)
    inv_sqrt = np.zeros(n)
    inv_sqrt[deg > 0] = deg[deg > 0] ** -0.5
    lap = np.eye(n) - inv_sqrt[:, None] * adj * inv_sqrt[None, :]
    try:
        evals, evecs = np.linalg.eigh(lap)
    except np.linalg.LinAlgError as exc:
        raise SolverFailure(f"Laplacian eigendecomposition failed: {exc}") from exc
    take = min(dim, n - 1)
    pe = np.zeros((n, dim))
    vals = np.full(dim, np.nan)
    if take > 0:
        vecs = evecs[:, 1:1 + take].copy()
        pivot = np.argmax(np.abs(vecs), axis=0)
        signs = np.sign(vecs[pivot, np.arange(take)])
        signs[signs == 0] = 1.0
        pe[:, :take] = vecs * signs
        vals[:take] = evals[1:1 + take]
    return pe, vals


def edge_positional_encoding(node_seq, node_chain, src, dst):
    """Sequence separation clamped at 64 and scaled to [0, 1]; 1 across chains."""
    node_seq = np.asarray(node_seq)
    node_chain = np.asarray(node_chain)
    src = np.asarray(src)
    dst = np.asarray(dst)
    sep = np.abs(node_seq[dst].astype(np.int64) - node_seq[src].astype(np.int64))
    pe = np.minimum(sep, EDGE_PE_CLAMP) / EDGE_PE_CLAMP
    return np.where(node_chain[src] == node_chain[dst], pe, 1.0)


# ---------------------------------------------------------------------------
# feature assembly
# ---------------------------------------------------------------------------

def _scaled_distance(a, b):
    return np.clip(np.linalg.norm(a - b, axis=1) / DISTANCE_SCALE, 0.0, 1.0)


def assemble_edge_features(structure, src, dst):
    """M×6 edge matrix ``[d_ca, d_cb, d_no, contact, chain_adj, edge_pe]``.

    The N-O distance pairs the destination residue's N with the source's O.
    """
    src = np.asarray(src)
    dst = np.asarray(dst)
    ca = structure.coords("ca")
    cb = structure.coords("cb")
    nn = structure.coords("n")
    oo = structure.coords("o")
    chain, seq = node_chain_and_seq(structure)
    raw_ca = np.linalg.norm(ca[dst] - ca[src], axis=1)
    same_chain = chain[src] == chain[dst]
    adjacent = same_chain & (np.abs(seq[src].astype(np.int64) - seq[dst]) == 1)
    return np.stack(
        [
            np.clip(raw_ca / DISTANCE_SCALE, 0.0, 1.0),
            _scaled_distance(cb[dst], cb[src]),
            _scaled_distance(nn[dst], oo[src]),
            (raw_ca < CONTACT_CUTOFF).astype(np.float64),
            adjacent.astype(np.float64),
            edge_positional_encoding(seq, chain, src, dst),
        ],
        axis=1,
    )


def residue_one_hot(structure):
    idx = np.array([residue_index(r.residue_type) for r in structure.residues()])
    out = np.zeros((idx.shape[0], len(RESIDUE_TYPES)))
    out[np.arange(idx.shape[0]), idx] = 1.0
    return out


def assemble_node_features(structure, src, dst):
    """N×35 node matrix in feature-table column order."""
    n = structure.num_residues
    phi, psi = compute_dihedrals(structure)
    pe, _ = laplacian_pe(src, dst, n)
    blocks = [
        ("residue", residue_one_hot(structure), 21),
        ("secondary", classify_secondary_structure(phi, psi), 3),
        ("rasa", compute_rasa(structure)[:, None], 1),
        ("phi", normalize_angle(phi)[:, None], 1),
        ("psi", normalize_angle(psi)[:, None], 1),
        ("lap_pe", pe, LAPPE_DIM),
    ]
    for name, block, width in blocks:
        if block.shape != (n, width):
            raise ShapeMismatch(f"node block {name}: expected {(n, width)}, got {block.shape}")
    return np.concatenate([b for _, b, _ in blocks], axis=1)


def featurize(structure, k=DEFAULT_K):
    """Full structure -> :class:`ProteinGraph` conversion (float32 features)."""
    src, dst = build_knn_graph(structure, k)
    node = assemble_node_features(structure, src, dst)
    edge = assemble_edge_features(structure, src, dst)
    chain, seq = node_chain_and_seq(structure)
    if not (np.isfinite(node).all() and np.isfinite(edge).all()):
        raise NumericError(f"{structure.decoy_id}: non-finite feature value")
    return ProteinGraph(
        num_nodes=structure.num_residues,
        src=src,
        dst=dst,
        node_features=node.astype(np.float32),
        edge_features=edge.astype(np.float32),
        node_chain=chain,
        node_seq=seq,
        target_id=structure.target_id,
        decoy_id=structure.decoy_id,
    )


# ---------------------------------------------------------------------------
# graph cache container
# ---------------------------------------------------------------------------

GRAPH_MAGIC = b"CQAGRAPH"
GRAPH_FORMAT_VERSION = 1
_ARRAY_LAYOUT = (
    ("node_features", "<f4"),
    ("edge_features", "<f4"),
    ("src", "<i4"),
    ("dst", "<i4"),
    ("node_chain", "<i4"),
    ("node_seq", "<i4"),
)


def graph_to_bytes(graph):
    arrays = {name: np.ascontiguousarray(getattr(graph, name), dtype=dt) for name, dt in _ARRAY_LAYOUT}
    header = {
        "format": "complexqa-graph",
        "format_version": GRAPH_FORMAT_VERSION,
        "target_id": graph.target_id,
        "decoy_id": graph.decoy_id,
        "num_nodes": int(graph.num_nodes),
        "num_edges": int(graph.num_edges),
        "node_feature_names": NODE_FEATURE_NAMES,
        "edge_feature_names": EDGE_FEATURE_NAMES,
        "arrays": [
            {"name": name, "dtype": dt, "shape": list(arrays[name].shape)} for name, dt in _ARRAY_LAYOUT
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [GRAPH_MAGIC, struct.pack("<I", len(blob)), blob]
    parts.extend(arrays[name].tobytes(order="C") for name, _ in _ARRAY_LAYOUT)
    return b"".join(parts)


def graph_from_bytes(data):
    if data[:8] != GRAPH_MAGIC:
        raise FormatError("not a complexqa graph file")
    (hlen,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12:12 + hlen].decode("utf-8"))
    if header.get("format_version") != GRAPH_FORMAT_VERSION:
        raise FormatError(f"unsupported graph format version {header.get('format_version')}")
    offset = 12 + hlen
    arrays = {}
    for spec in header["arrays"]:
        dt = np.dtype(spec["dtype"])
        count = int(np.prod(spec["shape"]))
        nbytes = count * dt.itemsize
        if offset + nbytes > len(data):
            raise FormatError(f"truncated array {spec['name']}")
        arrays[spec["name"]] = np.frombuffer(data, dtype=dt, count=count, offset=offset).reshape(spec["shape"]).copy()
        offset += nbytes
    if offset != len(data):
        raise FormatError(f"{len(data) - offset} trailing bytes after the graph arrays")
    return ProteinGraph(
        num_nodes=header["num_nodes"],
        src=arrays["src"].astype(np.int64),
        dst=arrays["dst"].astype(np.int64),
        node_features=arrays["node_features"].astype(np.float32),
        edge_features=arrays["edge_features"].astype(np.float32),
        node_chain=arrays["node_chain"].astype(np.int32),
        node_seq=arrays["node_seq"].astype(np.int32),
        target_id=header["target_id"],
        decoy_id=header["decoy_id"],
    )


def save_graph(graph, path):
    with open(path, "wb") as fh:
        fh.write(graph_to_bytes(graph))


def load_graph(path):
    with open(path, "rb") as fh:
        return graph_from_bytes(fh.read())
