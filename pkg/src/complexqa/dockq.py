"""DockQ labels for two-chain complexes with matched residue numbering."""

import csv
import enum
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateGeometry, DegenerateInterface, FormatError, NumberingMismatch
from .structio import NotAComplex

D_LRMSD = 8.5
D_IRMSD = 1.5
CONTACT_CUTOFF = 5.0
INTERFACE_CUTOFF = 10.0
CLASS_THRESHOLDS = (0.23, 0.49, 0.80)


class QualityClass(enum.IntEnum):
    INCORRECT = 0
    ACCEPTABLE = 1
    MEDIUM = 2
    HIGH = 3

    @property
    def label(self):
        return self.name.capitalize()


@dataclass(frozen=True)
class DockQComponents:
    fnat: float
    lrmsd: float
    irmsd: float

    def __post_init__(self):
        for name in ("fnat", "lrmsd", "irmsd"):
            v = float(getattr(self, name))
            if math.isnan(v):
                raise ValueError(f"{name} is NaN")
            object.__setattr__(self, name, v)
        if not 0.0 <= self.fnat <= 1.0:
            raise ValueError(f"fnat must lie in [0, 1], got {self.fnat}")
        if self.lrmsd < 0 or self.irmsd < 0:
            raise ValueError("RMSD values must be non-negative")

    def as_dict(self):
        return {"fnat": self.fnat, "lrmsd": self.lrmsd, "irmsd": self.irmsd}


def rmsd_scaled(rmsd, d_i):
    """``1 / (1 + (rmsd/d_i)^2)``."""
    if d_i <= 0:
        raise ValueError("scale distance must be positive")
    r = float(rmsd) / float(d_i)
    if math.isinf(r):
        return 0.0
    return 1.0 / (1.0 + r * r)


def dockq_score(c):
    """Mean of fnat and the two scaled RMSD terms.

    Accepts a :class:`DockQComponents` or any ``(fnat, lrmsd, irmsd)`` triple.
    """
    if not isinstance(c, DockQComponents):
        c = DockQComponents(*c)
    return (c.fnat + rmsd_scaled(c.lrmsd, D_LRMSD) + rmsd_scaled(c.irmsd, D_IRMSD)) / 3.0


def dockq_class(score):
    """Quality band of a DockQ score (lower bounds inclusive)."""
    score = float(score)
    if math.isnan(score):
        raise ValueError("score is NaN")
    level = 0
    for threshold in CLASS_THRESHOLDS:
        if score >= threshold:
            level += 1
    return QualityClass(level)


def kabsch_superpose(P, Q):
    """Rigid transform ``(R, t)`` minimising ``|P @ R.T + t - Q|`` plus the resulting RMSD.

    ``R`` is a proper rotation.  Raises :class:`DegenerateGeometry` for fewer
    than three points or collinear point sets.
    """
    P = np.asarray(P, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    if P.shape != Q.shape or P.ndim != 2 or P.shape[1] != 3:
        raise ValueError(f"expected two n×3 arrays, got {P.shape} and {Q.shape}")
    if P.shape[0] < 3:
        raise DegenerateGeometry(f"need at least 3 points, got {P.shape[0]}")
    pc = P.mean(axis=0)
    qc = Q.mean(axis=0)
    P0 = P - pc
    Q0 = Q - qc
    for X in (P0, Q0):
        s = np.linalg.svd(X, compute_uv=False)
        if s[0] == 0 or s[1] <= 1e-8 * s[0]:
            raise DegenerateGeometry("point set is collinear")
    H = P0.T @ Q0
    U, _, Vt = np.linalg.svd(H)
    sign = 1.0 if np.linalg.det(Vt.T @ U.T) >= 0 else -1.0
    D = np.diag([1.0, 1.0, sign])
    R = Vt.T @ D @ U.T
    t = qc - R @ pc
    diff = P @ R.T + t - Q
    rmsd = float(np.sqrt((diff * diff).sum() / P.shape[0]))
    return R, t, rmsd


def _rmsd(A, B):
    d = A - B
    return float(np.sqrt((d * d).sum() / A.shape[0]))


def _residue_atoms(chain):
    """Per-residue atom coordinate arrays, in chain order."""
    return [np.asarray([xyz for _, xyz in r.atoms()], dtype=np.float64) for r in chain.residues]


def _contacts(rec_atoms, lig_atoms, cutoff):
    """Set of ``(i, j)`` residue pairs with any atom pair closer than ``cutoff``."""
    rec_all = np.concatenate(rec_atoms)
    lig_all = np.concatenate(lig_atoms)
    rec_owner = np.repeat(np.arange(len(rec_atoms)), [len(a) for a in rec_atoms])
    lig_owner = np.repeat(np.arange(len(lig_atoms)), [len(a) for a in lig_atoms])
    d2 = ((rec_all[:, None, :] - lig_all[None, :, :]) ** 2).sum(axis=-1)
    ai, aj = np.nonzero(d2 < cutoff * cutoff)
    return set(zip(rec_owner[ai].tolist(), lig_owner[aj].tolist()))


def _matched_chains(decoy, native):
    if len(native.chains) != 2:
        raise NotAComplex(f"component computation needs exactly 2 chains, native has {len(native.chains)}")
    if sorted(decoy.chain_ids) != sorted(native.chain_ids):
        raise NumberingMismatch(f"chain ids differ: {decoy.chain_ids} vs {native.chain_ids}")
    pairs = []
    for nch in native.chains:
        dch = decoy.chain(nch.chain_id)
        nkeys = [r.key for r in nch.residues]
        dkeys = [r.key for r in dch.residues]
        if nkeys != dkeys:
            raise NumberingMismatch(f"residue numbering differs in chain {nch.chain_id}")
        pairs.append((dch, nch))
    # the larger chain is the receptor; ties keep native chain order
    pairs.sort(key=lambda p: -len(p[1].residues))
    return pairs


def compute_components(decoy, native):
    """fnat, LRMSD and iRMSD of ``decoy`` against ``native``.

    Both structures must carry the same two chains with identical residue
    numbering.  Contacts use every retained backbone atom; RMSDs use CA.
    """
    (d_rec, n_rec), (d_lig, n_lig) = _matched_chains(decoy, native)

    n_rec_atoms, n_lig_atoms = _residue_atoms(n_rec), _residue_atoms(n_lig)
    d_rec_atoms, d_lig_atoms = _residue_atoms(d_rec), _residue_atoms(d_lig)

    native_contacts = _contacts(n_rec_atoms, n_lig_atoms, CONTACT_CUTOFF)
    if not native_contacts:
        raise DegenerateInterface(f"{native.target_id}: native has no cross-chain contacts")
    decoy_contacts = _contacts(d_rec_atoms, d_lig_atoms, CONTACT_CUTOFF)
    fnat = len(native_contacts & decoy_contacts) / len(native_contacts)

    ca = lambda ch: np.asarray([r.ca for r in ch.residues], dtype=np.float64)  # noqa: E731
    n_rec_ca, n_lig_ca, d_rec_ca, d_lig_ca = ca(n_rec), ca(n_lig), ca(d_rec), ca(d_lig)

    R, t, _ = kabsch_superpose(d_rec_ca, n_rec_ca)
    lrmsd = _rmsd(d_lig_ca @ R.T + t, n_lig_ca)

    interface = _contacts(n_rec_atoms, n_lig_atoms, INTERFACE_CUTOFF)
    rec_idx = sorted({i for i, _ in interface})
    lig_idx = sorted({j for _, j in interface})
    n_int = np.concatenate([n_rec_ca[rec_idx], n_lig_ca[lig_idx]])
    d_int = np.concatenate([d_rec_ca[rec_idx], d_lig_ca[lig_idx]])
    _, _, irmsd = kabsch_superpose(d_int, n_int)

    return DockQComponents(fnat, lrmsd, irmsd)


@dataclass(frozen=True)
class LabelRow:
    target_id: str
    decoy_id: str
    dockq: float
    components: DockQComponents = None

    @property
    def quality_class(self):
        return dockq_class(self.dockq)


def read_labels(path, target_id=None):
    """Read a labels CSV.

    Columns are ``decoy_id`` plus either ``dockq`` or ``fnat, lrmsd, irmsd``;
    an optional ``target_id`` column overrides ``target_id`` (which defaults to
    the parent directory name).
    """
    path = Path(path)
    if target_id is None:
        target_id = path.parent.name
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        fields = set(reader.fieldnames or ())
        if "decoy_id" not in fields:
            raise FormatError(f"{path}: missing decoy_id column")
        has_components = {"fnat", "lrmsd", "irmsd"} <= fields
        if "dockq" not in fields and not has_components:
            raise FormatError(f"{path}: need a dockq column or fnat/lrmsd/irmsd columns")
        for lineno, rec in enumerate(reader, start=2):
            try:
                comps = None
                if has_components and all(rec.get(k, "") != "" for k in ("fnat", "lrmsd", "irmsd")):
                    comps = DockQComponents(float(rec["fnat"]), float(rec["lrmsd"]), float(rec["irmsd"]))
                if "dockq" in fields and rec.get("dockq", "") != "":
                    score = float(rec["dockq"])
                elif comps is not None:
                    score = dockq_score(comps)
                else:
                    raise ValueError("no label value")
                if not 0.0 <= score <= 1.0:
                    raise ValueError(f"dockq {score} outside [0, 1]")
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
            rows.append(LabelRow(rec.get("target_id") or target_id, rec["decoy_id"], score, comps))
    return rows
