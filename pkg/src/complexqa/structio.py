"""Fixed-column PDB ATOM parsing into a multi-chain backbone model.

Only the atoms the rest of the pipeline uses are kept: N, CA, C, O and CB.
"""

import io
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DuplicateAtom, EmptyStructure, MalformedRecord, ComplexQAError

logger = logging.getLogger(__name__)

STANDARD_RESIDUES = (
    "ALA", "ARG", "ASN", "ASP", "CYS", "GLN", "GLU", "GLY", "HIS", "ILE",
    "LEU", "LYS", "MET", "PHE", "PRO", "SER", "THR", "TRP", "TYR", "VAL",
)
UNK = "UNK"
RESIDUE_TYPES = STANDARD_RESIDUES + (UNK,)
_RESIDUE_INDEX = {name: i for i, name in enumerate(RESIDUE_TYPES)}

BACKBONE_ATOMS = ("N", "CA", "C", "O", "CB")
JSON_FORMAT_VERSION = 1


class NotAComplex(ComplexQAError):
    """Raised when fewer than two chains are present in complex mode."""


def residue_index(residue_type):
    """Alphabetical index of a 3-letter residue code; anything unknown maps to UNK (20)."""
    return _RESIDUE_INDEX.get(str(residue_type).strip().upper(), _RESIDUE_INDEX[UNK])


def _vec(v):
    return None if v is None else tuple(float(x) for x in v)


@dataclass
class ResidueRecord:
    chain_id: str
    seq_index: int
    residue_type: str
    ca: tuple
    n: tuple = None
    o: tuple = None
    cb: tuple = None
    c: tuple = None
    res_seq: int = 0
    icode: str = ""

    def __post_init__(self):
        if self.ca is None:
            raise ValueError("a residue needs a CA atom")
        self.residue_type = RESIDUE_TYPES[residue_index(self.residue_type)]
        for name in ("ca", "n", "o", "cb", "c"):
            setattr(self, name, _vec(getattr(self, name)))

    @property
    def key(self):
        """Author numbering key used to match residues between two models."""
        return (self.chain_id, self.res_seq, self.icode)

    def atoms(self):
        """Present atoms as ``(name, xyz)`` pairs, backbone order."""
        out = []
        for name in BACKBONE_ATOMS:
            xyz = getattr(self, name.lower())
            if xyz is not None:
                out.append((name, xyz))
        return out


@dataclass
class Chain:
    chain_id: str
    residues: list

    def __len__(self):
        return len(self.residues)


@dataclass
class ComplexStructure:
    target_id: str
    decoy_id: str
    chains: list
    parse_warnings: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def num_residues(self):
        return sum(len(ch) for ch in self.chains)

    @property
    def chain_ids(self):
        return [ch.chain_id for ch in self.chains]

    def residues(self):
        """All residues in canonical (chain order, seq_index) order."""
        return [r for ch in self.chains for r in ch.residues]

    def chain(self, chain_id):
        for ch in self.chains:
            if ch.chain_id == chain_id:
                return ch
        raise KeyError(chain_id)

    def coords(self, atom="ca", fallback="ca"):
        """N×3 float64 array of one atom type, substituting ``fallback`` where missing."""
        rows = []
        for r in self.residues():
            xyz = getattr(r, atom)
            if xyz is None:
                xyz = getattr(r, fallback)
            rows.append(xyz)
        return np.asarray(rows, dtype=np.float64).reshape(-1, 3)

    def validate(self, allow_single_chain=False):
        if self.num_residues == 0:
            raise EmptyStructure("structure has no residues with a CA atom")
        if self.num_residues < 2:
            raise EmptyStructure("structure needs at least two residues")
        if len(self.chains) < 2 and not allow_single_chain:
            raise NotAComplex(f"expected >= 2 chains, found {len(self.chains)}")
        seen = set()
        for ch in self.chains:
            last = None
            for r in ch.residues:
                if (r.chain_id, r.seq_index) in seen:
                    raise MalformedRecord(f"duplicate residue {r.chain_id}:{r.seq_index}")
                seen.add((r.chain_id, r.seq_index))
                if last is not None and r.seq_index <= last:
                    raise MalformedRecord(f"seq_index not increasing in chain {ch.chain_id}")
                last = r.seq_index
                if not np.all(np.isfinite(r.ca)):
                    raise MalformedRecord(f"non-finite CA in {r.chain_id}:{r.seq_index}")
        return self

    # -- JSON dump -------------------------------------------------------
    def to_dict(self):
        return {
            "format_version": JSON_FORMAT_VERSION,
            "target_id": self.target_id,
            "decoy_id": self.decoy_id,
            "chains": [
                {
                    "chain_id": ch.chain_id,
                    "residues": [
                        {
                            "seq_index": r.seq_index,
                            "residue_type": r.residue_type,
                            "res_seq": r.res_seq,
                            "icode": r.icode,
                            **{a: (list(getattr(r, a)) if getattr(r, a) is not None else None)
                               for a in ("ca", "n", "c", "o", "cb")},
                        }
                        for r in ch.residues
                    ],
                }
                for ch in self.chains
            ],
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, data):
        if data.get("format_version") != JSON_FORMAT_VERSION:
            raise MalformedRecord(f"unsupported structure JSON version {data.get('format_version')}")
        chains = []
        for ch in data["chains"]:
            residues = [
                ResidueRecord(
                    chain_id=ch["chain_id"],
                    seq_index=int(r["seq_index"]),
                    residue_type=r["residue_type"],
                    ca=r["ca"], n=r["n"], o=r["o"], cb=r["cb"], c=r["c"],
                    res_seq=int(r["res_seq"]), icode=r["icode"],
                )
                for r in ch["residues"]
            ]
            chains.append(Chain(ch["chain_id"], residues))
        return cls(data["target_id"], data["decoy_id"], chains)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def _float_field(line, start, stop, lineno):
    raw = line[start:stop]
    try:
        value = float(raw)
    except ValueError:
        raise MalformedRecord(f"line {lineno}: bad coordinate field {raw!r}") from None
    if not np.isfinite(value):
        raise MalformedRecord(f"line {lineno}: non-finite coordinate {raw!r}")
    return value


def _read_text(source):
    if isinstance(source, (bytes, bytearray)):
        return bytes(source).decode("latin-1")
    if isinstance(source, str):
        return source
    if isinstance(source, io.IOBase) or hasattr(source, "read"):
        data = source.read()
        return data.decode("latin-1") if isinstance(data, (bytes, bytearray)) else data
    raise TypeError(f"cannot read PDB text from {type(source).__name__}")


def _icode_rank(icode):
    return (icode != "", icode)


def parse_pdb(source, target_id="", decoy_id="", allow_single_chain=False, strict=False):
    """Parse PDB ATOM records into a :class:`ComplexStructure`.

    First MODEL only, altLoc blank or ``A`` only, HETATM ignored.  Residues
    without a CA are dropped; repeated atom names keep the first occurrence
    (``strict=True`` raises :class:`DuplicateAtom` instead).  Counts of both
    are left in ``parse_warnings``, together with the number of residues
    missing N or O (CA stands in for them downstream).
    """
    text = _read_text(source)
    chain_order = []
    # chain -> (res_seq, icode) -> {"resname", "atoms": {name: xyz}}
    residues = {}
    warnings = {"dropped_no_ca": 0, "duplicate_atoms": 0, "altloc_skipped": 0, "missing_n_or_o": 0}
    in_model = False

    for lineno, line in enumerate(text.splitlines(), start=1):
        record = line[:6]
        if record.startswith("MODEL"):
            in_model = True
            continue
        if record.startswith("ENDMDL"):
            if in_model:
                break
            continue
        if not record.startswith("ATOM"):
            continue
        if len(line) < 54:
            raise MalformedRecord(f"line {lineno}: ATOM record shorter than 54 columns")
        alt = line[16]
        if alt not in (" ", "A"):
            warnings["altloc_skipped"] += 1
            continue
        name = line[12:16].strip()
        if name not in BACKBONE_ATOMS:
            continue
        resname = line[17:20].strip()
        chain_id = line[21]
        try:
            res_seq = int(line[22:26])
        except ValueError:
            raise MalformedRecord(f"line {lineno}: bad residue number {line[22:26]!r}") from None
        icode = line[26].strip()
        xyz = (
            _float_field(line, 30, 38, lineno),
            _float_field(line, 38, 46, lineno),
            _float_field(line, 46, 54, lineno),
        )
        if chain_id not in residues:
            chain_order.append(chain_id)
            residues[chain_id] = {}
        res = residues[chain_id].setdefault((res_seq, icode), {"resname": resname, "atoms": {}})
        if name in res["atoms"]:
            if strict:
                raise DuplicateAtom(f"line {lineno}: atom {name} repeated in {chain_id}{res_seq}{icode}")
            warnings["duplicate_atoms"] += 1
            continue
        res["atoms"][name] = xyz

    chains = []
    for chain_id in chain_order:
        keys = sorted(residues[chain_id], key=lambda k: (k[0], _icode_rank(k[1])))
        records = []
        for ordinal, key in enumerate(keys):
            res = residues[chain_id][key]
            atoms = res["atoms"]
            if "CA" not in atoms:
                warnings["dropped_no_ca"] += 1
                continue
            if "N" not in atoms or "O" not in atoms:
                # features substitute CA for the missing atom
                warnings["missing_n_or_o"] += 1
            records.append(ResidueRecord(
                chain_id=chain_id,
                seq_index=ordinal,
                residue_type=res["resname"],
                ca=atoms["CA"], n=atoms.get("N"), o=atoms.get("O"),
                cb=atoms.get("CB"), c=atoms.get("C"),
                res_seq=key[0], icode=key[1],
            ))
        if records:
            chains.append(Chain(chain_id, records))

    if not chains:
        raise EmptyStructure("no CA atoms found")
    structure = ComplexStructure(target_id, decoy_id, chains, parse_warnings=warnings)
    if any(warnings.values()):
        logger.warning("%s/%s: parse warnings %s", target_id, decoy_id, warnings)
    return structure.validate(allow_single_chain=allow_single_chain)


def read_pdb(path, target_id=None, decoy_id=None, **kwargs):
    """Parse a PDB file; ids default to the parent directory and file stem."""
    from pathlib import Path

    path = Path(path)
    with open(path, "rb") as fh:
        return parse_pdb(
            fh,
            target_id=path.parent.name if target_id is None else target_id,
            decoy_id=path.stem if decoy_id is None else decoy_id,
            **kwargs,
        )


def format_pdb(structure):
    """Render a structure back to ATOM records (first-model, no HETATM)."""
    lines = []
    serial = 1
    for ch in structure.chains:
        for r in ch.residues:
            for name, (x, y, z) in r.atoms():
                element = name[0]
                lines.append(
                    f"ATOM  {serial:5d} {name:<4s} {r.residue_type:>3s} {ch.chain_id}"
                    f"{r.res_seq:4d}{r.icode or ' ':1s}   {x:8.3f}{y:8.3f}{z:8.3f}"
                    f"  1.00  0.00          {element:>2s}"
                )
                serial += 1
        lines.append(f"TER   {serial:5d}      {ch.residues[-1].residue_type:>3s} {ch.chain_id}")
        serial += 1
    lines.append("END")
    return "\n".join(lines) + "\n"
