import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.spatial.transform import Rotation

from complexqa import dockq, synthetic
from complexqa.dockq import DockQComponents, QualityClass
from complexqa.errors import (
    DegenerateGeometry, DegenerateInterface, FormatError, NumberingMismatch,
)
from complexqa.structio import ComplexStructure, NotAComplex

import oracles
from conftest import moved


@pytest.fixture(scope="module")
def native():
    return synthetic.random_complex(np.random.default_rng(11), lengths=(14, 10), gap=7.0)


class TestScaledRmsd:
    @pytest.mark.parametrize("r,expected", [(0.0, 1.0), (8.5, 0.5), (17.0, 0.2)])
    def test_lrmsd_scale(self, r, expected):
        assert dockq.rmsd_scaled(r, 8.5) == pytest.approx(expected, abs=1e-15)

    def test_irmsd_scale(self):
        assert dockq.rmsd_scaled(1.5, 1.5) == 0.5

    def test_nonpositive_scale(self):
        with pytest.raises(ValueError):
            dockq.rmsd_scaled(1.0, 0.0)


class TestScore:
    def test_perfect(self):
        assert dockq.dockq_score(DockQComponents(1.0, 0.0, 0.0)) == 1.0

    def test_half(self):
        assert dockq.dockq_score(DockQComponents(0.5, 8.5, 1.5)) == pytest.approx(0.5, abs=1e-15)

    def test_far_limit(self):
        assert dockq.dockq_score(DockQComponents(0.0, 1e6, 1e6)) < 1e-9

    def test_accepts_triple(self):
        assert dockq.dockq_score((0.5, 8.5, 1.5)) == pytest.approx(0.5)

    @pytest.mark.parametrize("bad", [(1.2, 0, 0), (-0.1, 0, 0), (0.5, -1, 0), (0.5, 0, math.nan)])
    def test_invalid_components(self, bad):
        with pytest.raises(ValueError):
            DockQComponents(*bad)


class TestClass:
    @pytest.mark.parametrize("score,cls", [
        (0.0, QualityClass.INCORRECT), (0.2299, QualityClass.INCORRECT), (0.23, QualityClass.ACCEPTABLE),
        (0.4899, QualityClass.ACCEPTABLE), (0.49, QualityClass.MEDIUM), (0.7999, QualityClass.MEDIUM),
        (0.80, QualityClass.HIGH), (1.0, QualityClass.HIGH),
    ])
    def test_bands(self, score, cls):
        assert dockq.dockq_class(score) is cls

    def test_order_and_labels(self):
        assert QualityClass.INCORRECT < QualityClass.ACCEPTABLE < QualityClass.MEDIUM < QualityClass.HIGH
        assert [c.label for c in QualityClass] == ["Incorrect", "Acceptable", "Medium", "High"]
        assert [int(c) for c in QualityClass] == [0, 1, 2, 3]

    def test_nan(self):
        with pytest.raises(ValueError):
            dockq.dockq_class(math.nan)


class TestKabsch:
    def test_identity(self, rng):
        P = rng.normal(size=(10, 3))
        R, t, rmsd = dockq.kabsch_superpose(P, P)
        np.testing.assert_allclose(R, np.eye(3), atol=1e-12)
        np.testing.assert_allclose(t, 0, atol=1e-12)
        assert rmsd < 1e-12

    def test_recovers_quarter_turn(self, rng):
        P = rng.normal(size=(12, 3))
        Rz = Rotation.from_euler("z", 90, degrees=True).as_matrix()
        R, t, rmsd = dockq.kabsch_superpose(P, P @ Rz.T)
        np.testing.assert_allclose(R, Rz, atol=1e-9)
        assert rmsd < 1e-9

    def test_proper_rotation_for_mirror_image(self, rng):
        P = rng.normal(size=(15, 3))
        R, _, _ = dockq.kabsch_superpose(P, P * np.array([1, 1, -1]))
        assert np.linalg.det(R) == pytest.approx(1.0)

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_quaternion_fit(self, seed):
        r = np.random.default_rng(seed)
        P, Q = r.normal(size=(20, 3)) * 5, r.normal(size=(20, 3)) * 5
        _, _, rmsd = dockq.kabsch_superpose(P, Q)
        _, _, ref = oracles.quaternion_superpose(P, Q)
        assert rmsd == pytest.approx(ref, abs=1e-9)

    def test_too_few_points(self):
        with pytest.raises(DegenerateGeometry):
            dockq.kabsch_superpose(np.eye(3)[:2], np.eye(3)[:2])

    def test_collinear(self):
        P = np.outer(np.arange(5.0), [1, 2, 3])
        with pytest.raises(DegenerateGeometry):
            dockq.kabsch_superpose(P, P)


class TestComponents:
    def test_self_comparison(self, native):
        c = dockq.compute_components(native, native)
        assert (c.fnat, c.lrmsd, c.irmsd) == (1.0, pytest.approx(0.0, abs=1e-9), pytest.approx(0.0, abs=1e-9))
        assert dockq.dockq_score(c) == pytest.approx(1.0)

    def test_ligand_translation(self, native):
        lig = min(native.chains, key=len).chain_id
        decoy = moved(native, t=np.array([8.5, 0.0, 0.0]), chains={lig})
        c = dockq.compute_components(decoy, native)
        assert c.lrmsd == pytest.approx(8.5, abs=1e-6)
        assert c.irmsd > 0
        assert 0 <= dockq.dockq_score(c) <= 1

    def test_receptor_is_larger_chain(self, native):
        rec = max(native.chains, key=len).chain_id
        # moving the receptor alone is undone by superposing on it
        decoy = moved(native, t=np.array([3.0, 0.0, 0.0]), chains={rec})
        assert dockq.compute_components(decoy, native).lrmsd == pytest.approx(3.0, abs=1e-6)

    @pytest.mark.parametrize("seed", range(25))
    def test_random_pairs_match_brute_force(self, seed):
        r = np.random.default_rng(1000 + seed)
        while True:  # the second chain's walk can drift out of contact
            nat = synthetic.random_complex(r, lengths=(int(r.integers(8, 16)), int(r.integers(6, 12))), gap=6.0)
            if oracles.brute_contacts(*sorted(nat.chains, key=lambda c: -len(c)), 5.0):
                break
        lig = min(nat.chains, key=len).chain_id
        rot = Rotation.from_rotvec(r.normal(scale=0.15, size=3)).as_matrix()
        dec = synthetic.perturb(moved(nat, rot, r.normal(scale=1.5, size=3), chains={lig}), r,
                                sigma=float(r.uniform(0.2, 1.5)))
        c = dockq.compute_components(dec, nat)
        fnat, lrmsd, irmsd = oracles.components_oracle(dec, nat)
        assert c.fnat == pytest.approx(fnat, abs=1e-6)
        assert c.lrmsd == pytest.approx(lrmsd, abs=1e-6)
        assert c.irmsd == pytest.approx(irmsd, abs=1e-6)

    def test_joint_rigid_motion_leaves_score(self, native, rng):
        decoy = synthetic.perturb(native, rng, sigma=1.0)
        base = dockq.dockq_score(dockq.compute_components(decoy, native))
        R = Rotation.from_rotvec([0.4, -1.1, 0.7]).as_matrix()
        again = dockq.dockq_score(dockq.compute_components(moved(decoy, R, np.array([5.0, -3.0, 12.0])), native))
        assert again == pytest.approx(base, abs=1e-6)

    def test_numbering_mismatch(self, native):
        d = native.to_dict()
        d["chains"][0]["residues"][0]["res_seq"] += 100
        with pytest.raises(NumberingMismatch):
            dockq.compute_components(ComplexStructure.from_dict(d), native)

    def test_chain_id_mismatch(self, native):
        d = native.to_dict()
        d["chains"][1]["chain_id"] = "Q"
        for r in d["chains"][1]["residues"]:
            r["chain_id"] = "Q"
        with pytest.raises(NumberingMismatch):
            dockq.compute_components(ComplexStructure.from_dict(d), native)

    def test_no_native_contacts(self):
        far = synthetic.random_complex(np.random.default_rng(0), gap=40.0)
        with pytest.raises(DegenerateInterface):
            dockq.compute_components(far, far)

    def test_more_than_two_chains(self, native):
        d = native.to_dict()
        extra = dict(d["chains"][1])
        extra["chain_id"] = "C"
        extra["residues"] = [dict(r, chain_id="C") for r in extra["residues"]]
        d["chains"].append(extra)
        three = ComplexStructure.from_dict(d)
        with pytest.raises(NotAComplex):
            dockq.compute_components(three, three)


@given(st.floats(0, 1), st.floats(0, 50), st.floats(0, 50), st.floats(1e-3, 5))
def test_score_monotonic(fnat, lrmsd, irmsd, delta):
    base = dockq.dockq_score((fnat, lrmsd, irmsd))
    assert 0 <= base <= 1
    assert dockq.dockq_score((fnat, lrmsd + delta, irmsd)) < base
    assert dockq.dockq_score((fnat, lrmsd, irmsd + delta)) < base
    if fnat + delta / 5 <= 1:
        assert dockq.dockq_score((fnat + delta / 5, lrmsd, irmsd)) > base


@given(st.floats(0, 1), st.floats(0, 1))
def test_class_is_nondecreasing(a, b):
    lo, hi = sorted((a, b))
    assert dockq.dockq_class(lo) <= dockq.dockq_class(hi)


class TestLabels:
    def test_dockq_column(self, tmp_path):
        d = tmp_path / "T1"
        d.mkdir()
        (d / "labels.csv").write_text("decoy_id,dockq\nm1,0.85\nm2,0.1\n")
        rows = dockq.read_labels(d / "labels.csv")
        assert [(r.target_id, r.decoy_id, r.dockq) for r in rows] == [("T1", "m1", 0.85), ("T1", "m2", 0.1)]
        assert rows[0].quality_class is QualityClass.HIGH

    def test_component_columns(self, tmp_path):
        p = tmp_path / "labels.csv"
        p.write_text("decoy_id,fnat,lrmsd,irmsd\nm1,0.5,8.5,1.5\n")
        (row,) = dockq.read_labels(p, target_id="X")
        assert row.dockq == pytest.approx(0.5)
        assert row.components == DockQComponents(0.5, 8.5, 1.5)

    def test_target_column_wins(self, tmp_path):
        p = tmp_path / "labels.csv"
        p.write_text("target_id,decoy_id,dockq\nA,m1,0.3\nB,m1,0.6\n")
        assert [r.target_id for r in dockq.read_labels(p, target_id="X")] == ["A", "B"]

    @pytest.mark.parametrize("text", [
        "name,dockq\nm1,0.5\n",
        "decoy_id,fnat\nm1,0.5\n",
        "decoy_id,dockq\nm1,abc\n",
        "decoy_id,dockq\nm1,1.5\n",
        "decoy_id,fnat,lrmsd,irmsd\nm1,2,1,1\n",
    ])
    def test_bad_files(self, tmp_path, text):
        p = tmp_path / "labels.csv"
        p.write_text(text)
        with pytest.raises(FormatError):
            dockq.read_labels(p)
