import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from implantgen.skull import (CaseTriple, DatasetConfig, DefectSpec, EmptyDefectError,
                              EmptySkullError, PhantomParams, extract_skull, inject_defect,
                              make_dataset, normalized_radius, phantom_radii, read_dataset,
                              synth_ct, synth_skull_phantom, write_dataset)
from implantgen.voxel import VoxelGrid, mask

from oracles import flood_fill_components

SMALL = DatasetConfig(dims=(48, 48, 48), radii=(18.0, 20.0, 16.0), thickness=4.0,
                      sphere_radius=(5.0, 7.0), box_half=(3.0, 4.0),
                      cylinder_radius=(7.0, 9.0))


def check_triple(case: CaseTriple):
    d, i, c = (g.data.astype(bool) for g in (case.defective, case.implant, case.complete))
    assert not (d & i).any()
    assert np.array_equal(d | i, c)
    assert i.any()


# --- phantoms ------------------------------------------------------------------


def test_spherical_shell_radius_band():
    s = synth_skull_phantom(PhantomParams((10, 10, 10), 2, (32, 32, 32)))
    rho = normalized_radius((32, 32, 32), (10, 10, 10))
    fg = s.data.astype(bool)
    assert fg.any()
    assert rho[fg].min() >= 0.8 - 1e-12 and rho[fg].max() <= 1.0
    # and everything in the band is foreground
    assert fg[(rho >= 0.8) & (rho <= 1.0)].all()


def test_thick_shell_is_solid():
    s = synth_skull_phantom(PhantomParams((10, 8, 9), 12, (32, 32, 32)))
    rho = normalized_radius((32, 32, 32), (10, 8, 9))
    assert np.array_equal(s.data.astype(bool), rho <= 1.0)


@pytest.mark.parametrize("seed", [None, 0, 1, 2])
def test_phantom_is_one_component(seed):
    s = synth_skull_phantom(PhantomParams((12, 14, 10), 2, (32, 32, 32), seed=seed))
    assert len(flood_fill_components(s.data, 26)) == 1


def test_unperturbed_phantom_is_reflection_symmetric():
    s = synth_skull_phantom(PhantomParams((12, 14, 10), 3, (31, 32, 30)))
    for axis in range(3):
        assert np.array_equal(s.data, np.flip(s.data, axis))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_radius_jitter_bounded(seed):
    p = PhantomParams((20.0, 22.0, 18.0), 3, (64, 64, 64), seed=seed)
    r = phantom_radii(p)
    assert np.all(np.abs(r / np.array(p.radii) - 1) <= 0.05 + 1e-12)


@pytest.mark.parametrize("kw", [{"thickness": 0.5}, {"radii": (20, 20, 20), "dims": (32, 32, 40)},
                                {"jitter": 0.2}])
def test_phantom_rejects_degenerate(kw):
    base = {"radii": (10, 10, 10), "thickness": 2, "dims": (32, 32, 32)}
    base.update(kw)
    with pytest.raises(ValueError):
        PhantomParams(**base)


# --- skull extraction -------------------------------------------------------------


def test_extract_drops_table():
    skull = synth_skull_phantom(PhantomParams((12, 14, 10), 2, (32, 40, 32)))
    ct = synth_ct(skull, seed=3)
    bone = (ct.data >= 150)
    assert bone.sum() > skull.count()  # the table passes the threshold
    out = extract_skull(ct)
    assert out == skull


@pytest.mark.parametrize("seed", range(5))
def test_extract_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    ct = VoxelGrid(rng.integers(-1000, 1200, size=(9, 8, 7)), kind="hu")
    comps = flood_fill_components(ct.data >= 150, 26)
    # the oracle's winner: largest, ties by smallest linear index
    best = max(comps, key=lambda c: (len(c), -min(x + 9 * (y + 8 * z) for x, y, z in c)))
    expected = np.zeros(ct.dims, bool)
    for v in best:
        expected[v] = True
    assert np.array_equal(extract_skull(ct).data.astype(bool), expected)


def test_extract_empty_raises():
    with pytest.raises(EmptySkullError):
        extract_skull(VoxelGrid(np.full((4, 4, 4), -1000), kind="hu"))


# --- defects ----------------------------------------------------------------------


def test_sphere_at_block_corner():
    block = mask(np.ones((8, 8, 8)))
    case = inject_defect(block, DefectSpec("sphere", (0.0, 0.0, 0.0), (2.0,)))
    g = np.indices((8, 8, 8))
    sphere = (g ** 2).sum(axis=0) <= 4
    assert np.array_equal(case.implant.data.astype(bool), sphere)
    assert np.array_equal(case.defective.data.astype(bool), ~sphere)
    check_triple(case)


def test_defect_missing_skull_raises():
    s = synth_skull_phantom(PhantomParams((10, 10, 10), 2, (32, 32, 32)))
    with pytest.raises(EmptyDefectError):
        inject_defect(s, DefectSpec("sphere", (15.5, 15.5, 15.5), (3.0,)))


@pytest.mark.parametrize("bad", [
    dict(shape="cone", center=(1, 1, 1), size=(1,)),
    dict(shape="sphere", center=(1, 1, 1), size=(0,)),
    dict(shape="box", center=(1, 1, 1), size=(1, 1)),
])
def test_defect_spec_validation(bad):
    with pytest.raises(ValueError):
        DefectSpec(**bad)


def test_defect_centre_must_be_inside():
    with pytest.raises(ValueError):
        DefectSpec("sphere", (40.0, 1.0, 1.0), (2.0,)).region((32, 32, 32))


def test_random_injections_conserve_counts():
    rng = np.random.default_rng(7)
    done = 0
    while done < 50:
        p = PhantomParams((12, 13, 11), int(rng.integers(1, 4)), (32, 32, 32),
                          seed=int(rng.integers(1 << 30)))
        s = synth_skull_phantom(p)
        shape = ["sphere", "box", "cylinder"][done % 3]
        size = {"sphere": (rng.uniform(1, 6),), "box": tuple(rng.uniform(1, 4, 3)),
                "cylinder": (rng.uniform(1, 5), rng.uniform(1, 4))}[shape]
        spec = DefectSpec(shape, tuple(rng.uniform(0, 31, 3)), size,
                          axis=tuple(rng.normal(size=3)))
        try:
            case = inject_defect(s, spec)
        except EmptyDefectError:
            continue
        assert case.defective.count() + case.implant.count() == s.count()
        check_triple(case)
        done += 1


def test_triple_rejects_broken_invariants():
    a = mask(np.ones((2, 2, 2)))
    z = mask(np.zeros((2, 2, 2)))
    with pytest.raises(ValueError):
        CaseTriple(a, a, a)
    with pytest.raises(ValueError):
        CaseTriple(a, z, a)


# --- datasets ----------------------------------------------------------------------


def test_dataset_deterministic():
    a = make_dataset(1, config=SMALL, seed=5)[0]
    b = make_dataset(1, config=SMALL, seed=5)[0]
    for ga, gb in zip((a.defective, a.implant, a.complete), (b.defective, b.implant, b.complete)):
        assert ga.data.tobytes() == gb.data.tobytes()
    assert a.defect == b.defect


def test_cases_independent_of_batching():
    whole = make_dataset(4, config=SMALL, seed=2)
    tail = make_dataset(2, config=SMALL, seed=2, start=2)
    assert [c.id for c in tail] == ["id002", "id003"]
    for x, y in zip(whole[2:], tail):
        assert x.implant == y.implant


def test_families_are_separate():
    ind = make_dataset(6, "in_distribution", SMALL, seed=1)
    ood = make_dataset(6, "robustness", SMALL, seed=1)
    assert {c.defect.shape for c in ind} == {"sphere"}
    assert {c.defect.shape for c in ood} <= {"box", "cylinder"}
    centre = (np.array(SMALL.dims) - 1) / 2
    for c in ind:
        d = np.array(c.defect.center) - centre
        assert np.degrees(np.arccos(d[2] / np.linalg.norm(d))) <= 30 + 1e-6
    for c in ood:
        d = np.array(c.defect.center) - centre
        assert 60 - 1e-6 <= np.degrees(np.arccos(d[2] / np.linalg.norm(d))) <= 100 + 1e-6
        check_triple(c)


def test_hundred_default_cases_valid():
    cases = make_dataset(100, seed=11)
    assert len(cases) == 100 and len({c.id for c in cases}) == 100
    for c in cases:
        check_triple(c)


def test_empty_family_rejected():
    with pytest.raises(ValueError):
        DatasetConfig(robust_shapes=())
    with pytest.raises(ValueError):
        DatasetConfig(sphere_radius=(5.0, 2.0))
    with pytest.raises(ValueError):
        make_dataset(0)


def test_dataset_disk_round_trip(tmp_path):
    cases = make_dataset(2, "robustness", SMALL, seed=3)
    write_dataset(tmp_path, cases, "test", "robustness", SMALL, 3)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["cases"] == ["ood000", "ood001"]
    back = read_dataset(tmp_path)
    for a, b in zip(cases, back):
        assert a.id == b.id and a.defect == b.defect
        assert a.defective == b.defective and a.implant == b.implant and a.complete == b.complete
