import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from implantgen.metrics import (PAPER_REFERENCE, UndefinedMetric, dsc, evaluate_case,
                                evaluate_set, hausdorff_mm, overlap_counts,
                                reconstruction_error, summarize)
from implantgen.voxel import mask

from oracles import all_pairs_hausdorff, brute_counts


def random_pair(rng, dims, density=0.3):
    return ((rng.random(dims) < density).astype(np.uint8),
            (rng.random(dims) < density).astype(np.uint8))


@pytest.mark.parametrize("seed", range(25))
def test_counts_dsc_re_match_counting(seed):
    rng = np.random.default_rng(seed)
    dims = tuple(rng.integers(3, 9, size=3))
    p, g = random_pair(rng, dims, rng.uniform(0.05, 0.6))
    np_, ng, ni = brute_counts(p, g)
    assert overlap_counts(p, g) == (np_, ng, ni)
    assert dsc(p, g) == (2 * ni / (np_ + ng) if np_ + ng else 1.0)
    assert reconstruction_error(p, g) == (np_ + ng - 2 * ni) / p.size


@pytest.mark.parametrize("seed", range(15))
def test_hausdorff_matches_all_pairs(seed):
    rng = np.random.default_rng(100 + seed)
    dims = tuple(rng.integers(3, 9, size=3))
    p, g = random_pair(rng, dims, 0.1)
    p[0, 0, 0] = g[-1, -1, -1] = 1
    spacing = tuple(rng.uniform(0.3, 2.5, size=3))
    assert hausdorff_mm(p, g, spacing) == pytest.approx(all_pairs_hausdorff(p, g, spacing),
                                                        abs=1e-9)


def test_hausdorff_example_with_spacing():
    p = np.zeros((4, 1, 1), np.uint8)
    g = np.zeros((4, 1, 1), np.uint8)
    p[0, 0, 0] = g[3, 0, 0] = 1
    assert hausdorff_mm(p, g, (2.0, 1.0, 1.0)) == 6.0
    # a grid carries its own spacing
    assert hausdorff_mm(mask(p, (2.0, 1.0, 1.0)), mask(g, (2.0, 1.0, 1.0))) == 6.0


def test_empty_cases():
    z = np.zeros((3, 3, 3), np.uint8)
    o = z.copy()
    o[1, 1, 1] = 1
    assert dsc(z, z) == 1.0 and dsc(o, z) == 0.0
    assert reconstruction_error(z, z) == 0.0
    with pytest.raises(UndefinedMetric):
        hausdorff_mm(o, z)
    with pytest.raises(ValueError):
        dsc(z, np.zeros((3, 3, 2)))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 10.0))
def test_metric_properties(seed, scale):
    rng = np.random.default_rng(seed)
    p, g = random_pair(rng, (5, 4, 6))
    p[2, 2, 2] = g[1, 1, 1] = 1
    assert dsc(p, g) == dsc(g, p) and 0 <= dsc(p, g) <= 1
    assert reconstruction_error(p, g) == reconstruction_error(g, p)
    np_, ng, ni = overlap_counts(p, g)
    assert reconstruction_error(p, g) * p.size == np_ + ng - 2 * ni
    spacing = np.array([1.0, 1.5, 0.7])
    h = hausdorff_mm(p, g, spacing)
    assert h == hausdorff_mm(g, p, spacing) and h >= 0
    assert hausdorff_mm(p, g, spacing * scale) == pytest.approx(scale * h, rel=1e-12)
    assert hausdorff_mm(p, p, spacing) == 0.0 and dsc(p, p) == 1.0


def test_summary_quartiles_linear():
    s = summarize([1.0, 2.0, 3.0, 4.0])
    assert (s["q1"], s["median"], s["q3"]) == (1.75, 2.5, 3.25)
    assert s["mean"] == 2.5 and s["min"] == 1.0 and s["max"] == 4.0
    assert summarize([])["mean"] is None


def make_set(rng, n=4):
    preds, gts = {}, {}
    for i in range(n):
        p, g = random_pair(rng, (6, 6, 6))
        preds[f"c{i}"], gts[f"c{i}"] = mask(p), mask(g)
    return preds, gts


def test_report_aggregates_recomputable():
    preds, gts = make_set(np.random.default_rng(1))
    preds["c9"] = mask(np.zeros((6, 6, 6)))
    gts["c9"] = mask(np.ones((6, 6, 6)))
    report = evaluate_set(preds, gts)
    assert [r.case_id for r in report.rows] == ["c0", "c1", "c2", "c3", "c9"]
    agg = report.aggregates
    assert agg["dsc"]["mean"] == pytest.approx(np.mean([r.dsc for r in report.rows]))
    assert agg["hd_undefined"] == 1 and agg["hd_mm"]["n"] == 4
    for r in report.rows:
        assert 0 <= r.dsc <= 1 and 0 <= r.re <= 1
        assert r.hd_mm is None or r.hd_mm >= 0
    obj = json.loads(report.dumps())
    assert obj["meta"]["paper_reference"] == PAPER_REFERENCE
    lines = report.to_csv().splitlines()
    assert lines[0] == "case_id,dsc,hd_mm,re" and len(lines) == 6
    assert lines[-1].split(",")[2] == ""


def test_report_is_deterministic():
    a = evaluate_set(*make_set(np.random.default_rng(2)))
    b = evaluate_set(*make_set(np.random.default_rng(2)))
    assert a.dumps() == b.dumps() and a.to_csv() == b.to_csv()


def test_identical_sets_score_perfectly():
    preds, _ = make_set(np.random.default_rng(3))
    report = evaluate_set(preds, dict(preds))
    assert report.means() == (1.0, 0.0, 0.0)


def test_mismatched_sets_rejected():
    preds, gts = make_set(np.random.default_rng(4))
    del preds["c0"]
    with pytest.raises(ValueError, match="differ"):
        evaluate_set(preds, gts)
    with pytest.raises(ValueError):
        evaluate_case("x", mask(np.zeros((2, 2, 2))), mask(np.zeros((3, 2, 2))))
