import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from covclose import coverage as cov
from covclose.coverage import CoverageDatabase, CoveragePoint


def db_of(universe, covered, kind="line", provenance=()):
    return CoverageDatabase.from_points(
        (CoveragePoint(pid, kind, 1 if pid in covered else 0) for pid in universe), provenance
    )


# -- parsing --


def test_canonical_single_line_point():
    db = cov.parse_canonical("line top.sv:12 3\n")
    (p,) = db.points.values()
    assert (p.id, p.kind, p.hits, p.covered) == ("top.sv:12", "line", 3, True)
    assert p.location == ("top.sv", 12)


def test_empty_file_gives_empty_database(tmp_path):
    path = tmp_path / "empty.covdb"
    path.write_text("")
    db = cov.parse(path)
    assert db.total == 0 and db.percentage == 0.0


def test_duplicate_id_cites_second_line():
    lines = ["# header", "line a 1", "line b 0", "line dup 1", "", "# gap", "", "line c 2", "line dup 0"]
    with pytest.raises(cov.CoverageParseError) as err:
        cov.parse_canonical("\n".join(lines) + "\n", "x.covdb")
    assert err.value.lineno == 9
    assert "x.covdb:9" in str(err.value)


def test_unknown_kind_rejected():
    with pytest.raises(cov.CoverageParseError, match="unknown kind"):
        cov.parse_canonical("statement a 1\n")


def test_provenance_and_comments_round_trip():
    text = "#!provenance 2 3\n#!provenance 2 4\nbranch a.b 0  # trailing\nfsm s.idle 7\n"
    db = cov.parse_canonical(text)
    assert db.provenance == ((2, 3), (2, 4))
    assert cov.parse_canonical(cov.dumps(db)) == db
    assert cov.dumps(db).splitlines()[0] == "#!provenance 2 3"


def test_info_format():
    text = "SF:rtl/top.sv\nDA:3,1\nDA:4,0\nBRDA:5,0,1,-\nBRDA:5,0,2,4\nend_of_record\n"
    db = cov.parse_info(text)
    assert db.total == 4
    assert db.covered_set == {"rtl/top.sv:3", "rtl/top.sv:5:0.2"}
    assert db.points["rtl/top.sv:5:0.1"].kind == "branch"


def test_mock_result_format(tmp_path):
    path = tmp_path / "r.json"
    path.write_text(json.dumps({"points": [{"id": "p", "kind": "functional", "hits": 2}], "provenance": [[1, 1]]}))
    db = cov.parse(path)
    assert db.covered_set == {"p"} and db.provenance == ((1, 1),)


def test_parse_rejects_unknown_format(tmp_path):
    path = tmp_path / "a.covdb"
    path.write_text("")
    with pytest.raises(ValueError):
        cov.parse(path, "ucdb")


# -- merge --


def test_merge_identity_with_empty():
    db = db_of("abc", "a", provenance=[(1, 1)])
    assert cov.merge(db, CoverageDatabase()).points == db.points
    assert cov.merge(CoverageDatabase(), db).points == db.points


def test_three_seeds_union():
    seeds = [db_of("ABC", "A"), db_of("ABC", "B"), db_of("ABC", "A")]
    merged = cov.merge_all(seeds)
    assert merged.covered_set == {"A", "B"}
    assert round(merged.percentage, 1) == 66.7


def test_iteration_then_cumulative_equals_one_shot():
    universe = [f"p{i}" for i in range(8)]
    hit_sets = [{"p0"}, {"p1", "p2"}, set(), {"p0", "p3"}, {"p4"}, {"p5"}, {"p5"}, set(), {"p6"}, {"p1"}]
    dbs = [db_of(universe, h) for h in hit_sets]
    it1, it2 = cov.merge_all(dbs[:5]), cov.merge_all(dbs[5:])
    staged = cov.merge(it1, it2)
    oracle = set().union(*hit_sets)
    assert staged.covered_set == oracle == cov.merge_all(dbs).covered_set


def test_universe_mismatch_lists_symmetric_difference():
    with pytest.raises(cov.MergeError) as err:
        cov.merge(db_of("ab", ""), db_of("bc", ""))
    assert err.value.only_left == ["a"] and err.value.only_right == ["c"]


def test_merge_sums_hits_and_concatenates_provenance():
    a = CoverageDatabase.from_points([CoveragePoint("x", "line", 2)], [(1, 1)])
    b = CoverageDatabase.from_points([CoveragePoint("x", "line", 3)], [(1, 2)])
    m = cov.merge(a, b)
    assert m.points["x"].hits == 5 and m.provenance == ((1, 1), (1, 2))


UNIVERSE = [f"u{i}" for i in range(12)]
subsets = st.sets(st.sampled_from(UNIVERSE))


@given(subsets, subsets, subsets)
def test_merge_union_properties(a, b, c):
    da, db, dc = db_of(UNIVERSE, a), db_of(UNIVERSE, b), db_of(UNIVERSE, c)
    ab = cov.merge(da, db)
    assert ab.covered_set == a | b
    assert ab.covered_set == cov.merge(db, da).covered_set
    assert cov.merge(ab, dc).covered_set == cov.merge(da, cov.merge(db, dc)).covered_set
    assert ab.percentage >= max(da.percentage, db.percentage)
    assert cov.merge(da, da).percentage == da.percentage


@given(st.lists(st.tuples(st.sampled_from(cov.KINDS), st.integers(0, 50)), max_size=20))
def test_dumps_parse_round_trip(entries):
    db = CoverageDatabase.from_points(CoveragePoint(f"g.p{i}", k, h) for i, (k, h) in enumerate(entries))
    assert cov.parse_canonical(cov.dumps(db)) == db


# -- feedback --


def test_feedback_at_full_coverage():
    text = cov.feedback(db_of("ab", "ab"))
    assert "Coverage target reached" in text
    assert "[" not in text


def test_feedback_orders_larger_group_first():
    universe = [f"big.p{i}" for i in range(5)] + [f"small.p{i}" for i in range(3)]
    text = cov.feedback(db_of(universe, ()))
    assert text.index("[big] 5 uncovered") < text.index("[small] 3 uncovered")


def test_feedback_limit_marker():
    text = cov.feedback(db_of([f"g.p{i}" for i in range(5)], ()), limit=2)
    assert text.count("  - ") == 2
    assert "+3 more" in text


def test_feedback_source_annotation():
    db = db_of(["top.sv:2", "top.sv:9", "ctl.x"], ())
    text = cov.feedback(db, {"top.sv": ["a", "  assign y = b;"], "ctl.x": "x == 1"})
    assert "assign y = b;" in text
    assert "<source unavailable>" in text
    assert "x == 1" in text


def test_feedback_rejects_empty_database():
    with pytest.raises(ValueError):
        cov.feedback(CoverageDatabase())


def test_points_within_group_sorted_by_location():
    db = db_of(["f.sv:10", "f.sv:2", "f.sv:33"], ())
    ((name, pts),) = cov.uncovered_groups(db)
    assert name == "f.sv"
    assert [p.id for p in pts] == ["f.sv:2", "f.sv:10", "f.sv:33"]


def test_summary_fields():
    text = cov.summary(db_of("abcd", "a"))
    assert "points: 4" in text and "covered: 1" in text and "percentage: 25.00" in text
