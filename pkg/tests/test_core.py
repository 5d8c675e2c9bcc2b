import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from march.core import (
    ABNORMALITIES,
    REGIONS,
    CaseDatabase,
    CaseRecord,
    RegionId,
    Report,
    load_database,
    parse_report,
    serialize_report,
    write_database,
)
from march.errors import DimensionMismatch, MalformedReport, SchemaError


def test_taxonomy_sizes():
    assert len(REGIONS) == 10
    assert len(ABNORMALITIES) == 18
    assert REGIONS[0] is RegionId.ABDOMEN
    assert REGIONS[-1].value == "trachea/bronchi"


def test_serialize_two_regions():
    report = Report({"abdomen": "Normal.", "bone": "Preserved heights."})
    assert serialize_report(report) == "The region 0 is abdomen: Normal. The region 1 is bone: Preserved heights."


def test_serialize_uses_canonical_order_not_insertion_order():
    report = Report({"lung": "Clear.", "abdomen": "Normal."})
    assert serialize_report(report) == "The region 0 is abdomen: Normal. The region 1 is lung: Clear."


def test_parse_unknown_region_rejected():
    with pytest.raises(MalformedReport):
        parse_report("The region 0 is spleen: X.")


def test_parse_rejects_leading_prose():
    with pytest.raises(MalformedReport):
        parse_report("Here you go: The region 0 is lung: Clear.")


def test_parse_duplicate_region_rejected():
    with pytest.raises(MalformedReport):
        parse_report("The region 0 is lung: A. The region 1 is lung: B.")


def test_parse_empty_text_is_empty_report():
    assert parse_report("   ") == Report()


def test_parse_tolerates_renumbering():
    assert parse_report("The region 3 is heart: Normal size.") == Report({"heart": "Normal size."})


def test_report_rejects_empty_section():
    with pytest.raises(MalformedReport):
        Report({"lung": "  "})


def test_report_compares_with_plain_dicts():
    assert Report({"lung": "Clear."}) == {"lung": "Clear."}
    assert Report({"lung": "Clear."}) != {"lung": "Opaque."}


section_text = st.text(
    alphabet=st.characters(whitelist_categories=("Ll", "Lu", "Nd"), whitelist_characters=" .,-()%"),
    min_size=1,
    max_size=40,
).filter(lambda s: s.strip() and "region" not in s.lower())


@given(st.dictionaries(st.sampled_from([r.value for r in REGIONS]), section_text, min_size=1))
def test_parse_inverts_serialize(sections):
    report = Report(sections)
    assert parse_report(serialize_report(report)) == report


def _line(case_id, logits_len=18, dim=4, **extra):
    obj = {
        "case_id": case_id,
        "report": {"lung": "Clear."},
        "image_embedding": [1.0] * dim,
        "text_embedding": [0.5] * dim,
        "logits": [0.0] * logits_len,
    }
    obj.update(extra)
    return json.dumps(obj)


def test_load_database_reports_line_and_field(tmp_path):
    path = tmp_path / "db.jsonl"
    path.write_text(_line("a") + "\n" + _line("b", logits_len=17) + "\n")
    with pytest.raises(SchemaError) as info:
        load_database(path)
    assert info.value.line == 2
    assert info.value.field == "logits"
    assert "line 2" in str(info.value)


def test_load_empty_file_gives_empty_database(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    db = load_database(path)
    assert len(db) == 0


def test_load_dimension_mismatch_names_line(tmp_path):
    path = tmp_path / "db.jsonl"
    path.write_text(_line("a", dim=4) + "\n\n" + _line("b", dim=5) + "\n")
    with pytest.raises(DimensionMismatch, match="line 3"):
        load_database(path)


def test_load_duplicate_case_id(tmp_path):
    path = tmp_path / "db.jsonl"
    path.write_text(_line("a") + "\n" + _line("a") + "\n")
    with pytest.raises(SchemaError) as info:
        load_database(path)
    assert info.value.line == 2 and info.value.field == "case_id"


def test_load_missing_report(tmp_path):
    path = tmp_path / "db.jsonl"
    path.write_text(json.dumps({"case_id": "a"}) + "\n")
    with pytest.raises(SchemaError) as info:
        load_database(path)
    assert info.value.field == "report"


def test_database_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    cases = [
        CaseRecord(
            f"c{i}",
            Report({"lung": f"Text {i}."}),
            image_embedding=rng.normal(size=6),
            text_embedding=rng.normal(size=6),
            logits=rng.normal(size=18) if i % 2 else None,
            draft=Report({"heart": "Draft."}) if i == 0 else None,
        )
        for i in range(5)
    ]
    path = tmp_path / "db.jsonl"
    write_database(cases, path)
    db = load_database(path)
    assert db.case_ids == [c.case_id for c in cases]
    assert db.d_img == 6 and db.d_txt == 6
    for original, loaded in zip(cases, db):
        assert loaded.report == original.report
        assert loaded.draft == original.draft
        np.testing.assert_array_equal(loaded.image_embedding, original.image_embedding)
        if original.logits is None:
            assert loaded.logits is None
        else:
            np.testing.assert_array_equal(loaded.logits, original.logits)


def test_case_record_rejects_wrong_logit_length():
    with pytest.raises(DimensionMismatch):
        CaseRecord("a", Report(), logits=np.zeros(17))


def test_case_vectors_are_read_only():
    case = CaseRecord("a", Report(), image_embedding=[1.0, 2.0])
    with pytest.raises(ValueError):
        case.image_embedding[0] = 5.0


def test_database_rejects_duplicates():
    with pytest.raises(ValueError):
        CaseDatabase((CaseRecord("a", Report()), CaseRecord("a", Report())))
