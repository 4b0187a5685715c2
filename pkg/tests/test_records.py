import json
import warnings

import pytest
from hypothesis import given, strategies as st

from loocite.records import (DatasetError, DuplicateSourceWarning, RunResult, example_to_record, load_dataset,
                             parse_record, read_results, write_results)


def write_lines(path, lines):
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return path


def test_parse_example_record(tmp_path):
    p = write_lines(tmp_path / "d.jsonl", ['{"id":"e1","query":"q","context":[["a","b"],["c"]]}'])
    (ex,) = load_dataset(p)
    assert ex.id == "e1" and len(ex.partition.groups) == 2 and ex.partition.sources == ("a", "b", "c")
    assert ex.response is None


def test_empty_file(tmp_path):
    p = tmp_path / "empty.jsonl"
    p.write_text("")
    assert load_dataset(p) == []


def test_duplicate_source_warns_and_keeps(tmp_path):
    p = write_lines(tmp_path / "d.jsonl", ['{"id":"e1","query":"q","context":[["a","b"],["a"]]}'])
    with pytest.warns(DuplicateSourceWarning):
        (ex,) = load_dataset(p)
    assert len(ex.partition.sources) == 3


@pytest.mark.parametrize("line,msg", [
    ("{not json", "malformed"),
    ('{"id":"x","query":"q"}', "context"),
    ('{"id":"x","query":"q","context":[]}', "context"),
    ('{"id":"x","query":"q","context":[[]]}', ""),
    ('{"id":"x","query":"q","context":[[""]]}', ""),
    ('{"id":"x","query":"q","context":[["a"]],"response":5}', "response"),
    ('[1,2]', "object"),
])
def test_malformed_lines_report_line_number(tmp_path, line, msg):
    p = write_lines(tmp_path / "d.jsonl", ['{"id":"ok","query":"q","context":[["a"]]}', "", line])
    with pytest.raises(DatasetError, match=r":3:") as err:
        load_dataset(p)
    assert msg in str(err.value)


def test_duplicate_ids(tmp_path):
    rec = '{"id":"e","query":"q","context":[["a"]]}'
    with pytest.raises(DatasetError, match="duplicate"):
        load_dataset(write_lines(tmp_path / "d.jsonl", [rec, rec]))


def test_record_round_trip():
    rec = {"id": "z", "query": "why?", "context": [["s1", "s2"], ["s3"]], "response": "because"}
    assert example_to_record(parse_record(rec)) == rec


finite = st.floats(allow_nan=False, allow_infinity=False)
results = st.builds(
    RunResult, id=st.text(min_size=1, max_size=8), method=st.sampled_from(["loo", "kv", "hier"]),
    params=st.dictionaries(st.text(max_size=5), finite, max_size=3), scores=st.lists(finite, max_size=6),
    cost=st.just({"stages": []}), counted_flops=finite, theoretical_flops=st.none() | finite,
    outliers=st.none() | st.lists(st.integers(0, 5), max_size=3), response=st.text(max_size=10),
    response_tokens=st.lists(st.integers(0, 255), max_size=5), seed=st.integers(0, 2**31),
    models=st.just({"target": "m"}), meta=st.just({}))


@given(st.lists(results, max_size=4))
def test_results_round_trip(tmp_path_factory, rs):
    p = tmp_path_factory.mktemp("r") / "out.jsonl"
    write_results(p, rs)
    assert read_results(p) == rs


def test_bad_result_line(tmp_path):
    p = write_lines(tmp_path / "r.jsonl", [json.dumps({"id": "x"})])
    with pytest.raises(DatasetError, match=":1:"):
        read_results(p)
