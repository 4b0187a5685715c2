import json

import pytest

from loocite.cli import main
from loocite.records import read_results
from loocite.runner import AttributeConfig, RunError, evaluate_results, run_attribute

pytestmark = pytest.mark.filterwarnings("ignore::loocite.records.DuplicateSourceWarning")

DATA = [
    {"id": "a", "query": "Which river?", "context": [["The river is wide.", "Stones sit here."], ["Lamps glow."]]},
    {"id": "b", "query": "What glows?", "context": [["Amber glows softly."], ["Cedar grows.", "North wind."]],
     "response": "Amber."},
    {"id": "c", "query": "Name one.", "context": [["Copper", "Quartz", "Ember", "Maple"]]},
]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "data.jsonl").write_text("".join(json.dumps(r) + "\n" for r in DATA))
    assert main(["gen-model", "--layers", "2", "--heads", "2", "--dmodel", "16", "--dff", "32",
                 "--seed", "3", "--max-seq", "512", "--out", str(d / "target.bin")]) == 0
    assert main(["gen-model", "--layers", "1", "--heads", "1", "--dmodel", "8", "--dff", "16",
                 "--seed", "4", "--max-seq", "512", "--out", str(d / "proxy.bin")]) == 0
    return d


def attribute(d, method, out, *extra):
    return main(["attribute", "--model", str(d / "target.bin"), "--method", method, "--dataset",
                 str(d / "data.jsonl"), "--out", str(out), "--max-new", "6", "--workers", "1", *extra])


def test_gen_model_output(workdir, capsys):
    assert main(["gen-model", "--out", str(workdir / "z.bin"), "--zero"]) == 0
    assert "parameters" in capsys.readouterr().out
    assert (workdir / "z.bin").read_bytes()[:5] == b"ABOT1"


def test_loo_and_kv_agree(workdir):
    assert attribute(workdir, "loo", workdir / "loo.jsonl") == 0
    assert attribute(workdir, "kv", workdir / "kv.jsonl") == 0
    loo, kv = read_results(workdir / "loo.jsonl"), read_results(workdir / "kv.jsonl")
    assert [r.id for r in loo] == ["a", "b", "c"]
    assert [len(r.scores) for r in loo] == [3, 3, 4]
    assert loo[1].response == "Amber." and loo[1].meta["decoding"] == "given"
    assert loo[0].meta["decoding"] == "greedy" and len(loo[0].response_tokens) == 6
    for a, b in zip(loo, kv):
        assert a.response_tokens == b.response_tokens
        assert max(abs(x - y) for x, y in zip(a.scores, b.scores)) <= 1e-4
        assert b.counted_flops < a.counted_flops
        assert a.outliers is not None


@pytest.mark.parametrize("method", ["hier", "attention", "gradnorm", "embedsim", "contextcite"])
def test_single_model_methods(workdir, method):
    out = workdir / f"{method}.jsonl"
    assert attribute(workdir, method, out, "--contextcite-n", "8") == 0
    rs = read_results(out)
    assert [len(r.scores) for r in rs] == [3, 3, 4]


@pytest.mark.parametrize("method", ["proxy", "prune"])
def test_proxy_methods(workdir, method):
    out = workdir / f"{method}.jsonl"
    assert attribute(workdir, method, out, "--proxy-model", str(workdir / "proxy.bin"), "--min-keep", "1") == 0
    rs = read_results(out)
    assert all(r.models["proxy_params"] < r.models["target_params"] for r in rs)
    assert attribute(workdir, method, out) == 2  # proxy missing


def test_pipeline_echoes_spec(workdir):
    spec = {"stages": ["kv", "proxy", "hier"], "beta": 0.5}
    (workdir / "spec.json").write_text(json.dumps(spec))
    out = workdir / "pipe.jsonl"
    assert attribute(workdir, "pipeline", out, "--pipeline", str(workdir / "spec.json"),
                     "--proxy-model", str(workdir / "proxy.bin")) == 0
    for r in read_results(out):
        assert r.params["spec"] == spec
        assert r.params["stages"] == ["kv", "proxy", "hierarchical"]


def test_unknown_method_rejected(workdir):
    with pytest.raises(SystemExit):
        attribute(workdir, "shapley", workdir / "x.jsonl")


def test_byte_identical_reruns(workdir):
    a, b = workdir / "r1.jsonl", workdir / "r2.jsonl"
    assert attribute(workdir, "contextcite", a, "--seed", "5", "--contextcite-n", "8") == 0
    assert attribute(workdir, "contextcite", b, "--seed", "5", "--contextcite-n", "8") == 0
    assert a.read_bytes() == b.read_bytes()
    assert (workdir / "r1.jsonl.meta.json").exists()


def test_parallel_matches_serial(workdir):
    serial, par = workdir / "s.jsonl", workdir / "p.jsonl"
    assert attribute(workdir, "kv", serial) == 0
    assert main(["attribute", "--model", str(workdir / "target.bin"), "--method", "kv", "--dataset",
                 str(workdir / "data.jsonl"), "--out", str(par), "--max-new", "6", "--workers", "2"]) == 0
    assert serial.read_bytes() == par.read_bytes()


def test_failure_handling(workdir):
    bad = workdir / "bad.jsonl"
    bad.write_text(json.dumps(DATA[0]) + "\n" + json.dumps({"id": "huge", "query": "q",
                                                            "context": [["x" * 600]]}) + "\n"
                   + json.dumps({**DATA[2]}) + "\n")
    out = workdir / "bad_out.jsonl"
    base = ["attribute", "--model", str(workdir / "target.bin"), "--method", "loo", "--dataset", str(bad),
            "--out", str(out), "--max-new", "4", "--workers", "1"]
    assert main(base) == 1
    assert [r.id for r in read_results(out)] == ["a"]
    assert main(base + ["--keep-going"]) == 0
    assert [r.id for r in read_results(out)] == ["a", "c"]
    meta = json.loads((workdir / "bad_out.jsonl.meta.json").read_text())
    assert meta["failures"][0]["id"] == "huge"


def test_evaluate_self_and_reversed(workdir, capsys):
    truth = workdir / "loo.jsonl"
    if not truth.exists():
        attribute(workdir, "loo", truth)
    rows = read_results(truth)
    # one example with a planted single outlier
    planted = rows[2]
    planted.scores = [9.0, 0.1, 0.0, -0.1]
    rev = [r.__class__(**{**r.to_dict(), "scores": [-s for s in r.scores]}) for r in [planted]]
    rep = evaluate_results([planted], [planted])
    assert rep["mAP"] == 1.0
    rep = evaluate_results([planted], rev)
    assert rep["mAP"] == pytest.approx(1 / 4)
    assert main(["evaluate", "--truth", str(truth), "--pred", str(truth), "--out", str(workdir / "rep.json")]) == 0
    text = capsys.readouterr().out
    assert "mAP" in text
    rep = json.loads((workdir / "rep.json").read_text())
    assert rep["mAP"] in (1.0, None)


def test_evaluate_id_mismatch(workdir):
    rows = read_results(workdir / "loo.jsonl")
    other = [r.__class__(**{**r.to_dict(), "id": "zz"}) for r in rows[:1]]
    with pytest.raises(RunError):
        evaluate_results(rows[:1], other)
    with pytest.raises(RunError):
        evaluate_results(rows[:1], rows[:1] + other)


def test_flops_command(capsys):
    assert main(["flops", "--method", "loo", "--P", "2", "--T", "3", "--C", "4"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["flops"] == 144 and out["speedup_over_loo"] == 1
    assert main(["flops", "--method", "hier", "--P", "1", "--T", "1", "--C", "8"]) == 2


def test_config_validation(tmp_path):
    with pytest.raises(RunError):
        run_attribute(AttributeConfig(model="m", method="prune", dataset="d", out=str(tmp_path / "o")))
