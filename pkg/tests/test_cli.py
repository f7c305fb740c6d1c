import csv
import io
import json

import pytest
from click.testing import CliRunner
from conftest import TWO_WRITES, INCREMENT

from flashvm.air import parse_program, print_program
from flashvm.cli import (COLUMNS, CORPUS, ExperimentSpec, PipelineError, corpus_program, emit_report, main,
                         run_experiment_matrix, run_pipeline)

RECURSIVE = "func main() {\nentry:\n  call main\n  halt\n}\n"


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def files(tmp_path):
    def write(name, text):
        path = tmp_path / name
        path.write_text(text)
        return str(path)
    return write


def test_transform_to_stdout(runner, files):
    res = runner.invoke(main, ["transform", files("f.air", TWO_WRITES), "--placement", "manual"])
    assert res.exit_code == 0, res.output
    p = parse_program(res.output)
    assert all(i.target != "unassigned" for i in p.mem_instrs())


def test_transform_writes_report_and_layout(runner, files, tmp_path):
    src = files("c.air", print_program(corpus_program("crc16")))
    out, rep, lay = tmp_path / "o.air", tmp_path / "r.json", tmp_path / "l.txt"
    res = runner.invoke(main, ["transform", src, "-o", str(out), "--report", str(rep), "--layout-map", str(lay)])
    assert res.exit_code == 0, res.output
    assert parse_program(out.read_text()).functions
    assert "versioning" in json.loads(rep.read_text())
    assert lay.read_text().startswith("# delta")


@pytest.mark.parametrize("args", [["--placement", "sideways"], ["--model", "nosuch"]])
def test_transform_config_errors(runner, files, args):
    res = runner.invoke(main, ["transform", files("f.air", TWO_WRITES), *args])
    assert res.exit_code == 2


def test_transform_reports_failing_stage(runner, files):
    res = runner.invoke(main, ["transform", files("r.air", RECURSIVE)])
    assert res.exit_code == 2
    assert "stage" in res.output


def test_parse_error_exit_code(runner, files):
    assert runner.invoke(main, ["transform", files("bad.air", "func {")]).exit_code == 2


def test_pipeline_error_names_stage():
    with pytest.raises(PipelineError) as ei:
        run_pipeline(RECURSIVE)
    assert ei.value.stage in ("placement", "boundaries", "intervals", "tags")


def test_run_continuous_and_intermittent(runner, files, tmp_path):
    r = run_pipeline(INCREMENT, None)
    src = files("t.air", print_program(r.program))
    res = runner.invoke(main, ["run", src])
    assert res.exit_code == 0
    assert json.loads(res.output)["globals"]["a"] == [1]
    trace = tmp_path / "t.jsonl"
    res = runner.invoke(main, ["run", src, "--intermittent", "--profile", "min", "--trace", str(trace)])
    assert res.exit_code == 0
    assert trace.read_text().count("\n") > 0


def test_run_livelock_exit_code(runner, files):
    r = run_pipeline(corpus_program("crc16"), "loop-latch")
    src = files("c.air", print_program(r.program))
    sched = files("s.json", json.dumps({"mode": "energy", "mean": 20, "jitter": 0.1}))
    res = runner.invoke(main, ["run", src, "--intermittent", "--schedule", sched])
    assert res.exit_code == 3
    assert json.loads(res.output)["metrics"]["status"] == "livelock"


def test_run_bad_schedule(runner, files):
    src = files("f.air", TWO_WRITES)
    sched = files("s.json", json.dumps({"mode": "joules"}))
    assert runner.invoke(main, ["run", src, "--intermittent", "--schedule", sched]).exit_code == 2


def test_bench(runner, files, tmp_path):
    spec = files("spec.json", json.dumps({"program": "fft8", "arms": ["flashvm", "nonvolatile-ll-execute"],
                                          "schedule": {"profile": "min"}, "seeds": 2}))
    res = runner.invoke(main, ["bench", "--spec", spec, "-o", str(tmp_path / "out")])
    assert res.exit_code == 0, res.output
    rows = list(csv.DictReader((tmp_path / "out" / "results.csv").open()))
    assert len(rows) == 4 and all(r["equivalent"] == "True" for r in rows)
    assert "fft8" in (tmp_path / "out" / "summary.txt").read_text()


@pytest.mark.parametrize("doc", [{"program": "fft8", "arms": ["volatile-zz-probe"]},
                                 {"program": "fft8", "models": ["nope"]},
                                 {"program": "fft8", "colour": 1}])
def test_bench_config_errors(runner, files, doc):
    assert runner.invoke(main, ["bench", "--spec", files("s.json", json.dumps(doc))]).exit_code == 2


def test_empty_report_has_header():
    texts = emit_report([])
    assert texts["results.csv"].strip() == ",".join(COLUMNS)
    assert json.loads(texts["results.json"]) == []


def test_promotion_only_for_flashvm():
    rows = run_experiment_matrix(ExperimentSpec("crc16", arms=["flashvm", "volatile-ll-probe"], seeds=[0]))
    by = {r["arm"]: r for r in rows}
    assert 0 < by["flashvm"]["promotion_pct"] <= 100
    assert by["volatile-ll-probe"]["promotion_pct"] == ""
    parsed = list(csv.DictReader(io.StringIO(emit_report(rows)["results.csv"])))
    assert parsed[1]["promotion_pct"] == ""


def test_arms_share_seeds():
    rows = run_experiment_matrix(ExperimentSpec("feistel", arms=["flashvm", "nonvolatile-ll-execute"],
                                                schedule={"profile": "min"}, seeds=[3, 5]))
    assert [r["seed"] for r in rows] == [3, 5, 3, 5]


def test_unknown_arm_is_an_error_row():
    rows = run_experiment_matrix(ExperimentSpec("fft8", arms=["flashvm-xx"], seeds=[0]))
    assert rows[0]["status"].startswith("error")


@pytest.mark.parametrize("name", CORPUS)
def test_pipeline_is_a_fixed_point(name):
    once = print_program(run_pipeline(corpus_program(name)).program)
    twice = print_program(run_pipeline(parse_program(once), None).program)
    assert once == twice


def test_version_flag(runner):
    assert runner.invoke(main, ["--version"]).exit_code == 0
