import json
import os

import jsonschema
import pytest

from pqf_bench import __version__
from pqf_bench.cli import EXIT_ERROR, EXIT_FAILED, EXIT_OK, main
from pqf_bench.io import ingest_clicks, load_schema

SMALL = ["--n", "3", "--kprime", "120", "--kdoubleprime", "2", "--seed", "9"]


@pytest.fixture
def clicks(temp_dir) -> str:
    path = os.path.join(temp_dir.path, "clicks.txt")
    assert main(["-q", "simulate", *SMALL, "--output", path]) == EXIT_OK
    return path


def read_json(path: str):
    with open(path) as f:
        return json.load(f)


def test_help(capsys) -> None:
    assert main(["--help"]) == EXIT_OK
    assert "simulate" in capsys.readouterr().out
    assert main(["pqf", "--help"]) == EXIT_OK


def test_version(capsys) -> None:
    assert main(["--version"]) == EXIT_OK
    assert capsys.readouterr().out.strip() == __version__


@pytest.mark.parametrize(
    "argv",
    (
        [],
        ["simulate", "--bogus"],
        ["simulate", "--n", "3"],
        ["route", "0x1"],
        ["compare", "--n", "3", "--species", "ideal,bosons"],
        ["-v", "-q", "lemma", "--n", "3", "--x", "0.5"],
    ),
)
def test_usage_errors(argv, capsys) -> None:
    assert main(argv) == EXIT_ERROR
    assert capsys.readouterr().err


def test_simulate(temp_dir, clicks) -> None:
    data = ingest_clicks(clicks)
    assert (data.n, data.m) == (3, 16)
    assert [len(batch) for batch in data.batches] == [120, 120]
    assert data.header["device"]["species"] == "ideal"
    assert data.header["plan"]["runs"] == 120

    again = os.path.join(temp_dir.path, "again.txt")
    assert main(["-q", "simulate", *SMALL, "--output", again, "--inline-unitaries"]) == EXIT_OK
    replay = ingest_clicks(again)
    assert replay.unitaries == data.unitaries
    with open(clicks) as f, open(again) as g:
        assert f.read().splitlines()[1:] == g.read().splitlines()[1:]


def test_simulate__dad_matched(temp_dir) -> None:
    path = os.path.join(temp_dir.path, "dad.txt")
    argv = ["-q", "simulate", *SMALL, "--species", "dad", "--dad-matched", "--output", path]
    assert main(argv) == EXIT_OK
    header = ingest_clicks(path).header
    assert header["device"]["species"] == "dad"
    assert header["plan"]["dad_matched"] is True
    assert header["plan"]["dad_alpha"] is None


def test_simulate__deterministic(temp_dir, clicks) -> None:
    path = os.path.join(temp_dir.path, "second.txt")
    assert main(["-q", "simulate", *SMALL, "--output", path]) == EXIT_OK
    with open(clicks, "rb") as f, open(path, "rb") as g:
        first, second = f.read(), g.read()
    assert first.split(b"\n", 1)[1] == second.split(b"\n", 1)[1]


def test_test(temp_dir, clicks) -> None:
    report = os.path.join(temp_dir.path, "report.json")
    assert main(["-q", "test", clicks, "--output", report]) == EXIT_OK
    document = read_json(report)
    jsonschema.validate(document, load_schema("report"))
    attributes = document["data"]["attributes"]
    assert document["data"]["type"] == "campaigns"
    assert attributes["reference"] == "oracle"
    assert attributes["created"] is None
    assert attributes["plan"]["runs"] == 120
    assert len(document["included"]) == len(document["data"]["relationships"]["verdicts"]["data"])


def test_test__overrides(capsys, clicks) -> None:
    argv = ["-q", "test", clicks, "--reference", "formula", "--pooling", "entrywise"]
    assert main([*argv, "--timestamp"]) == EXIT_OK
    document = json.loads(capsys.readouterr().out)
    assert document["data"]["attributes"]["reference"] == "formula"
    assert document["data"]["attributes"]["plan"]["pooling"] == "entrywise"
    assert document["data"]["attributes"]["created"]


def test_test__strict(temp_dir) -> None:
    lossy = os.path.join(temp_dir.path, "lossy.txt")
    assert main(["-q", "simulate", *SMALL, "--loss", "0.8", "--output", lossy]) == EXIT_OK
    output = os.path.join(temp_dir.path, "report.json")
    assert main(["-q", "test", lossy, "--output", output]) == EXIT_OK
    assert main(["-q", "test", lossy, "--output", output, "--strict"]) == EXIT_FAILED
    verdicts = [resource for resource in read_json(output)["included"]]
    loss = [verdict for verdict in verdicts if verdict["id"] == "n3-t_loss"][0]
    assert not loss["attributes"]["passed"]


def test_test__missing_file(temp_dir, capsys) -> None:
    path = os.path.join(temp_dir.path, "absent.txt")
    assert main(["test", path]) == EXIT_ERROR
    assert capsys.readouterr().err.startswith("pqf-bench test: ")


def test_test__corrupt_file(temp_dir, clicks, capsys) -> None:
    with open(clicks, "a") as f:
        f.write("0 101\n")
    assert main(["test", clicks]) == EXIT_ERROR
    assert "line 242: " in capsys.readouterr().err


def test_pqf(temp_dir) -> None:
    output = os.path.join(temp_dir.path, "pqf.json")
    argv = ["-q", "pqf", "--schedule", "3,4", "--kprime", "100", "--kdoubleprime", "2"]
    assert main([*argv, "--output", output]) == EXIT_OK
    document = read_json(output)
    jsonschema.validate(document, load_schema("report"))
    assert document["data"]["type"] == "pqf-reports"
    assert sorted(document["data"]["attributes"]["per_n"]) == ["3", "4"]


def test_pqf__plans(temp_dir, capsys) -> None:
    plans = os.path.join(temp_dir.path, "plans.json")
    with open(plans, "w") as f:
        json.dump([{"n": 3, "runs": 100, "unitaries": 2, "noise": {"loss": 0.9}}], f)
    assert main(["-q", "pqf", "--plans", plans, "--strict"]) == EXIT_FAILED
    document = json.loads(capsys.readouterr().out)
    assert document["data"]["attributes"]["pqf"] is None
    assert document["data"]["attributes"]["reason"] == "no n passes every test"


def test_pqf__without_schedule(capsys) -> None:
    assert main(["pqf"]) == EXIT_ERROR
    assert "--schedule or --plans" in capsys.readouterr().err


def test_compare(capsys) -> None:
    argv = ["-q", "compare", *SMALL, "--species", "ideal,uniform"]
    assert main(argv) == EXIT_OK
    document = json.loads(capsys.readouterr().out)
    assert document["data"]["type"] == "species-comparisons"
    assert list(document["data"]["attributes"]["matrix"]) == ["ideal", "uniform"]


def test_route(capsys) -> None:
    assert main(["route", "00111"]) == EXIT_OK
    document = json.loads(capsys.readouterr().out)
    jsonschema.validate(document, load_schema("route"))
    assert document["m"] == 5
    assert document["target"] == [1, 1, 1, 0, 0]
    assert len(document["gadgets"]) == 6
    assert document["verified"]
    assert main(["route", "0,0,1,1,1"]) == EXIT_OK
    assert json.loads(capsys.readouterr().out) == document


def test_route__collisions(capsys) -> None:
    assert main(["route", "0,2,1"]) == EXIT_ERROR
    assert capsys.readouterr().err.startswith("pqf-bench route: ")


def test_plan_samples(capsys) -> None:
    argv = ["plan-samples", "--precision", "0.1", "--confidence", "0.9", "--variance-bound", "1"]
    assert main(argv) == EXIT_OK
    assert json.loads(capsys.readouterr().out) == {
        "precision": 0.1,
        "confidence": 0.9,
        "variance_bound": 1.0,
        "runs": 1000,
    }


def test_lemma(temp_dir) -> None:
    output = os.path.join(temp_dir.path, "lemma.json")
    assert main(["lemma", "--n", "3", "--x", "0.5", "--output", output]) == EXIT_OK
    document = read_json(output)
    assert document["exact"] == pytest.approx(1.875)
    assert document["kappa"] == pytest.approx(0.875)
    assert main(["lemma", "--n", "3", "--x", "1"]) == EXIT_ERROR


def test_logging(capsys, clicks) -> None:
    assert main(["test", clicks]) == EXIT_OK
    err = capsys.readouterr().err
    assert "INFO pqf_bench.engine: campaign n=3" in err
    assert main(["-q", "test", clicks]) == EXIT_OK
    assert "INFO" not in capsys.readouterr().err
