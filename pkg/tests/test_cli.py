import numpy as np
import pytest

from glmfe import trade
from glmfe.cli import EXIT_INPUT, EXIT_NUMERIC, EXIT_OK, main, read_config, InputError


def run(argv, capsys):
    code = main(argv)
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def flows_file(tmp_path):
    path = tmp_path / "flows.csv"
    trade.write_flows(path, trade.synthetic_gravity(n_countries=12, n_years=8, seed=3))
    return path


def test_zeros_writes_binary_panel(flows_file, capsys):
    code, out, _ = run(["zeros", str(flows_file), "--x", "tariff", "--x", "fta:binary"], capsys)
    assert code == EXIT_OK
    lines = out.splitlines()
    assert lines[0] == "exporter\timporter\tyear\ty\ttariff\tfta"
    assert {ln.split("\t")[3] for ln in lines[1:]} == {"0", "1"}


def test_fit_on_bundled_data(capsys):
    code, out, _ = run(["fit", "--synthetic", "--spec", "4"], capsys)
    assert code == EXIT_OK
    assert out.startswith("# spec=4 link=probit correction=abc")
    rows = [ln.split("\t") for ln in out.splitlines()[2:]]
    assert [r[1] for r in rows] == ["tariff", "fta"]
    assert all(r[5] for r in rows)


def test_missing_file_is_input_error(tmp_path, capsys):
    code, _, err = run(["fit", str(tmp_path / "nope.csv")], capsys)
    assert code == EXIT_INPUT
    assert "input error" in err


def test_bad_column_is_input_error(flows_file, capsys):
    code, _, err = run(["zeros", str(flows_file), "--x", "distance"], capsys)
    assert code == EXIT_INPUT
    assert "distance" in err


def test_unknown_flag_is_input_error(capsys):
    assert run(["fit", "--synthetic", "--spec", "9"], capsys)[0] == EXIT_INPUT
    assert run(["frobnicate"], capsys)[0] == EXIT_INPUT


def test_help_exits_ok(capsys):
    assert run(["--help"], capsys)[0] == EXIT_OK


def test_collinear_regressor_is_numerical_failure(tmp_path, capsys):
    # a pair-constant regressor is absorbed by the pair fixed effects
    flows = trade.synthetic_gravity(n_countries=12, n_years=8, seed=3)
    flows = [trade.FlowRecord(f.exporter, f.importer, f.year, f.value,
                              {"tariff": f.x["tariff"], "dist": float(len(f.exporter + f.importer) + ord(f.importer[-1]))})
             for f in flows]
    path = tmp_path / "flows.csv"
    trade.write_flows(path, flows)
    code, _, err = run(["fit", str(path), "--x", "tariff", "--x", "dist", "--spec", "4"], capsys)
    assert code == EXIT_NUMERIC
    assert "numerical failure" in err and "dist" in err


def test_config_values_and_flag_precedence(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# defaults\nspec = 2\nlink = logit\ncorrection = none\n")
    code, out, _ = run(["fit", "--synthetic", "--config", str(cfg)], capsys)
    assert code == EXIT_OK
    assert out.startswith("# spec=2 link=logit correction=none")
    code, out, _ = run(["fit", "--synthetic", "--config", str(cfg), "--link", "probit"], capsys)
    assert out.startswith("# spec=2 link=probit correction=none")


def test_config_errors(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("colour = blue\n")
    assert run(["fit", "--synthetic", "--config", str(cfg)], capsys)[0] == EXIT_INPUT
    cfg.write_text("spec = 9\n")
    assert run(["fit", "--synthetic", "--config", str(cfg)], capsys)[0] == EXIT_INPUT
    cfg.write_text("spec\n")
    with pytest.raises(InputError):
        read_config(cfg)


def test_out_file_matches_stdout(tmp_path, capsys):
    target = tmp_path / "res.csv"
    code, out, _ = run(["transitions", "--synthetic", "--format", "csv"], capsys)
    assert code == EXIT_OK
    assert run(["transitions", "--synthetic", "--format", "csv", "--out", str(target)], capsys)[1] == ""
    assert target.read_text() == out
    probs = np.array([[float(v) for v in ln.split(",")[1:3]] for ln in out.splitlines()[1:]])
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=2e-6)


def test_predict_and_percentiles(capsys):
    code, out, _ = run(["predict", "--synthetic", "--correction", "none"], capsys)
    assert code == EXIT_OK
    acc = {ln.split("\t")[0]: float(ln.split("\t")[1]) for ln in out.splitlines()[2:]}
    assert acc["spec"] > acc["naive"]
    code, out, _ = run(["percentiles", "--synthetic", "--potential", "tariff", "--bins", "10",
                        "--in-year", "2005"], capsys)
    assert code == EXIT_OK
    assert len(out.splitlines()) == 11
    assert run(["percentiles", "--synthetic", "--potential", "gdp"], capsys)[0] == EXIT_INPUT


def test_wald_and_neyman(capsys):
    code, out, _ = run(["wald", "--synthetic", "--spec", "4", "--split", "T"], capsys)
    assert code == EXIT_OK
    split, stat, df, p = out.splitlines()[1].split("\t")
    assert split == "T" and int(df) == 2 and 0.0 <= float(p) <= 1.0
    code, out, _ = run(["neyman"], capsys)
    assert out.splitlines()[1] == "10\t10\t-0.271\t-0.052\t-0.028"


def test_mc_output_independent_of_threads(monkeypatch, capsys):
    argv = ["mc", "--N", "12", "--T", "5", "--R", "4", "--estimators", "MLE", "ABC1", "--seed", "9"]
    outs = []
    for threads in ("1", "3"):
        code, out, _ = run(argv + ["--threads", threads], capsys)
        assert code == EXIT_OK
        outs.append(out)
    monkeypatch.setenv("GLMFE_THREADS", "2")
    outs.append(run(argv, capsys)[1])
    assert outs[0] == outs[1] == outs[2]
    monkeypatch.setenv("GLMFE_THREADS", "zero")
    assert run(argv, capsys)[0] == EXIT_INPUT
