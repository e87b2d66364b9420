import numpy as np
import pytest

from itots import cli, config
from itots.sdesim import read_scenario_csv
from itots.stability import read_sweep_csv
from itots.synthesis import read_trace_csv


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def analyzed(tmp_path_factory):
    out = tmp_path_factory.mktemp("analyze")
    assert run("analyze", "--config", "example1", "--out", out) == 0
    return out


@pytest.fixture(scope="module")
def synthesized(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert run("synthesize", "--config", "example2", "--out", out) == 0
    return out


def test_analyze_feasible(analyzed):
    report = config.load(analyzed / "report.txt")
    assert report.get("analysis", "status") == "Optimal"
    assert report.get("verification", "generator") == "pass"
    assert report.get("verification", "hessian_bound") == "pass"
    assert report.number("analysis", "a") == -1.0
    assert (analyzed / "certificate.txt").exists()
    assert (analyzed / "samples.csv").read_text().startswith("x_1,x_2,V,LV_bound")


def test_analyze_corollary_infeasible_point(tmp_path):
    code = run("analyze", "--config", "example1", "--method", "corollary1",
               "--param", "a=-0.5", "--param", "b=-0.5", "--out", tmp_path)
    assert code == 2
    assert config.load(tmp_path / "report.txt").get("analysis", "status") == "Infeasible"
    assert not (tmp_path / "certificate.txt").exists()


def test_malformed_matrix_row(tmp_path, capsys):
    from importlib import resources
    body = resources.files("itots.data").joinpath("example1.cfg").read_text()
    bad = tmp_path / "bad.cfg"
    bad.write_text(body.replace("A 2 = [[-0.8, 1], [0, -1]]", "A 2 = [[-0.8, 1], [0]]"))
    assert run("analyze", "--config", bad, "--out", tmp_path) == 1
    err = capsys.readouterr().err
    line = body.splitlines().index("A 2 = [[-0.8, 1], [0, -1]]") + 1
    assert f"bad.cfg:{line}:" in err and "A 2" in err


def test_bad_param_flag(tmp_path):
    assert run("analyze", "--config", "example1", "--param", "a", "--out", tmp_path) == 1


def test_verify_fresh_certificate(analyzed, tmp_path):
    code = run("verify", "--config", "example1", "--certificate", analyzed / "certificate.txt",
               "--samples", 2000, "--out", tmp_path)
    assert code == 0
    rep = config.load(tmp_path / "verify.txt")
    for suite in ("path_independence", "gradient", "hessian", "hessian_bound", "generator"):
        assert rep.get("verify", suite) == "pass"
    assert rep.get("verify", "first_failure") == "none"


def test_verify_zeroed_d(analyzed, tmp_path, capsys):
    text = (analyzed / "certificate.txt").read_text().splitlines()
    text = [("D = [[0.0, 0.0], [0.0, 0.0]]" if ln.startswith("D = ") else ln) for ln in text]
    cert = tmp_path / "zero.txt"
    cert.write_text("\n".join(text) + "\n")
    code = run("verify", "--config", "example1", "--certificate", cert, "--samples", 500,
               "--out", tmp_path)
    assert code == 2
    rep = config.load(tmp_path / "verify.txt")
    assert rep.get("verify", "hessian_bound").startswith("precondition violated")
    assert rep.get("verify", "first_failure") == "hessian_bound"
    assert "hessian_bound" in capsys.readouterr().out


def test_verify_constant_p(tmp_path):
    assert run("analyze", "--config", "example1", "--method", "corollary1", "--out", tmp_path) == 0
    code = run("verify", "--config", "example1", "--certificate", tmp_path / "certificate.txt",
               "--samples", 500, "--out", tmp_path)
    assert code == 0
    rep = config.load(tmp_path / "verify.txt")
    assert rep.get("verify", "quadratic") == "pass"
    assert rep.number("verify", "quadratic_max_abs") <= 1e-10


def test_verify_needs_certificate(tmp_path):
    assert run("verify", "--config", "example1", "--out", tmp_path) == 1
    assert run("verify", "--config", "example1", "--certificate", tmp_path / "none.txt",
               "--out", tmp_path) == 1


def test_synthesize_outputs(synthesized):
    gains = config.read_gains(config.load(synthesized / "gains.txt"))
    assert len(gains) == 4 and all(K.shape == (1, 2) for K in gains)
    rows = read_trace_csv((synthesized / "trace.csv").read_text())
    assert abs(rows[-1].error) < 1e-4
    rep = config.load(synthesized / "report.txt")
    assert rep.get("synthesis", "status") == "Converged"
    assert rep.get("closed_loop", "feasible") == "true"
    assert rep.get("verification", "generator") == "pass"
    mats = config.load(synthesized / "synthesis.txt")
    assert config.matrix_entry(mats, "matrices", "Omega1").shape == (2, 2)


def test_synthesize_zero_iterations(tmp_path):
    assert run("synthesize", "--config", "example2", "--n-max", 0, "--out", tmp_path) == 2
    assert not (tmp_path / "gains.txt").exists()
    assert config.load(tmp_path / "report.txt").get("synthesis", "status") == "MaxIterations"


def test_synthesize_rejects_unforced_model(tmp_path):
    assert run("synthesize", "--config", "example1", "--out", tmp_path) == 1


def test_simulate_four_scenarios(synthesized, tmp_path):
    code = run("simulate", "--config", "example2", "--gains", synthesized / "gains.txt",
               "--out", tmp_path)
    assert code == 0
    for M in (2, 10, 30, 50):
        data = read_scenario_csv((tmp_path / f"ensemble_M{M}.csv").read_text())
        assert len(data["starts"]) == 4
        assert all(len(s["paths"]) == M and s["blowups"] == [] for s in data["starts"])
    summary = (tmp_path / "summary.csv").read_text().splitlines()
    assert summary[0] == "paths,start,blowups,mean_final_norm,median_final_norm"
    assert len(summary) == 17


def test_simulate_seed_repeat_is_byte_identical(synthesized, tmp_path):
    args = ["simulate", "--config", "example2", "--gains", synthesized / "gains.txt",
            "--paths", 3, "--seed", 77]
    assert run(*args, "--out", tmp_path / "a") == 0
    assert run(*args, "--out", tmp_path / "b") == 0
    assert (tmp_path / "a/ensemble_M3.csv").read_bytes() == (tmp_path / "b/ensemble_M3.csv").read_bytes()


def test_simulate_requires_gains(tmp_path, capsys):
    assert run("simulate", "--config", "example2", "--out", tmp_path) == 1
    assert "gains" in capsys.readouterr().err
    assert run("simulate", "--config", "example2", "--gains", tmp_path / "missing.txt",
               "--out", tmp_path) == 1


def test_open_loop_growth_and_blowup(tmp_path):
    # the unforced loop grows by orders of magnitude over the nominal horizon
    assert run("simulate", "--config", "example2", "--open-loop", "--x0", "[[12, 10]]",
               "--paths", 5, "--out", tmp_path / "short") == 0
    start = read_scenario_csv((tmp_path / "short/ensemble_M5.csv").read_text())["starts"][0]
    assert np.linalg.norm(start["mean"][-1, 1:]) > 100 * np.linalg.norm([12, 10])
    # and passes the blow-up threshold once the horizon is long enough
    code = run("simulate", "--config", "example2", "--open-loop", "--x0", "[[12, 10]]",
               "--paths", 5, "--horizon", 100, "--out", tmp_path / "long")
    assert code == 2
    start = read_scenario_csv((tmp_path / "long/ensemble_M5.csv").read_text())["starts"][0]
    assert start["blowups"] == [0, 1, 2, 3, 4]


def test_sweep_one_cell(tmp_path, capsys):
    from importlib import resources
    body = resources.files("itots.data").joinpath("example1.cfg").read_text()
    body = body.replace("a = -2.0 2.0 0.1", "a = -1.0 -1.0 0.1").replace(
        "b = -2.0 0.5 0.1", "b = -1.0 -1.0 0.1")
    cfg = tmp_path / "one.cfg"
    cfg.write_text(body)
    assert run("sweep", "--config", cfg, "--workers", 1, "--out", tmp_path) == 0
    cells = read_sweep_csv((tmp_path / "region.csv").read_text())
    assert cells == [(-1.0, -1.0, "F", "F")]
    assert "theorem1_F=1" in capsys.readouterr().out


def test_sweep_parameter_must_be_whole_entry(tmp_path):
    from importlib import resources
    body = resources.files("itots.data").joinpath("example1.cfg").read_text()
    cfg = tmp_path / "expr.cfg"
    cfg.write_text(body.replace("[[b, 1], [0, -0.4]]", "[[2*b, 1], [0, -0.4]]"))
    assert run("sweep", "--config", cfg, "--out", tmp_path) == 1


def test_sweep_needs_two_axes(tmp_path):
    cfg = tmp_path / "axes.cfg"
    from importlib import resources
    body = resources.files("itots.data").joinpath("example1.cfg").read_text()
    cfg.write_text(body.replace("b = -2.0 0.5 0.1\n", ""))
    assert run("sweep", "--config", cfg, "--out", tmp_path) == 1
