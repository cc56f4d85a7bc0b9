import inspect
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from o2hopf import cli, model_pde, reduction, spectral
from o2hopf.config import (
    ContourConfig,
    RunConfig,
    ToleranceConfig,
    dump_config,
    load_config,
    parse_config,
    save_config,
)
from o2hopf.errors import InvalidInput, IoError, ParseError
from o2hopf.io import read_csv, write_csv, write_outputs


# --- configuration


def test_default_config_round_trip_is_byte_identical(tmp_path):
    text = dump_config(RunConfig())
    assert dump_config(parse_config(text)) == text
    save_config(RunConfig(), tmp_path / "c.yaml")
    assert load_config(tmp_path / "c.yaml") == RunConfig()


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1, 1, allow_nan=False).filter(lambda x: x != 0), max_size=6),
       st.integers(64, 400), st.floats(1e-14, 1e-2), st.sampled_from(["M0", "M1"]),
       st.lists(st.sampled_from(["circle", "rectangle"]), max_size=3))
def test_config_round_trip_random(values, n1, tol, model, shapes):
    c = RunConfig()
    c.eps.values = values
    c.grid.N1 = n1
    c.tolerances.picard = tol
    c.model.id = model
    c.model.params = {"nu": 1.5, "eta1": [0.5, 0.2]}
    c.evans.contours = [ContourConfig(shape=s, bounds=[0.0, 1.0, -1.0, 1.0]) for s in shapes]
    back = parse_config(dump_config(c))
    assert back == c
    assert dump_config(back) == dump_config(c)


def test_unknown_key_rejected_with_position():
    with pytest.raises(ParseError) as info:
        parse_config("grid:\n  L: 10.0\n  spacing: 2\n")
    assert info.value.key == "grid.spacing"
    assert (info.value.line, info.value.column) == (3, 3)
    assert "grid.spacing" in str(info.value)


def test_type_errors_rejected():
    with pytest.raises(ParseError, match="grid.N1 must be an integer"):
        parse_config("grid:\n  N1: 12.5\n")
    with pytest.raises(ParseError, match="eps.values must be a list"):
        parse_config("eps:\n  values: 0.1\n")
    with pytest.raises(ParseError):
        parse_config("grid: [1, 2\n")


def test_empty_document_gives_defaults():
    assert parse_config("") == RunConfig()


def test_validation_rules():
    c = RunConfig()
    c.model.id = "M0"
    with pytest.raises(InvalidInput, match="eps.values is empty"):
        c.validate("bifurcate")
    c.eps.values = [0.01, 0.0]
    with pytest.raises(InvalidInput):
        c.validate("bifurcate")
    c = RunConfig()
    with pytest.raises(InvalidInput):
        c.validate("crossing")
    c.evans.contours = [ContourConfig(shape="triangle")]
    with pytest.raises(InvalidInput):
        c.validate()


# every tolerance that has a module default carries the same default in the config
_DEFAULTS = [
    ("profile", model_pde.solve_profile, "tol"),
    ("profile_endstate", model_pde.solve_profile, "endstate_tol"),
    ("profile_max_iter", model_pde.solve_profile, "max_iter"),
    ("eigen_residual", spectral.spectrum_in_region, "tol"),
    ("evans_root", spectral.evans_winding, "root_tol"),
    ("evans_max_points", spectral.evans_winding, "max_points"),
    ("evans_rtol", spectral.EvansFunction.__init__, "rtol"),
    ("evans_atol", spectral.EvansFunction.__init__, "atol"),
    ("crossing", spectral.find_crossing, "tol"),
    ("crossing_d_eps", spectral.find_crossing, "d_eps"),
    ("crossing_max_iter", spectral.find_crossing, "max_iter"),
    ("symmetry", spectral.verify_equivariance, "tol"),
    ("fit_sample_radius", reduction.fit_coefficients, "sample_radius"),
    ("fit_samples", reduction.fit_coefficients, "n_samples"),
    ("fit_spurious", reduction.fit_coefficients, "threshold"),
    ("fit_picard", reduction.fit_coefficients, "picard_tol"),
    ("fit_max_halvings", reduction.fit_coefficients, "max_halvings"),
    ("fit_quintic_limit", reduction.fit_coefficients, "quintic_limit"),
    ("newton", reduction.locate_periodic_orbits, "newton_tol"),
    ("newton_max_iter", reduction.locate_periodic_orbits, "max_iter"),
    ("newton_fd_step", reduction.locate_periodic_orbits, "fd_step"),
]


@pytest.mark.parametrize("name,func,param", _DEFAULTS, ids=[d[0] for d in _DEFAULTS])
def test_tolerance_defaults_match_modules(name, func, param):
    assert getattr(ToleranceConfig(), name) == inspect.signature(func).parameters[param].default


def test_setup_tolerance_defaults_match():
    fields = reduction.ReductionSetup.__dataclass_fields__
    t = ToleranceConfig()
    assert (t.picard, t.picard_max, t.null_tol, t.cond_max, t.smallness) == tuple(
        fields[k].default for k in ("picard_tol", "picard_max", "null_tol", "cond_max", "smallness"))


# --- file formats


def test_csv_complex_columns_round_trip(tmp_path):
    z = [1 + 2j, -0.5 + 1e-17j]
    write_csv(tmp_path / "t.csv", {"k": [0, 1], "lam": z, "r": [0.1, 0.2]})
    header = (tmp_path / "t.csv").read_text().splitlines()[0]
    assert header == "k,lam_re,lam_im,r"
    back = read_csv(tmp_path / "t.csv")
    assert np.array_equal(back["lam"], np.array(z))
    assert np.array_equal(back["k"], [0, 1])


def test_write_outputs_orbit_records(tmp_path):
    rec = {"eps": 0.01, "kind": "traveling1", "amplitude": 0.1, "mu": 1e-3, "T": 6.3, "converged": True,
           "return_residual": 1e-12, "traveling_speed": 1.0, "shift_residual": 1e-12, "a1": [0.1, 0.0],
           "a2": [0.0, 0.0]}
    summary = write_outputs([rec], tmp_path)
    assert summary["count"] == 1
    assert json.loads((tmp_path / "orbits.json").read_text())[0]["kind"] == "traveling1"
    back = read_csv(tmp_path / "orbits.csv")
    assert back["a1"][0] == 0.1 + 0j
    assert (tmp_path / "orbits.dat").read_text().startswith("# eps kind")


# --- commands


def _cfg(tmp_path, **kw):
    c = RunConfig()
    c.output_dir = str(tmp_path / "out")
    for k, v in kw.items():
        setattr(c, k, v)
    return c


def test_profile_command(tmp_path):
    res = cli.run("profile", _cfg(tmp_path))
    out = tmp_path / "out"
    assert res["residual"] <= 1e-10
    man = json.loads((out / "manifest.json").read_text())
    assert man["results"]["residual"] <= 1e-10
    assert man["files"] == ["profile.csv", "profile.dat"]
    assert man["tolerances"]["profile"] == 1e-10
    assert (out / "profile.csv").read_text().startswith("x,u1,u2\n")


def test_runs_are_deterministic(tmp_path):
    payloads = []
    for name in ("a", "b"):
        c = RunConfig()
        c.output_dir = str(tmp_path / name)
        cli.run("energy-check", c)
        man = json.loads((tmp_path / name / "manifest.json").read_text())
        man.pop("timestamp")
        man["config"].pop("output_dir")
        tables = [(tmp_path / name / f).read_bytes() for f in man["files"]]
        payloads.append((man, tables))
    assert payloads[0] == payloads[1]


def test_spectrum_empty_region(tmp_path):
    c = _cfg(tmp_path)
    c.spectrum.region = [5.0, 6.0, -1.0, 1.0]
    cli.run("spectrum", c)
    assert (tmp_path / "out" / "spectrum.csv").read_text() == "k,lambda_re,lambda_im,residual\n"


def test_main_exit_codes_and_error_json(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    c = RunConfig()
    c.model.id = "M0"
    c.output_dir = str(tmp_path / "out")
    save_config(c, cfg)
    assert cli.main(["bifurcate", "-c", str(cfg)]) == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "InvalidInput" and err["exit_code"] == 2
    # validation fails before any output is produced
    assert not (tmp_path / "out" / "manifest.json").exists()

    assert cli.main(["profile", "-c", str(tmp_path / "missing.yaml")]) == 4
    assert json.loads(capsys.readouterr().err)["error"] == "IoError"

    bad = tmp_path / "bad.yaml"
    bad.write_text("grid:\n  N2: 3\n")
    assert cli.main(["profile", "-c", str(bad)]) == 2
    err = json.loads(capsys.readouterr().err)
    assert err["key"] == "grid.N2" and err["line"] == 2


def test_numerical_failure_exit_code(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    c = RunConfig()
    c.model.id = "M0"
    c.grid.L, c.grid.N1 = 10.0, 64
    c.model.tune = False
    c.eps.crossing_interval = [-0.45, -0.4]
    c.output_dir = str(tmp_path / "out")
    save_config(c, cfg)
    assert cli.main(["crossing", "-c", str(cfg)]) == 3
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "NoCrossing"
    assert json.loads((tmp_path / "out" / "error.json").read_text())["exit_code"] == 3


def test_environment_overrides(tmp_path):
    env = {"O2HOPF_OUTPUT_DIR": str(tmp_path / "env"), "O2HOPF_THREADS": "3"}
    c = cli.resolve_config(RunConfig(), environ=env)
    assert c.output_dir == str(tmp_path / "env") and c.threads == 3
    c = cli.resolve_config(RunConfig(), output_dir="flag", environ=env)
    assert c.output_dir == "flag"
    with pytest.raises(InvalidInput):
        cli.resolve_config(RunConfig(), environ={"O2HOPF_THREADS": "many"})


def test_main_uses_environment(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("O2HOPF_OUTPUT_DIR", str(tmp_path / "envout"))
    assert cli.main(["profile"]) == 0
    assert (tmp_path / "envout" / "profile.csv").exists()
    assert json.loads(capsys.readouterr().out)["status"] == "ok"


def test_dump_config(capsys):
    assert cli.main(["dump-config"]) == 0
    assert parse_config(capsys.readouterr().out) == cli.resolve_config(RunConfig())


def test_selftest_command(tmp_path):
    res = cli.run("selftest", _cfg(tmp_path))
    assert res["relative_error"]["Lambda"] < 0.02
    assert res["relative_error"]["Gamma"] < 0.02
    assert res["spurious_ok"] and res["orbits_ok"]
    payload = json.loads((tmp_path / "out" / "selftest.json").read_text())
    assert payload["passed"]


def test_evans_command_counts_agree(tmp_path):
    c = _cfg(tmp_path)
    c.evans.L = 20.0
    c.evans.contours = [ContourConfig("circle", 0, [0.5, 0.0], 0.25, [], 16)]
    res = cli.run("evans", c)
    assert res["all_agree"]
    assert (tmp_path / "out" / "evans_contour0.csv").exists()
