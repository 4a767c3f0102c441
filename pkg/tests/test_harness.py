from __future__ import annotations

import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stefan_lab.errors import ConfigurationError, NumericalError, RegimeError
from stefan_lab.harness import cli, scenarios
from stefan_lab.harness.config import (
    COMMANDS,
    SCHEMAS,
    ScenarioConfig,
    defaults,
    parse_config,
    serialize_config,
    with_overrides,
)
from stefan_lab.harness.outputs import SCHEMA_VERSION, OutputError, csv_text, write_outputs
from stefan_lab.harness.verify import registered

# --- config -----------------------------------------------------------------


def test_empty_pde_section_gives_defaults():
    cfg = parse_config("[run]\ncommand = pde\n[pde]\n")
    assert cfg.command == "pde"
    assert cfg.parameters == defaults("pde")


def test_missing_section_gives_defaults():
    assert parse_config("[run]\ncommand = ode\n").parameters == defaults("ode")


def test_negative_k_names_the_key():
    with pytest.raises(ConfigurationError, match=r"pde\.k"):
        parse_config("[run]\ncommand = pde\n[pde]\nk = -1\n")


def test_all_errors_reported_together():
    text = "[run]\ncommand = pde\ncolour = red\n[pde]\nk = -1\nb0 = abc\nbogus = 1\n[nope]\n"
    with pytest.raises(ConfigurationError) as info:
        parse_config(text)
    msg = str(info.value)
    for part in ("run.colour: unknown key", "pde.k:", "pde.b0: type mismatch",
                 "pde.bogus: unknown key", "nope: unknown section"):
        assert part in msg


def test_missing_command_is_required():
    with pytest.raises(ConfigurationError, match="run.command: missing"):
        parse_config("[run]\nseed = 3\n")


def test_unknown_command():
    with pytest.raises(ConfigurationError):
        ScenarioConfig("plot")


def test_malformed_text():
    with pytest.raises(ConfigurationError, match="malformed"):
        parse_config("no section header\n")


def test_other_sections_are_validated_too():
    with pytest.raises(ConfigurationError, match=r"spectrum\.K"):
        parse_config("[run]\ncommand = pde\n[spectrum]\nK = 0\n")


def test_overrides_accept_dashes():
    cfg = with_overrides(ScenarioConfig("pde", defaults("pde")),
                         {"grid-n": "600", "seed": "9", "output-dir": "x"})
    assert cfg.parameters["grid_n"] == 600
    assert cfg.seed == 9 and cfg.output_dir == "x"


def _value_for(p):
    if p.kind == "int":
        return st.just(p.default) if p.check is None else st.integers(1, 10**6).filter(p.check)
    if p.kind == "float":
        base = st.floats(1e-300, 1e300, allow_nan=False, allow_infinity=False)
        return base.filter(p.check) if p.check else base
    if p.kind == "bool":
        return st.booleans()
    if p.kind == "enum":
        return st.sampled_from(p.choices)
    if p.kind == "floats":
        return st.lists(st.floats(1e-12, 1.0), min_size=1, max_size=5).map(tuple)
    return st.lists(st.integers(0, 9), min_size=1, max_size=5).map(tuple)


@st.composite
def configs(draw):
    cmd = draw(st.sampled_from(COMMANDS))
    params = {k: draw(_value_for(p)) for k, p in SCHEMAS[cmd].items()}
    out = draw(st.text("abcxyz/_-0123456789", min_size=1, max_size=12).map(str.strip)
               .filter(bool))
    return ScenarioConfig(cmd, params, out, draw(st.integers(0, 2**63)))


@given(configs())
def test_config_round_trip(cfg):
    assert parse_config(serialize_config(cfg)) == cfg


# --- outputs ----------------------------------------------------------------


def test_empty_records_give_header_only(tmp_path):
    files = write_outputs([], ["a", "b"], tmp_path, "x")
    assert files["csv"].read_bytes() == b"a,b\r\n"
    assert json.loads(files["json"].read_text())["rows"] == 0


def test_nan_is_empty_and_flagged(tmp_path):
    files = write_outputs([{"a": 1.0, "b": math.nan}], ["a", "b"], tmp_path, "x")
    assert files["csv"].read_bytes().split(b"\r\n")[1] == b"1,"
    summ = json.loads(files["json"].read_text())
    assert summ["nan_cells"] == {"b": 1}
    assert "nan_policy" in summ


def test_schema_version_everywhere(tmp_path):
    files = write_outputs([{"a": 1}], ["a"], tmp_path, "x", {"extra": np.float64(2.5)})
    summ = json.loads(files["json"].read_text())
    assert summ["schema_version"] == SCHEMA_VERSION
    assert summ["extra"] == 2.5


def test_quoting_follows_csv_rules():
    text, _ = csv_text([{"a": 'say "hi", twice'}], ["a"])
    assert list(csv.reader(text.splitlines()))[1] == ['say "hi", twice']


def test_records_outside_schema_rejected():
    with pytest.raises(ConfigurationError):
        csv_text([{"a": 1, "z": 2}], ["a"])


@given(st.lists(st.floats(allow_nan=False, allow_infinity=False), min_size=1, max_size=20))
def test_floats_round_trip_exactly(xs):
    text, _ = csv_text([{"x": x} for x in xs], ["x"])
    back = [float(r[0]) for r in list(csv.reader(text.splitlines()))[1:]]
    assert back == xs


def test_io_error_names_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OutputError, match="file"):
        write_outputs([], ["a"], blocker / "sub", "x")


# --- run_scenario -----------------------------------------------------------


def _spectrum_cfg(tmp_path, seed=1, **over):
    params = defaults("spectrum") | {"b": 1e-4, "K": 2, "n": 600} | over
    return ScenarioConfig("spectrum", params, str(tmp_path), seed)


def test_spectrum_scenario(tmp_path):
    rep = scenarios.run_scenario(_spectrum_cfg(tmp_path, gap_trials=5))
    assert rep.exit_code == 0
    rows = list(csv.DictReader(open(rep.files["csv"])))
    assert [int(r["k"]) for r in rows] == [0, 1, 2]
    assert set(rep.summary["gap"]) == {"0", "1"}
    assert parse_config(rep.summary["config"]).parameters["n"] == 600


def test_identical_seed_bit_identical(tmp_path):
    blobs = []
    for _ in range(2):
        rep = scenarios.run_scenario(_spectrum_cfg(tmp_path, seed=5, gap_trials=8))
        blobs.append((rep.files["csv"].read_bytes(), rep.files["json"].read_bytes()))
    assert blobs[0] == blobs[1]


def test_seed_changes_random_trials(tmp_path):
    a = scenarios.run_scenario(_spectrum_cfg(tmp_path / "a", seed=1, gap_trials=8))
    b = scenarios.run_scenario(_spectrum_cfg(tmp_path / "b", seed=2, gap_trials=8))
    assert a.summary["gap"] != b.summary["gap"]


def test_derive_seed_streams_differ():
    assert scenarios.derive_seed(1, 0) != scenarios.derive_seed(1, 1)
    assert scenarios.derive_seed(1, 0) == scenarios.derive_seed(1, 0)


def test_sweep_one_row_per_pair(tmp_path, monkeypatch):
    monkeypatch.setenv(scenarios.THREADS_ENV, "2")
    params = defaults("sweep") | {"b_list": (1e-3, 1e-4, 1e-5), "k_list": (0, 2), "n": 400}
    rep = scenarios.run_scenario(ScenarioConfig("sweep", params, str(tmp_path)))
    rows = list(csv.DictReader(open(rep.files["csv"])))
    pairs = [(float(r["b"]), int(r["k"])) for r in rows]
    assert pairs == [(b, k) for b in (1e-3, 1e-4, 1e-5) for k in (0, 2)]
    assert rep.summary["workers"] == 2
    assert len(rep.summary["entries"]) == 3


def test_worker_count(monkeypatch):
    monkeypatch.delenv(scenarios.THREADS_ENV, raising=False)
    assert scenarios.worker_count(0) == 1
    assert scenarios.worker_count(4) == 4
    monkeypatch.setenv(scenarios.THREADS_ENV, "2")
    assert scenarios.worker_count(0) == 2
    assert scenarios.worker_count(8) == 2
    monkeypatch.setenv(scenarios.THREADS_ENV, "many")
    with pytest.raises(ConfigurationError):
        scenarios.worker_count(0)


def test_ode_scenario(tmp_path):
    params = defaults("ode") | {"s_end_ratio": 1e4}
    rep = scenarios.run_scenario(ScenarioConfig("ode", params, str(tmp_path)))
    assert rep.exit_code == 0
    rows = list(csv.DictReader(open(rep.files["csv"])))
    assert float(rows[-1]["lambda"]) < float(rows[0]["lambda"])


@pytest.mark.parametrize("exc, code", [(ConfigurationError, 2), (NumericalError, 3),
                                       (RegimeError, 4)])
def test_error_categories_map_to_exit_codes(tmp_path, monkeypatch, exc, code):
    def boom(cfg):
        raise exc("forced")

    monkeypatch.setitem(scenarios._DISPATCH, "spectrum", boom)
    rep = scenarios.run_scenario(_spectrum_cfg(tmp_path))
    assert rep.exit_code == code
    summ = json.loads(rep.files["json"].read_text())
    assert summ["error"] == {"category": exc.__name__, "message": "forced"}
    with pytest.raises(exc):
        scenarios.run_scenario(_spectrum_cfg(tmp_path), raise_errors=True)


def test_real_domain_error_exit_code(tmp_path):
    rep = scenarios.run_scenario(_spectrum_cfg(tmp_path, K=11))
    assert rep.exit_code == 2


@pytest.fixture(scope="module")
def verify_report(tmp_path_factory):
    out = tmp_path_factory.mktemp("verify")
    return scenarios.run_scenario(ScenarioConfig("verify", defaults("verify"), str(out)))


def test_verify_runs_every_check(verify_report):
    s = verify_report.summary
    assert s["passed"] + s["failed"] == len(registered())
    assert {m for m, _ in registered()} == {"weighted_basis", "spectral_operator",
                                             "modulation_dynamics", "stefan_solver", "harness"}
    assert verify_report.exit_code == (1 if s["failed"] else 0)


def test_verify_all_pass(verify_report):
    assert verify_report.summary["failures"] == []


# --- CLI --------------------------------------------------------------------


def test_cli_spectrum(tmp_path, capsys):
    rc = cli.main(["spectrum", "--output-dir", str(tmp_path), "--b", "1e-3", "--K=2",
                   "--n", "400", "--quiet"])
    assert rc == 0
    assert (tmp_path / "spectrum.csv").exists()
    assert "csv:" in capsys.readouterr().out


def test_cli_bad_value(tmp_path, capsys):
    rc = cli.main(["pde", "--output-dir", str(tmp_path), "--k", "-1", "--bogus", "2"])
    err = capsys.readouterr().err
    assert rc == 2
    assert "cli.k" in err and "cli.bogus: unknown key" in err


def test_cli_config_file(tmp_path):
    cfgfile = tmp_path / "run.ini"
    cfgfile.write_text(f"[run]\ncommand = spectrum\noutput_dir = {tmp_path}/o\n"
                       "[spectrum]\nK = 1\nn = 300\n")
    assert cli.main(["spectrum", "--config", str(cfgfile), "--quiet"]) == 0
    rows = list(csv.DictReader(open(tmp_path / "o" / "spectrum.csv")))
    assert [int(r["k"]) for r in rows] == [0, 1]


def test_cli_missing_config(tmp_path, capsys):
    assert cli.main(["spectrum", "--config", str(tmp_path / "none.ini")]) == 2


def test_cli_dangling_flag(capsys):
    assert cli.main(["spectrum", "--b"]) == 2
