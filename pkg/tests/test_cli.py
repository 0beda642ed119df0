import math
import os
import subprocess
import sys

import pytest

from pvfim.cli import EXIT_CERTIFY, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_OK, main, read_trace_last

FAST = ["--schedule", "custom:beta=0.1,eta=0.5", "--lmax", "3"]
SMALL_GRID = ["--grid-x", "41", "--grid-y", "41", "--refine", "1"]


def run(argv, capsys):
    code = main(argv)
    out, err = capsys.readouterr()
    return code, out, err


def report_table(text):
    return {k: v.strip() for k, _, v in (ln.partition(" ") for ln in text.splitlines())}


def data_rows(path):
    return [ln for ln in path.read_text().splitlines() if not ln.startswith("#")]


# --- solve -------------------------------------------------------------------------------

def test_solve_writes_versioned_trace(tmp_path, capsys):
    out = tmp_path / "trace.csv"
    code, stdout, _ = run(["solve", *FAST, "--out", str(out)], capsys)
    assert code == EXIT_OK
    lines = out.read_text().splitlines()
    assert lines[0] == "# trace schema v1"
    assert "# problem=example3" in lines
    assert "# x0=3.0299999999999998" in lines
    rows = data_rows(out)
    assert rows[0] == "l,t,x0,y0,y1,G_value,a_norm,x_gap,y_grad_norm,slack,tau,J,K,eta"
    assert len(rows) > 1
    assert "status=max_outer" in stdout and "outer_iterations=3" in stdout


def test_solve_trace_is_byte_identical(tmp_path, capsys):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert run(["solve", *FAST, "--out", str(a)], capsys)[0] == EXIT_OK
    assert run(["solve", *FAST, "--out", str(b)], capsys)[0] == EXIT_OK
    assert a.read_bytes() == b.read_bytes()


def test_solve_to_stdout_keeps_summary_on_stderr(capsys):
    code, stdout, stderr = run(["solve", *FAST], capsys)
    assert code == EXIT_OK
    assert stdout.startswith("# trace schema v1")
    assert "status=" in stderr and "status=" not in stdout


def test_fig1_variant_schedule(tmp_path, capsys):
    out = tmp_path / "t.csv"
    code, *_ = run(["solve", "--schedule", "custom:T=2,J=l,K=2l", "--lmax", "4", "--out", str(out)], capsys)
    assert code == EXIT_OK
    rows = [r.split(",") for r in data_rows(out)[1:]]
    first = [r for r in rows if r[0] == "4"]
    assert {r[-3] for r in first} == {"4"} and {r[-2] for r in first} == {"8"}


def test_invalid_eps_exits_2(capsys):
    code, _, err = run(["solve", "--eps", "-1"], capsys)
    assert code == EXIT_CONFIG and "eps must be positive" in err


def test_config_file_line_numbers(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment\neps = 0.5\nc0 = 0.9\n")
    code, _, err = run(["solve", "--config", str(cfg)], capsys)
    assert code == EXIT_CONFIG and f"{cfg}:3" in err and "c0" in err


@pytest.mark.parametrize("body,needle", [
    ("bogus = 1\n", "unknown key"),
    ("lmax = 3\nlmax = 4\n", "duplicate key"),
    ("lmax = zero\n", "invalid value"),
    ("just a line\n", "expected key = value"),
])
def test_config_file_errors(tmp_path, capsys, body, needle):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text(body)
    code, _, err = run(["solve", "--config", str(cfg)], capsys)
    assert code == EXIT_CONFIG and needle in err and f"{cfg}:" in err


def test_flags_override_config(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("schedule = custom:beta=0.1,eta=0.5\nlmax = 50\n")
    out = tmp_path / "t.csv"
    code, stdout, _ = run(["solve", "--config", str(cfg), "--lmax", "2", "--out", str(out)], capsys)
    assert code == EXIT_OK and "outer_iterations=2" in stdout
    assert "# L_max=2" in out.read_text().splitlines()


def test_bad_schedule_and_start(capsys):
    assert run(["solve", "--schedule", "custom:J=0"], capsys)[0] == EXIT_CONFIG
    assert run(["solve", "--schedule", "custom:zeta=1"], capsys)[0] == EXIT_CONFIG
    assert run(["solve", "--x0", "0.1"], capsys)[0] == EXIT_CONFIG
    assert run(["solve", "--y0", "1,2,3"], capsys)[0] == EXIT_CONFIG


def test_numerical_failure_flushes_partial_trace(tmp_path, capsys):
    out = tmp_path / "t.csv"
    code, _, err = run(["solve", "--problem", "cli_plugins:nan_ascent",
                        "--schedule", "custom:beta=0.01,eta=0.01", "--lmax", "3",
                        "--x0", "3.03", "--y0", "0,9", "--out", str(out)], capsys)
    assert code == EXIT_NUMERICAL and "numerical failure" in err
    rows = data_rows(out)
    assert len(rows) > 1 and all(r.startswith("1,") for r in rows[1:])


def test_plugin_without_constants_runs(tmp_path, capsys):
    out = tmp_path / "t.csv"
    code, stdout, _ = run(["solve", "--problem", "cli_plugins:quadratic", *FAST, "--out", str(out)], capsys)
    assert code == EXIT_OK
    assert "# c0=0.125" in out.read_text().splitlines()


def test_bad_plugins_rejected(capsys):
    assert run(["solve", "--problem", "cli_plugins:not_a_problem"], capsys)[0] == EXIT_CONFIG
    assert run(["solve", "--problem", "no_such_module:f"], capsys)[0] == EXIT_CONFIG
    assert run(["solve", "--problem", "example4"], capsys)[0] == EXIT_CONFIG


def test_solve_with_certify(tmp_path, capsys):
    out = tmp_path / "t.csv"
    argv = ["solve", "--schedule", "custom:beta=0.1,eta=0.5", "--lmax", "60",
            "--certify", *SMALL_GRID, "--out", str(out)]
    code, stdout, _ = run(argv, capsys)
    assert code == EXIT_OK and "stationary=true" in stdout
    short = ["solve", *FAST, "--certify", *SMALL_GRID, "--out", str(out)]
    code, stdout, _ = run(short, capsys)
    assert code == EXIT_CERTIFY and "stationary=false" in stdout


# --- oracle ------------------------------------------------------------------------------

def test_oracle_csv_deterministic(tmp_path, capsys):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    argv = ["oracle", *SMALL_GRID]
    assert run([*argv, "--out", str(a), "--workers", "1"], capsys)[0] == EXIT_OK
    assert run([*argv, "--out", str(b), "--workers", "2"], capsys)[0] == EXIT_OK
    assert a.read_bytes() == b.read_bytes()
    text = a.read_text()
    assert "# grid_x=41" in text and "# phi_min=" in text


def test_oracle_density_doubling(tmp_path, capsys):
    def phi_min(gx, gy):
        code, stdout, _ = run(["oracle", "--grid-x", gx, "--grid-y", gy,
                               "--out", str(tmp_path / f"{gx}.csv")], capsys)
        assert code == EXIT_OK
        return float(stdout.split("phi_min=")[1].split()[0])

    assert abs(phi_min("101", "41") - phi_min("201", "81")) <= 1e-4


def test_oracle_rejects_one_cell_grid(capsys):
    assert run(["oracle", "--grid-x", "1"], capsys)[0] != EXIT_OK
    assert run(["oracle", "--grid-y", "1"], capsys)[0] == EXIT_CONFIG
    assert run(["oracle", "--refine", "-1"], capsys)[0] == EXIT_CONFIG


# --- constants ---------------------------------------------------------------------------

def test_constants_report(tmp_path, capsys, lip):
    out = tmp_path / "c.csv"
    code, stdout, _ = run(["constants", "--J", "1", "--out", str(out)], capsys)
    assert code == EXIT_OK
    table = report_table(stdout)
    assert float(table["M0_J"]) == 1.0
    assert float(table["M1_J"]) == 2 * lip.L0
    first = out.read_bytes()
    assert run(["constants", "--J", "1", "--out", str(out)], capsys)[0] == EXIT_OK
    assert out.read_bytes() == first


def test_constants_admissibility_flags(capsys):
    code, stdout, _ = run(["constants", "--J", "2", "--sigma", "0.5", "--tau", "1e-40",
                           "--T", "1e300", "--K", "1e12"], capsys)
    assert code == EXIT_OK
    table = report_table(stdout)
    assert table["admits_tau"] == "true" and table["admits_T"] == "true"
    assert table["admits_K"] == "true"
    code, stdout, _ = run(["constants", "--J", "2", "--sigma", "0.5", "--tau", "0.5",
                           "--T", "1", "--K", "1"], capsys)
    table = report_table(stdout)
    assert table["admits_tau"] == table["admits_T"] == table["admits_K"] == "false"


def test_constants_rejects_mu_above_LG(capsys):
    code, _, err = run(["constants", "--problem", "cli_plugins:huge_mu"], capsys)
    assert code == EXIT_CONFIG and "mu < L_G" in err


def test_constants_need_structure(capsys):
    assert run(["constants", "--problem", "cli_plugins:quadratic"], capsys)[0] == EXIT_CONFIG


# --- certify -----------------------------------------------------------------------------

def test_certify_optimum(tmp_path, capsys):
    s = 1.5 * math.pi
    out = tmp_path / "cert.csv"
    code, stdout, _ = run(["certify", "--x", repr(s), "--y", f"{s!r},{s / 2!r}",
                           *SMALL_GRID, "--out", str(out)], capsys)
    assert code == EXIT_OK and "stationary=true" in stdout
    assert "multipliers=1,2,0" in stdout
    rows = data_rows(out)
    assert rows[0] == "grad_F_x_norm,grad_F_y_norm,lower_residual,upper_residual,stationary"
    assert rows[1].endswith(",true")


def test_certify_not_stationary(capsys):
    p = math.pi
    code, stdout, _ = run(["certify", "--x", repr(p), "--y", f"{p!r},{p / 2!r}", *SMALL_GRID], capsys)
    assert code == EXIT_CERTIFY
    assert "stationary=false" in stdout and "grad_F_x_norm=1" in stdout


def test_certify_eps_infeasible_point(capsys):
    code, stdout, _ = run(["certify", "--x", "3", "--y", "10,0", *SMALL_GRID], capsys)
    assert code == EXIT_CERTIFY
    lower = float(stdout.split("lower_residual=")[1].split()[0])
    assert lower == pytest.approx(100 - 0.5)


def test_certify_outside_box(capsys):
    assert run(["certify", "--x", "0", "--y", "0,0"], capsys)[0] == EXIT_CONFIG
    assert run(["certify", "--x", "3", "--y", "100,0"], capsys)[0] == EXIT_CONFIG
    assert run(["certify", "--x", "3"], capsys)[0] == EXIT_CONFIG


def test_certify_from_trace(tmp_path, capsys):
    out = tmp_path / "t.csv"
    assert run(["solve", "--schedule", "custom:beta=0.1,eta=0.5", "--lmax", "60",
                "--out", str(out)], capsys)[0] == EXIT_OK
    x, y = read_trace_last(str(out), 1, 2)
    code, stdout, _ = run(["certify", "--trace", str(out), *SMALL_GRID], capsys)
    assert code == EXIT_OK and "stationary=true" in stdout
    assert abs(x[0] - 1.5 * math.pi) <= 1e-2


def test_certify_from_empty_trace(tmp_path, capsys):
    bad = tmp_path / "empty.csv"
    bad.write_text("# trace schema v1\n")
    assert run(["certify", "--trace", str(bad)], capsys)[0] == EXIT_CONFIG


# --- entry point -------------------------------------------------------------------------

def test_module_entry_point(tmp_path):
    env = dict(os.environ, PYTHONPATH=os.path.dirname(__file__))
    proc = subprocess.run([sys.executable, "-m", "pvfim", "constants", "--J", "3"],
                          capture_output=True, text=True, env=env, check=False)
    assert proc.returncode == 0 and proc.stdout.startswith("J ")
    proc = subprocess.run([sys.executable, "-m", "pvfim", "solve", "--eps", "0"],
                          capture_output=True, text=True, env=env, check=False)
    assert proc.returncode == 2 and "eps must be positive" in proc.stderr
