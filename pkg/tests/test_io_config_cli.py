import json
import math
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bchopt import io
from bchopt.cli import main
from bchopt.config import ConfigError, build_problem, parse_config, parse_config_text, profile_field, serialize
from bchopt.grid import Grid
from bchopt.model import ModelParams
from bchopt.state import solve_forward
from bchopt.grid import TimeGrid
from bchopt.model import QUARTIC

ROOT = Path(__file__).resolve().parents[1]
TINY = ROOT / "configs" / "tiny.ini"

SMALL = """\
[grid]
n = 8, 8
bc_mode = {bc}

[time]
t_final = 0.02
steps = 2

[model]
nu = 0.5

[cost]
b1 = 1.0
b2 = 1.0
b3 = 0.1
phi_Q = cosine:0.3
phi_Omega = cosine:0.3

[run]
phi0 = {phi0}
seed = 3
{extra}
"""


def _write(tmp_path, bc="periodic", phi0="two-bump:0.8", extra=""):
    p = tmp_path / "run.ini"
    p.write_text(SMALL.format(bc=bc, phi0=phi0, extra=extra))
    return p


# -- snapshots ----------------------------------------------------------------------------


@given(st.sampled_from([(5,), (4, 5), (6, 4)]), st.sampled_from(["periodic", "box-neumann"]), st.data())
@settings(max_examples=30)
def test_field_round_trip(n, bc, data):
    g = Grid(n, (1.5,) * len(n), bc)
    a = data.draw(arrays(np.float64, n, elements=st.floats(allow_nan=False, allow_infinity=False)))
    g2, b = io.decode_field(io.encode_field(g, a), g.length)
    assert g2 == g
    assert np.array_equal(a, b)


def test_field_header_layout():
    g = Grid((4, 5), (1.0, 1.0), "box-neumann")
    buf = io.encode_field(g, np.arange(20.0).reshape(4, 5))
    assert buf[:4] == b"BCHF"
    assert buf[4:8] == (1).to_bytes(4, "little") and buf[8:12] == (2).to_bytes(4, "little")
    assert buf[20] == 1
    assert len(buf) == 21 + 160


def test_field_bad_input():
    g = Grid((4,), (1.0,))
    buf = io.encode_field(g, np.zeros(4))
    with pytest.raises(io.FormatError, match="magic"):
        io.decode_field(b"XXXX" + buf[4:])
    with pytest.raises(io.FormatError):
        io.decode_field(buf[:-3])
    with pytest.raises(ValueError):
        io.encode_field(g, np.zeros(5))


def test_trajectory_round_trip(tmp_path):
    g = Grid((6, 6), (2 * math.pi, 2 * math.pi), "periodic")
    tg = TimeGrid(0.03, 3)
    X, Y = g.cell_coords()
    u = np.stack([np.stack([0.2 * np.sin(Y), 0.1 * np.cos(X)])] * 3)
    tr = solve_forward(0.5 * np.cos(X) * np.cos(Y), u, ModelParams(nu=0.5), QUARTIC, tg, g)
    io.write_trajectory(tr, tmp_path / "t")
    back = io.read_trajectory(tmp_path / "t")
    assert back["levels"] == [0, 1, 2, 3]
    for k in range(4):
        assert np.array_equal(back["phi"][k], tr.phi[k])
    for k in range(1, 4):
        assert np.array_equal(back["mu"][k], tr.mu[k - 1])
        assert np.array_equal(back["w"][k], tr.w[k - 1])
        assert np.array_equal(back["v"][k], tr.v[k - 1])
    rows = io.read_csv(tmp_path / "t" / "diagnostics.csv")
    assert list(rows[0]) == io.DIAG_COLUMNS and len(rows) == 4
    io.write_control(u, g, tmp_path / "c")
    assert np.array_equal(io.read_control(tmp_path / "c", 3, 2), u)


def test_read_trajectory_empty(tmp_path):
    with pytest.raises(FileNotFoundError):
        io.read_trajectory(tmp_path)


def test_csv_floats_round_trip(tmp_path):
    vals = [0.1, 1 / 3, 1e-300, -2.5e17]
    io.write_csv(tmp_path / "x.csv", ["a", "b"], [{"a": v, "b": float("nan")} for v in vals])
    rows = io.read_csv(tmp_path / "x.csv")
    assert [float(r["a"]) for r in rows] == vals
    assert all(r["b"] == "" for r in rows)


def test_content_hash_matches_git_blob():
    assert io.content_hash("hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a"


def test_lock(tmp_path):
    with io.output_lock(tmp_path / "o"):
        with pytest.raises(io.LockError):
            with io.output_lock(tmp_path / "o"):
                pass
    with io.output_lock(tmp_path / "o"):
        pass


def test_export_plotdata(tmp_path):
    with pytest.raises(ValueError):
        io.export_plotdata(object(), "bogus", tmp_path)
    with pytest.raises(FileNotFoundError):
        io.export_plotdata(None, "energy", tmp_path)
    p = io.export_plotdata(([(0.1, 1e-2, 1.0), (0.01, 1e-4, 1.0)], 2.0), "taylor", tmp_path)
    rows = io.read_csv(p)
    assert [float(r["remainder"]) for r in rows] == [1e-2, 1e-4]


# -- configuration ------------------------------------------------------------------------


def test_parse_tiny_config():
    cfg = parse_config(TINY)
    assert cfg.grid.n == (12, 12) and cfg.time.steps == 5
    assert cfg.cost.b3 == 0.1 and cfg.run.seed == 7
    assert cfg.bounds.lo == (-5.0,) or np.all(np.asarray(cfg.bounds.lo) == -5.0)


def test_serialize_round_trip():
    cfg = parse_config(TINY)
    assert parse_config_text(serialize(cfg), TINY.parent) == cfg
    text = serialize(cfg)
    assert serialize(parse_config_text(text, TINY.parent)) == text


def _issues(text):
    with pytest.raises(ConfigError) as exc:
        parse_config_text(text)
    return exc.value.issues


def test_config_errors_carry_lines():
    text = SMALL.format(bc="periodic", phi0="cosine", extra="").replace("b3 = 0.1", "b3 = 0")
    text = text.replace("nu = 0.5", "nu = 0.5\nlambda_lo = -1")
    issues = _issues(text)
    msgs = {i.key: i for i in issues}
    assert "b3 must lie in (0, +inf)" in msgs["cost.b3"].message
    assert msgs["cost.b3"].line == text.splitlines().index("b3 = 0") + 1
    assert "drag must be strictly positive" in msgs["model.lambda_lo"].message
    assert msgs["model.lambda_lo"].line == text.splitlines().index("lambda_lo = -1") + 1


@pytest.mark.parametrize("edit", [
    ("n = 8, 8", "n = 8, 8\nbogus = 1"),
    ("bc_mode = periodic", "bc_mode = torus"),
    ("steps = 2", "steps = two"),
    ("[run]", "[nonsense]\nx = 1\n[run]"),
    ("nu = 0.5", "nu = 0.5\neps = 0.5"),
])
def test_config_rejects(edit):
    text = SMALL.format(bc="periodic", phi0="cosine", extra="").replace(*edit)
    assert _issues(text)


def test_config_collects_all_issues():
    text = SMALL.format(bc="torus", phi0="cosine", extra="").replace("b3 = 0.1", "b3 = -1")
    assert len(_issues(text)) >= 2


def test_profiles(tmp_path):
    g = Grid((8, 8), (2 * math.pi, 2 * math.pi))
    assert np.all(profile_field("constant:1", g) == 1.0)
    a = profile_field("random:0.2", g, seed=5)
    assert np.array_equal(a, profile_field("random:0.2", g, seed=5))
    assert np.max(np.abs(a)) == pytest.approx(0.2)
    io.write_field(tmp_path / "p.bchf", g, a)
    assert np.array_equal(profile_field("p.bchf", g, base_dir=tmp_path), a)


def test_build_problem():
    problem, opt = build_problem(parse_config(TINY))
    assert problem.control_shape == (5, 2, 12, 12)
    assert opt.bounds is not None


# -- command line -------------------------------------------------------------------------


def test_cli_forward_pure_phase(tmp_path):
    cfg = _write(tmp_path, phi0="constant:1")
    out = tmp_path / "o"
    assert main(["forward", "--config", str(cfg), "--out", str(out)]) == 0
    rows = io.read_csv(out / "traj" / "diagnostics.csv")
    assert all(float(r["energy"]) == 0.0 for r in rows)
    _, phi = io.read_field(out / "traj" / "step_000002" / "phi.bchf")
    assert np.all(phi == 1.0)
    assert io.verify_manifest(out) == []


def test_cli_config_error_exit_2(tmp_path, capsys):
    p = tmp_path / "bad.ini"
    p.write_text(SMALL.format(bc="periodic", phi0="cosine", extra="").replace("b3 = 0.1", "b3 = 0"))
    assert main(["forward", "--config", str(p), "--out", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    assert "b3 must lie in (0, +inf)" in err and "line" in err
    assert main(["forward", "--config", str(_write(tmp_path)), "--seed", "-1"]) == 2
    assert main(["forward", "--config", str(_write(tmp_path)), "--threads", "0"]) == 2


def test_cli_missing_profile_exit_2(tmp_path):
    cfg = _write(tmp_path, phi0="missing.bchf")
    assert main(["forward", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2


def test_cli_verification_failure_exit_4(tmp_path):
    cfg = _write(tmp_path, extra="fd_t = 50\ndirections = 2")
    out = tmp_path / "o"
    assert main(["grad-check", "--config", str(cfg), "--out", str(out)]) == 4
    assert (out / "grad_check.csv").exists()
    doc = json.loads((out / "manifest.json").read_text())
    assert doc["status"] == 4


def test_cli_locked_output_exit_2(tmp_path):
    cfg = _write(tmp_path)
    out = tmp_path / "o"
    with io.output_lock(out):
        assert main(["forward", "--config", str(cfg), "--out", str(out)]) == 2


def test_cli_reruns_are_byte_identical(tmp_path):
    cfg = _write(tmp_path, extra="directions = 2")
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert main(["optimize", "--config", str(cfg), "--out", str(out)]) == 0
    da = json.loads((a / "manifest.json").read_text())
    db = json.loads((b / "manifest.json").read_text())
    assert da["files"] == db["files"] and da["inputs"] == db["inputs"]
    assert "optimize.csv" in da["files"]


def test_manifest_detects_tampering(tmp_path):
    cfg = _write(tmp_path)
    out = tmp_path / "o"
    assert main(["forward", "--config", str(cfg), "--out", str(out)]) == 0
    target = out / "traj" / "step_000001" / "phi.bchf"
    buf = bytearray(target.read_bytes())
    buf[-1] ^= 1
    target.write_bytes(bytes(buf))
    (out / "plots" / "energy.csv").unlink()
    assert sorted(io.verify_manifest(out)) == ["plots/energy.csv", "traj/step_000001/phi.bchf"]


def test_cli_verify_all(tmp_path):
    out = tmp_path / "v"
    assert main(["verify-all", "--config", str(TINY), "--out", str(out)]) == 0
    for name in ("bruteforce", "spectral_brinkman", "appendix", "duality", "grad_check", "taylor"):
        rows = io.read_csv(out / "verify" / f"{name}.csv")
        assert rows
    assert all(r["pass"] == "1" for r in io.read_csv(out / "verify" / "duality.csv"))


def test_cli_sweep_and_taylor(tmp_path):
    cfg = _write(tmp_path)
    assert main(["taylor-test", "--config", str(cfg), "--out", str(tmp_path / "t")]) == 0
    rows = io.read_csv(tmp_path / "t" / "taylor.csv")
    assert abs(float(rows[0]["slope"]) - 2.0) <= 0.1
    assert main(["sparsity-sweep", "--config", str(cfg), "--out", str(tmp_path / "s"), "--threads", "2"]) == 0
    rows = io.read_csv(tmp_path / "s" / "sweep.csv")
    assert float(rows[-1]["sparsity_fraction"]) == 1.0


def test_console_script(tmp_path):
    exe = shutil.which("bch")
    cmd = [exe] if exe else [sys.executable, "-m", "bchopt.cli"]
    r = subprocess.run(cmd + ["forward", "--config", str(_write(tmp_path)), "--out", str(tmp_path / "o")],
                       capture_output=True, text=True, env={"BCH_LOG": "error", "PATH": "/usr/bin:/bin:/usr/local/bin"})
    assert r.returncode == 0, r.stderr
    r = subprocess.run(cmd + ["nonsense", "--config", "x"], capture_output=True, text=True)
    assert r.returncode == 2
