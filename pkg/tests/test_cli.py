import json

import numpy as np
import pytest

from kpzlab import cli, sim
from kpzlab.field import NumericalError

WICK = ["wick-verify", "--seed", "1", "--removal", "[[0,0]]", "--n-configs", "6", "--eps", "0.05,0.1",
        "--N-max", "3"]


def _run(tmp_path, name, *argv):
    out = tmp_path / name
    return cli.run([*argv, "--out", str(out)]), out


def test_missing_required_key_is_config_error(tmp_path, capsys):
    code, _ = _run(tmp_path, "a", "renorm", "--family", "sqrt1pu2", "--eps", "0.05")
    assert code == cli.EXIT_CONFIG
    assert "seed" in capsys.readouterr().err


def test_unknown_key_in_file_rejected(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"F": "sqrt1pu2", "eps": [0.05], "seed": 0, "mystery": 1}))
    code, _ = _run(tmp_path, "b", "renorm", str(cfg))
    assert code == cli.EXIT_CONFIG


def test_bad_command_and_bad_values(tmp_path):
    with pytest.raises(SystemExit) as info:
        cli.run(["no-such-command"])
    assert info.value.code == cli.EXIT_CONFIG
    code, _ = _run(tmp_path, "c", "coupling", "--family", "cubic")
    assert code == cli.EXIT_CONFIG
    code, _ = _run(tmp_path, "d", "simulate", "--family", "sqrt1pu2", "--eps", "abc", "--seed", "0")
    assert code == cli.EXIT_CONFIG


def test_flags_override_file_and_config_is_echoed(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"command": "coupling", "F": "poly:0,0,1,0,0.1", "n_mc": 5000, "seed": 3}))
    code, out = _run(tmp_path, "e", "coupling", str(cfg), "--seed", "4")
    assert code == cli.EXIT_OK
    echo = json.loads((out / "config.json").read_text())
    assert echo["seed"] == 4 and echo["n_mc"] == 5000 and echo["command"] == "coupling"
    assert echo["F"] == {"family": "poly", "coeffs": [0.0, 0.0, 1.0, 0.0, 0.1]}
    rows = (out / "coupling.csv").read_text().splitlines()
    assert rows[0] == "quantity,quadrature,mc,mc_stderr,z" and len(rows) == 4
    summary = (out / "summary.txt").read_text()
    assert "PASS a quadrature vs MC" in summary


def test_wick_verify_outputs_and_determinism(tmp_path):
    code1, out1 = _run(tmp_path, "w1", *WICK, "--workers", "1")
    code4, out4 = _run(tmp_path, "w4", *WICK, "--workers", "4")
    assert code1 == code4 == cli.EXIT_OK
    a = (out1 / "trials.csv").read_bytes()
    assert a == (out4 / "trials.csv").read_bytes()
    assert a.splitlines()[0] == b"trial,eps,lhs,ratio_N1,ratio_N2,ratio_N3"
    assert len(a.splitlines()) == 7


def test_failed_check_exits_2(tmp_path):
    code, out = _run(tmp_path, "f", *WICK, "--bound", "1e-30")
    assert code == cli.EXIT_ASSERT
    assert "FAIL" in (out / "summary.txt").read_text()


def test_numerical_failure_exits_3(tmp_path, monkeypatch):
    def boom(cfg):
        raise NumericalError("quadrature disagreement")

    monkeypatch.setitem(cli.COMMANDS, "coupling", boom)
    code, out = _run(tmp_path, "g", "coupling", "--family", "sqrt1pu2")
    assert code == cli.EXIT_NUMERIC
    assert "numerical consistency failure" in (out / "summary.txt").read_text()


def test_simulate_binary_and_csv(tmp_path):
    base = ["simulate", "--family", "poly:0,0,1", "--eps", "0.2", "--seed", "2", "--T", "0.002",
            "--record-every", "4"]
    code, out = _run(tmp_path, "s1", *base, "--format", "binary")
    assert code == cli.EXIT_OK
    h = sim.read_binary(out / "field.bin")
    code, out2 = _run(tmp_path, "s2", *base)
    assert code == cli.EXIT_OK
    data = np.loadtxt(out2 / "field.csv", delimiter=",", skiprows=1)
    assert data.shape[0] == h.values.size
    assert np.allclose(np.sort(data[:, 2]), np.sort(h.values.ravel()))


def test_renorm_report_lists_assembly(tmp_path):
    code, out = _run(tmp_path, "r", "renorm", "--family", "poly:0,0,1", "--eps", "0.1", "--seed", "0",
                     "--n-samples", "2000")
    assert code == cli.EXIT_OK
    assert "C_eps = a*C2 + a^3*(C220 + 4*C211 + C220p)" in (out / "summary.txt").read_text()
    hdr = (out / "constants.csv").read_text().splitlines()[0]
    assert hdr.startswith("eps,a,c2,c220")


def test_model_scaling_resolution_is_config_error(tmp_path):
    code, _ = _run(tmp_path, "m", "model-scaling", "--symbol", "oneP", "--family", "poly:0,0,1", "--eps", "0.1",
                   "--seed", "0", "--lambdas", "0.01,0.1", "--n-paths", "200")
    assert code == cli.EXIT_CONFIG


def test_value_parsers():
    assert cli._ints("0:3") == [0, 1, 2] and cli._ints(2) == [0, 1] and cli._ints("4,5") == [4, 5]
    assert cli._floats("0.1, 0.2") == [0.1, 0.2]
    assert cli._family("gauss") == {"family": "gauss"}
    with pytest.raises(ValueError):
        cli._json_list("{}")
