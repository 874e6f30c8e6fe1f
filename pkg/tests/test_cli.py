import json

import jsonschema
import numpy as np
import pytest

from lrpq import cli
from lrpq import specification as sp
from lrpq.errors import DuplicateCell, InvalidConfig, NonNumericField, UnbalancedPanel
from lrpq.montecarlo import DgpSpec, generate


@pytest.fixture(scope="module")
def panel_csv(tmp_path_factory):
    d = generate(DgpSpec(1, 30, 12, 0.5, seed=2))
    path = tmp_path_factory.mktemp("data") / "panel.csv"
    cli.emit_panel(path, d.Y, d.X)
    return path, d


def _write(tmp_path, text):
    p = tmp_path / "p.csv"
    p.write_text(text)
    return p


def test_roundtrip_is_bit_exact(panel_csv):
    path, d = panel_csv
    panel = cli.ingest_panel(path)
    np.testing.assert_array_equal(panel.Y, d.Y)
    for a, b in zip(panel.X, d.X):
        np.testing.assert_array_equal(a, b)
    assert panel.regressors == ["x1", "x2"] and len(panel.units) == 30


def test_ingest_orders_times_numerically(tmp_path):
    p = _write(tmp_path, "unit,time,y\nb,10,1\nb,9,2\na,10,3\na,9,4\n")
    panel = cli.ingest_panel(p)
    assert panel.units == ["b", "a"] and panel.times == ["9", "10"]
    np.testing.assert_array_equal(panel.Y, [[2, 1], [4, 3]])


def test_ingest_errors(tmp_path):
    with pytest.raises(DuplicateCell, match=":3:"):
        cli.ingest_panel(_write(tmp_path, "unit,time,y\na,1,1\na,1,2\n"))
    with pytest.raises(UnbalancedPanel) as info:
        cli.ingest_panel(_write(tmp_path, "unit,time,y\na,1,1\na,2,1\nb,1,1\n"))
    assert info.value.missing == [("b", "2")]
    with pytest.raises(NonNumericField, match=":2:"):
        cli.ingest_panel(_write(tmp_path, "unit,time,y,x1\na,1,1,abc\n"))
    with pytest.raises(InvalidConfig):
        cli.ingest_panel(_write(tmp_path, "id,time,y\n"))


def test_cv_table_output(capsys):
    assert cli.main(["cv-table", "--N", "126", "--T", "28"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "test,alpha=0.01,alpha=0.05,alpha=0.1"
    assert lines[2] == "time homogeneity,5.70,4.07,3.35"
    assert lines[3] == "additive (n=3528),22.29,19.03,17.59"
    assert lines[1].startswith("unit homogeneity (n=126),")
    assert float(lines[1].split(",")[2]) == pytest.approx(sp.cv_unit(126, 0.05), abs=0.005)


def test_simulate_writes_table(tmp_path):
    code = cli.main(["simulate", "--table", "rmse", "--dgp", "1", "--N", "12", "--T", "10",
                     "--reps", "2", "--max-iter", "200", "--out", str(tmp_path)])
    assert code in (0, 2)
    lines = (tmp_path / "table2.csv").read_text().splitlines()
    assert lines[0] == "dgp,N,T,tau,rmse0,rmse1,rmse2" and len(lines) == 2


def test_test_subcommand_outputs_validate(panel_csv, tmp_path):
    path, _ = panel_csv
    code = cli.main(["test", "--data", str(path), "--ranks", "1,1,1", "--pca-ranks", "1,1", "--nu-scale", "0.05",
                     "--tests", "u,v", "--out", str(tmp_path), "--figures"])
    assert code in (0, 2)
    payload = json.loads((tmp_path / "tests.json").read_text())
    jsonschema.validate(payload, cli.load_schema("tests"))
    assert len(payload["tests"]) == 4
    assert all(0 <= t["p_value"] <= 1 for t in payload["tests"])
    ranks = json.loads((tmp_path / "ranks.json").read_text())
    jsonschema.validate(ranks, cli.load_schema("ranks"))
    assert ranks["ranks"] == [1, 1, 1] and ranks["source"] == "given"
    for name in ("theta_hat_0.csv", "theta_hat_2.csv", "factors_31_1.csv", "fig_theta_1.svg"):
        assert (tmp_path / name).exists()
    theta = np.loadtxt(tmp_path / "theta_hat_1.csv", delimiter=",", skiprows=1)[:, 1:]
    assert theta.shape == (30, 12)


def test_estimate_multiple_taus(panel_csv, tmp_path):
    path, _ = panel_csv
    code = cli.main(["estimate", "--data", str(path), "--ranks", "1,1,1", "--pca-ranks", "1,1", "--nu-scale", "0.05",
                     "--tau", "0.25,0.5", "--out", str(tmp_path)])
    assert code in (0, 2)
    assert (tmp_path / "tau_0.25" / "ranks.json").exists()
    assert (tmp_path / "tau_0.50" / "theta_hat_1.csv").exists()


def test_config_precedence(tmp_path):
    ini = tmp_path / "run.ini"
    ini.write_text("[estimation]\ntau = 0.3\nseed = 4\n[tests]\nT1 = 2\n")
    cfg = cli.load_config(ini, env={})
    assert cfg.tau == (0.3,) and cfg.seed == 4 and cfg.T1 == 2
    cfg = cli.load_config(ini, env={"LRPQ_SEED": "9", "LRPQ_TAU": "0.7"})
    assert cfg.seed == 9 and cfg.tau == (0.7,)
    cfg = cli.load_config(ini, env={"LRPQ_SEED": "9"}, flags={"seed": 11})
    assert cfg.seed == 11
    with pytest.raises(InvalidConfig):
        cli.load_config(None, env={"LRPQ_BOGUS": "1"})
    with pytest.raises(InvalidConfig):
        cli.load_config(None, env={}, flags={"tau": "1.5"})


def test_exit_codes(panel_csv, tmp_path, capsys):
    path, _ = panel_csv
    bad = _write(tmp_path, "unit,time,y\na,1,1\na,1,2\n")
    assert cli.main(["estimate", "--data", str(bad), "--out", str(tmp_path)]) == 1
    assert "error [cli] DuplicateCell" in capsys.readouterr().err
    code = cli.main(["estimate", "--data", str(path), "--ranks", "1,1,1", "--pca-ranks", "1,1", "--nu-scale", "0.05",
                     "--max-iter", "2", "--out", str(tmp_path / "o")])
    assert code == 2
