import json

import numpy as np
import pytest

from extdp import io, solve_classic, solve_extended
from extdp.cli import run
from extdp.config import load_config

SMALL = """
[dam]
T = 4
prices = [10.0, 8.0, 6.0, 10.0]
dx = 0.5
du = 0.5
dw = 1.0
dz = 0.1
dv = 0.1

[simulation]
n = 2000
seed = 3

# on this coarse grid the reached probability jumps across the target near
# lambda = 70, so the dual loop can only stop once the jump is tolerated
[uzawa]
tol = 0.06
cert_tol = 0.06
"""


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "small.toml"
    cfg.write_text(SMALL)
    for cmd, name in (("solve-classic", "c"), ("solve-extended", "e"), ("solve-dual", "d")):
        assert run([cmd, "--config", str(cfg), "--out", str(root / name)]) == 0
    return root, cfg


def summary(path):
    return json.loads((path / "summary.json").read_text())


class TestSolve:
    def test_artifacts(self, work):
        root, _ = work
        for name in ("c", "e", "d"):
            assert {p.name for p in (root / name).iterdir()} >= {"summary.json", "value_table.csv", "policy.csv",
                                                                  "trajectories.csv"}
        assert summary(root / "d")["results"]["converged"]
        assert summary(root / "e")["results"]["max_martingale_residual"] <= summary(root / "e")["results"]["eps_mart"]

    def test_classic_round_trip(self, work):
        root, cfg = work
        inst = load_config(cfg).instance()
        table, policy = solve_classic(inst.problem, inst.x_grid, inst.u_grid, inst.noise)
        vals = io.read_value_table(root / "c" / "value_table.csv", 0, 4, inst.x_grid.n)
        assert np.array_equal(vals, table.values)
        back = io.read_policy(root / "c" / "policy.csv", "classic", inst)
        assert np.array_equal(back.u_index, policy.u_index)
        assert summary(root / "c")["results"]["bellman_value"] == table.value(0, inst.x0)

    def test_extended_round_trip(self, work):
        root, cfg = work
        run_cfg = load_config(cfg)
        inst = run_cfg.instance()
        table, policy = solve_extended(inst.problem, inst.x_grid, inst.z_grid, inst.u_grid, inst.noise,
                                       run_cfg.inner_config(inst))
        vals = io.read_value_table(root / "e" / "value_table.csv", 0, 4, inst.x_grid.n, inst.z_grid.n)
        assert np.array_equal(vals, table.values)
        back = io.read_policy(root / "e" / "policy.csv", "extended", inst)
        assert np.array_equal(back.u_index, policy.u_index)
        assert all(np.array_equal(a, b) for a, b in zip(back.v_index, policy.v_index))


class TestSimulate:
    def test_reruns_are_byte_identical(self, work):
        root, _ = work
        for name in ("c", "e"):
            args = ["simulate", "--policy", str(root / name), "--x0", "10", "--n", "300", "--seed", "9"]
            assert run(args + ["--out", str(root / f"{name}_s1")]) == 0
            assert run(args + ["--out", str(root / f"{name}_s2")]) == 0
            for f in ("summary.json", "trajectories.csv"):
                assert (root / f"{name}_s1" / f).read_bytes() == (root / f"{name}_s2" / f).read_bytes()

    def test_restart_stage(self, work):
        root, _ = work
        assert run(["simulate", "--policy", str(root / "e"), "--t0", "2", "--x0", "10", "--z0", "-0.9",
                    "--n", "100", "--out", str(root / "e_t2")]) == 0
        sim = summary(root / "e_t2")["results"]["simulation"]
        assert sim["t0"] == 2 and sim["z0"] == -0.9


class TestAudit:
    def test_extended(self, work):
        root, _ = work
        assert run(["audit", "--method", "extended", "--policy", str(root / "e"), "--restart", "2,10,-0.9",
                    "--n", "200", "--out", str(root / "ae")]) == 0
        verdict = summary(root / "ae")["results"]["verdict"]
        assert verdict["consistent"] and verdict["note"] == ""

    def test_dual(self, work):
        root, _ = work
        assert run(["audit", "--method", "dual", "--policy", str(root / "d"), "--restart", "2,5",
                    "--level", "0.9", "--n", "0", "--out", str(root / "ad")]) == 0
        verdict = summary(root / "ad")["results"]["verdict"]
        assert verdict["required"] == -0.9 and isinstance(verdict["consistent"], bool)

    def test_method_policy_mismatch(self, work, capsys):
        root, _ = work
        code = run(["audit", "--method", "extended", "--policy", str(root / "d"), "--restart", "2,5,-0.9",
                    "--out", str(root / "bad")])
        assert code == 2
        assert json.loads(capsys.readouterr().err)["exit_code"] == 2


class TestExitCodes:
    def test_unknown_config_key(self, tmp_path, capsys):
        bad = tmp_path / "bad.toml"
        bad.write_text("[dam]\nfoo = 1\n")
        assert run(["solve-classic", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
        err = json.loads(capsys.readouterr().err)
        assert err["error"] == "ConfigInvalid" and any("foo" in p for p in err["problems"])

    def test_unknown_section(self, tmp_path):
        bad = tmp_path / "bad.toml"
        bad.write_text("[plots]\nwidth = 3\n")
        assert run(["solve-classic", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2

    def test_invalid_value(self, tmp_path):
        bad = tmp_path / "bad.toml"
        bad.write_text("[dam]\ndu = 0.25\n")
        assert run(["solve-classic", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2

    def test_bad_arguments(self):
        assert run(["solve-classic"]) == 2
        assert run(["no-such-command"]) == 2

    def test_not_converged_writes_artifacts(self, work, tmp_path):
        _, cfg = work
        out = tmp_path / "d"
        assert run(["solve-dual", "--config", str(cfg), "--max-iter", "1", "--tol", "0", "--out", str(out)]) == 3
        assert not summary(out)["results"]["converged"]

    def test_missing_config_file(self, tmp_path):
        assert run(["solve-classic", "--config", str(tmp_path / "none.toml"), "--out", str(tmp_path / "o")]) == 4

    def test_missing_policy_dir(self, tmp_path):
        assert run(["simulate", "--policy", str(tmp_path / "none"), "--x0", "1", "--out", str(tmp_path / "o")]) == 4


class TestSummarySchema:
    def test_unknown_field_rejected(self, work, tmp_path):
        root, _ = work
        doc = summary(root / "c")
        doc["results"]["surprise"] = 1
        (tmp_path / "summary.json").write_text(json.dumps(doc))
        with pytest.raises(ValueError):
            io.read_summary(tmp_path)

    def test_unknown_top_field_rejected(self, work, tmp_path):
        root, _ = work
        doc = summary(root / "c")
        doc["extra"] = {}
        (tmp_path / "summary.json").write_text(json.dumps(doc))
        with pytest.raises(ValueError):
            io.read_summary(tmp_path)

    def test_write_rejects_unknown_field(self, work, tmp_path):
        _, cfg = work
        with pytest.raises(ValueError):
            io.write_summary(tmp_path, "audit", "dual", load_config(cfg), {"verdict": {}, "extra": 1})


class TestReport:
    def test_tables_and_plot_data(self, work, capsys):
        root, _ = work
        out = root / "rep"
        runs = [str(root / n) for n in ("c", "e", "d")]
        assert run(["report-tables", "--runs", *runs, "--out", str(out)]) == 0
        text = capsys.readouterr().out
        assert text.strip() and (out / "tables.md").read_text() == text
        assert any((out / "plot_data").iterdir())
