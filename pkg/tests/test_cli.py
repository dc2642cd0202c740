import json

import pytest

from gridmesh.cli import (EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, _parse_fault,
                          _resolve_profile, _single_region_case, main)
from gridmesh.config import resolve
from gridmesh.model import bundled_case_path, load_bundled_case

CASE9 = str(bundled_case_path("case9"))
CASE3 = str(bundled_case_path("case3"))


class TestUsage:
    def test_no_command(self, capsys):
        assert main([]) == EXIT_USAGE

    def test_unknown_flag(self, capsys):
        assert main(["ybus", CASE3, "--frobnicate"]) == EXIT_USAGE
        assert "usage" in capsys.readouterr().err

    def test_unknown_command(self, capsys):
        assert main(["transmogrify"]) == EXIT_USAGE

    def test_missing_required(self, capsys):
        assert main(["ue", "--script", "x.json"]) == EXIT_USAGE


class TestYbus:
    def test_prints_three_bus_matrix(self, capsys):
        assert main(["ybus", CASE3]) == EXIT_OK
        out = capsys.readouterr().out
        lines = [l for l in out.splitlines() if not l.startswith("#")]
        assert lines[0] == "bus,1,2,3"
        assert len(lines) == 4
        # spot value: self-admittance of bus 1 from the two attached branches
        from gridmesh.ybus import build_ybus
        y = build_ybus(load_bundled_case("case3"))
        v = y.entries[(0, 0)]
        assert f"{v.real:+.4f}{v.imag:+.4f}j" in lines[1]

    def test_missing_case_file(self, capsys):
        assert main(["ybus", "/nonexistent/case.txt"]) == EXIT_RUNTIME


class TestSimulate:
    def test_simulate_with_trajectory(self, tmp_path, capsys):
        out_csv = tmp_path / "traj.csv"
        code = main(["simulate", CASE9, "bus=7,t_fault=0.1,t_clear=0.2,branch=6",
                     "--t-end", "1.0", "--out", str(out_csv)])
        assert code == EXIT_OK
        assert "verdict:" in capsys.readouterr().out
        header = out_csv.read_text().splitlines()[0]
        assert header.startswith("t,delta_1")

    def test_fault_spec_needs_bus(self):
        assert main(["simulate", CASE9, "t_fault=0.1,t_clear=0.2"]) == EXIT_USAGE

    def test_parse_fault(self):
        f = _parse_fault("bus=7,t_fault=0.1,t_clear=0.3,branch=6")
        assert (f.faulted_bus, f.cleared_branch) == (7, 6)
        assert _parse_fault("bus=2,t_fault=0.0,t_clear=0.5").cleared_branch is None


class TestSample:
    def test_prints_representatives(self, capsys):
        code = main(["sample", "dist=gaussian,sigma=0.05,dims=2",
                     "--n-raw", "50", "--k", "4", "--seed", "9"])
        assert code == EXIT_OK
        lines = capsys.readouterr().out.splitlines()
        assert lines[0] == "id,weight,m1,m2"
        assert 2 <= len(lines) <= 5
        w = sum(float(l.split(",")[1]) for l in lines[1:])
        assert w == pytest.approx(1.0, abs=1e-9)


class TestReportCommand:
    def test_unknown_run_exit_2(self, tmp_path, capsys):
        (tmp_path / "logs").mkdir()
        code = main(["report", "ee" * 16, "--out-dir", str(tmp_path)])
        assert code == EXIT_RUNTIME
        assert "not found" in capsys.readouterr().err


class TestConfigPrecedence:
    def test_profile_flag_beats_config(self, tmp_path):
        cfg_file = tmp_path / "conf.cfg"
        cfg_file.write_text("link.profile = zero\nlink.seed = 3\n")

        class Args:
            profile = None
            config = str(cfg_file)

        from gridmesh.config import load_config
        cfg = load_config(cfg_file)
        p = _resolve_profile(Args(), cfg)
        assert p.delay_max_ms == 0.0 and p.seed == 3      # config file wins over default

        Args.profile = "default5g"
        p2 = _resolve_profile(Args(), cfg)
        assert p2.delay_max_ms == 18.5                     # flag beats config file
        assert p2.seed == 3                                # untouched keys still apply

    def test_resolve_chain(self):
        assert resolve("flag", {"k.x": "file"}, "k.x", "default") == "flag"
        assert resolve(None, {"k.x": "file"}, "k.x", "default") == "file"
        assert resolve(None, {}, "k.x", "default") == "default"


class TestSingleRegionCase:
    def test_all_owners_rewritten(self):
        case = _single_region_case(load_bundled_case("case9"), "RX")
        assert case.regions() == ["RX"]
        assert all(b.owner_region == "RX" for b in case.buses)


class TestUeCommand:
    def test_connection_refused_exit_2(self, tmp_path, capsys):
        script = tmp_path / "s.json"
        script.write_text(json.dumps([]))
        code = main(["ue", "--edge-addr", "127.0.0.1:9", "--script", str(script),
                     "--profile", "zero"])
        assert code == EXIT_RUNTIME
