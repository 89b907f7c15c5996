from __future__ import annotations

import csv
import importlib.resources as res
import json

import numpy as np
import pytest

from qkdnet import cli, tagio
from qkdnet.config import ConfigError, load_config, parse_config

TINY_CFG = """
[network]
users = 2
subnets = 1

[source]
pair_rate_hz = 5e4
heralding = 0.9

[security]
xi_ph = 1e-5

[sim]
duration_s = 1.0
seed = 77
tau_c_ps = 200

[[users]]
id = 0
loss_db = 1.0
length_m = 100.0
e_pol = 0.02
pam = { delta_ps = 3700, split = 0.5 }
detectors = [
    { efficiency = 0.9, jitter_fwhm_ps = 60.0, dark_hz = 500.0 },
    { efficiency = 0.9, jitter_fwhm_ps = 60.0, dark_hz = 500.0, delay_ps = 40 },
]

[[users]]
id = 1
loss_db = 1.0
e_pol = 0.02
detectors = [
    { efficiency = 0.9, jitter_fwhm_ps = 60.0, dark_hz = 500.0 },
    { efficiency = 0.9, jitter_fwhm_ps = 60.0, dark_hz = 500.0 },
]
"""


@pytest.fixture()
def tiny_cfg(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_CFG)
    return path


def shipped(name):
    return res.as_file(res.files("qkdnet") / "configs" / name)


class TestConfigSchema:
    def test_tiny_config_parses(self, tiny_cfg):
        cfg = load_config(tiny_cfg)
        assert cfg.n_users == 2 and cfg.k_subnets == 1
        assert cfg.source.pair_rate_hz == 5e4
        assert cfg.sim.tau_c_ps == 200
        assert cfg.stations[0].detectors[1].delay_ps == 40
        assert cfg.calibration_delays()[0] == (0, 40)

    def test_lab8_shipped_config(self):
        with shipped("lab8.cfg") as path:
            cfg = load_config(path)
        assert cfg.n_users == 8 and cfg.k_subnets == 2
        assert cfg.sim.tau_c_ps is None  # "optimize"
        assert cfg.stations[2].pam_transmit_fraction == 0.56
        assert cfg.stations[7].detectors[1].efficiency == 0.2

    def test_bristol8_shipped_config(self):
        with shipped("bristol8.cfg") as path:
            cfg = load_config(path)
        assert cfg.sim.duration_s == 60.0
        assert cfg.stations[0].fiber_loss_db == pytest.approx(16.3)
        assert cfg.stations[0].fiber_length_m == pytest.approx(12632.0)
        assert cfg.stations[5].detectors[0].dead_time_ps == 1_000_000
        assert cfg.stations[3].fiber_loss_db > cfg.stations[1].fiber_loss_db

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text(TINY_CFG + "\n[extra]\nx = 1\n")
        with pytest.raises(ConfigError, match="unknown"):
            load_config(path)

    def test_unknown_nested_key_rejected(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text(TINY_CFG.replace("loss_db = 1.0", "loss_db = 1.0\nfrobnicate = 3", 1))
        with pytest.raises(ConfigError, match="users\\[0\\]"):
            load_config(path)

    def test_missing_section_rejected(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text(TINY_CFG.replace("[source]", "[sourcex]"))
        with pytest.raises(ConfigError):
            load_config(path)

    def test_missing_user_rejected(self, tmp_path):
        # keep only the first [[users]] table: ids no longer cover 0..n-1
        first_block_end = TINY_CFG.rfind("[[users]]")
        path = tmp_path / "bad.cfg"
        path.write_text(TINY_CFG[:first_block_end])
        with pytest.raises(ConfigError, match="missing \\[1\\]"):
            load_config(path)

    def test_bad_tau_rejected(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text(TINY_CFG.replace('tau_c_ps = 200', 'tau_c_ps = "sometimes"'))
        with pytest.raises(ConfigError, match="tau_c_ps"):
            load_config(path)

    def test_bad_range_rejected(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text(TINY_CFG.replace("e_pol = 0.02", "e_pol = 0.7", 1))
        with pytest.raises(ConfigError):
            load_config(path)

    def test_optimize_tau(self, tmp_path):
        path = tmp_path / "opt.cfg"
        path.write_text(TINY_CFG.replace('tau_c_ps = 200', 'tau_c_ps = "optimize"'))
        assert load_config(path).sim.tau_c_ps is None

    def test_worst_case_alpha_mode(self, tmp_path):
        path = tmp_path / "wc.cfg"
        path.write_text(TINY_CFG.replace("xi_ph = 1e-5", 'xi_ph = 1e-5\nalpha_mode = "worst_case"'))
        assert load_config(path).alpha_mode == "worst_case"

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "nope.cfg")


class TestCliPlan:
    def test_plan_eight_users(self, tmp_path, capsys):
        out = tmp_path / "plan.json"
        assert cli.main(["plan", "--users", "8", "--subnets", "2", "--out", str(out)]) == 0
        stdout = capsys.readouterr().out
        assert "16 channels" in stdout and "28 links" in stdout and "4 premium" in stdout
        doc = json.loads(out.read_text())
        assert doc["n_users"] == 8

    def test_plan_divisibility_exit_2(self, tmp_path, capsys):
        out = tmp_path / "plan.json"
        assert cli.main(["plan", "--users", "9", "--subnets", "2", "--out", str(out)]) == 2
        assert "subnet" in capsys.readouterr().err.lower()
        assert not out.exists()

    def test_plan_two_users(self, tmp_path, capsys):
        out = tmp_path / "p.json"
        assert cli.main(["plan", "--users", "2", "--subnets", "1", "--out", str(out)]) == 0
        assert "1 links" in capsys.readouterr().out


class TestCliSimulateDistill:
    def test_full_workflow(self, tiny_cfg, tmp_path, capsys):
        tags = tmp_path / "tags"
        assert cli.main([
            "simulate", "--config", str(tiny_cfg), "--out-dir", str(tags),
        ]) == 0
        files = sorted(p.name for p in tags.iterdir())
        assert files == ["user00.qnt", "user01.qnt"]
        assert all((tags / f).stat().st_size > tagio.HEADER_SIZE for f in files)

        out_csv = tmp_path / "report.csv"
        figs = tmp_path / "figs"
        assert cli.main([
            "distill", "--config", str(tiny_cfg), "--tags", str(tags),
            "--out", str(out_csv), "--figures", str(figs),
            "--histograms", str(tmp_path / "hists"),
        ]) == 0
        rows = list(csv.DictReader(out_csv.open()))
        data_rows = [r for r in rows if r["block_index"] != "total"]
        assert len(data_rows) == 1
        assert float(data_rows[0]["e_b"]) < 0.1
        assert int(data_rows[0]["n_f_simple"]) > 0
        assert (figs / "key_report.png").stat().st_size > 0
        assert (figs / "block_rates.png").stat().st_size > 0
        assert (tmp_path / "hists" / "g2_0-1.csv").exists()

    def test_simulate_deterministic_bytes(self, tiny_cfg, tmp_path):
        d1, d2 = tmp_path / "a", tmp_path / "b"
        cli.main(["simulate", "--config", str(tiny_cfg), "--out-dir", str(d1)])
        cli.main(["simulate", "--config", str(tiny_cfg), "--out-dir", str(d2)])
        for name in ("user00.qnt", "user01.qnt"):
            assert (d1 / name).read_bytes() == (d2 / name).read_bytes()

    def test_emit_merged_files(self, tiny_cfg, tmp_path):
        tags = tmp_path / "tags"
        cli.main(["simulate", "--config", str(tiny_cfg), "--out-dir", str(tags),
                  "--emit-merged"])
        header, _, det = tagio.read_stream(tags / "user00.merged.qnt")
        assert header.merged and det is None

    def test_broken_config_exit_2(self, tmp_path, capsys):
        path = tmp_path / "broken.cfg"
        path.write_text(TINY_CFG.replace("[[users]]", "[[userz]]", 1))
        assert cli.main(["simulate", "--config", str(path),
                         "--out-dir", str(tmp_path / "t")]) == 2

    def test_distill_empty_dir_exit_2(self, tiny_cfg, tmp_path):
        empty = tmp_path / "empty"
        empty.mkdir()
        assert cli.main(["distill", "--config", str(tiny_cfg), "--tags", str(empty),
                         "--out", str(tmp_path / "r.csv")]) == 2

    def test_distill_missing_dir_exit_2(self, tiny_cfg, tmp_path):
        assert cli.main(["distill", "--config", str(tiny_cfg),
                         "--tags", str(tmp_path / "nothere"),
                         "--out", str(tmp_path / "r.csv")]) == 2

    def test_plan_mismatch_exit_2(self, tiny_cfg, tmp_path):
        plan_path = tmp_path / "p8.json"
        cli.main(["plan", "--users", "8", "--subnets", "2", "--out", str(plan_path)])
        assert cli.main(["simulate", "--config", str(tiny_cfg), "--plan", str(plan_path),
                         "--out-dir", str(tmp_path / "t")]) == 2


class TestCliSweep:
    def test_power_sweep(self, tiny_cfg, tmp_path):
        out = tmp_path / "power.csv"
        figs = tmp_path / "figs"
        assert cli.main([
            "sweep", "power", "--config", str(tiny_cfg), "--out", str(out),
            "--min", "0.5", "--max", "50", "--points", "9", "--figures", str(figs),
        ]) == 0
        rows = list(csv.DictReader(out.open()))
        assert sum(1 for r in rows if r["link"] == "total") == 9
        assert (figs / "sweep_power.png").stat().st_size > 0

    def test_loss_sweep(self, tmp_path):
        out = tmp_path / "loss.csv"
        assert cli.main([
            "sweep", "loss", "--families", "8:2,16:4", "--out", str(out),
            "--min", "0", "--max", "10", "--points", "5",
        ]) == 0
        rows = list(csv.DictReader(out.open()))
        assert {r["family"] for r in rows} == {"8u2s", "16u4s"}
        assert len(rows) == 10

    def test_bad_family_exit_2(self, tmp_path):
        assert cli.main(["sweep", "loss", "--families", "8x2",
                         "--out", str(tmp_path / "x.csv")]) == 2

    def test_unknown_kind_usage_error(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            cli.main(["sweep", "frequency", "--out", str(tmp_path / "x.csv")])
        assert exc.value.code == 2
